import copy

import numpy as np
import pytest
import torch

from avopt.alternate import AlternateConfig, PhaseError, run
from avopt.poseopt import LossWeights, PoseConfig, optimize_poses
from avopt.synth import perturb_frames
from avopt.training import TrainConfig, make_fields, train_avatars


def configs(rounds=1):
    pose = PoseConfig(iterations=4, batch_size=128, n_per_box=16, eval_rays=256, eval_every=2,
                      weights=LossWeights(n_grid=8))
    train = TrainConfig(iterations=4, batch_size=128, n_per_box=16, eval_every=2, eval_rays=256)
    return AlternateConfig(rounds=rounds, train=train, pose=pose)


@pytest.fixture(scope="module")
def setup(tiny_pair):
    synthetic, gt = tiny_pair
    init = perturb_frames(synthetic.poses, np.deg2rad(5.0), 0.03, 0)
    fields = make_fields(synthetic.bodies, seed=0, dtype=torch.float64)
    return gt, init, fields, synthetic.joints()


def test_rounds_validation():
    with pytest.raises(ValueError):
        AlternateConfig(rounds=0)
    with pytest.raises(ValueError):
        AlternateConfig.from_dict({"rounds": 1, "speed": 3})


def test_one_round_is_pose_then_avatar(setup):
    gt, init, fields, _ = setup
    cfg = configs()
    res = run(gt, init, cfg, fields=copy.deepcopy(fields))
    pres = optimize_poses(gt, copy.deepcopy(fields), init, cfg.pose)
    assert all(np.array_equal(a.theta, b.theta) and np.array_equal(a.trans, b.trans)
               for fa, fb in zip(res.poses, pres.poses) for a, b in zip(fa, fb))
    trained = train_avatars(gt, pres.poses, cfg.train, copy.deepcopy(fields)).fields
    expect = trained if res.rounds[0]["avatar_accepted"] else fields
    for a, b in zip(res.fields, expect):
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_rounds_monotone_and_deterministic(setup):
    gt, init, fields, joints = setup
    cfg = configs(rounds=2)
    a = run(gt, init, cfg, fields=copy.deepcopy(fields), gt_joints=joints)
    b = run(gt, init, cfg, fields=copy.deepcopy(fields), gt_joints=joints)
    assert a.rounds == b.rounds and len(a.rounds) == 2
    for row in a.rounds:
        assert row["objective_end"] <= row["objective_start"]
        assert row["mpjpe_start"] is not None


def test_input_fields_untouched(setup):
    gt, init, fields, _ = setup
    before = copy.deepcopy(fields)
    run(gt, init, configs(), fields=fields)
    for a, b in zip(fields, before):
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_phase_error_names_round(setup):
    gt, init, fields, _ = setup
    bad = copy.deepcopy(fields)
    with torch.no_grad():
        bad[0].grid.fill_(float("nan"))
    with pytest.raises(PhaseError) as e:
        run(gt, init, configs(), fields=bad)
    assert e.value.round == 1 and e.value.phase == "pose"
