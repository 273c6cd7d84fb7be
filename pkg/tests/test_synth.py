import numpy as np
import pytest
import torch

from avopt.body import joints3d
from avopt.geometry import project_points
from avopt.metrics import mpjpe
from avopt.poseopt import collision_set
from avopt.renderer import instance_state
from avopt.scene import load_bundle, load_gt_joints
from avopt.synth import (CONTACT_GAP, RigSpec, SceneSpec, clearance, empty_scene, generate_scene,
                         load_spec, perturb_frames, perturb_poses, render_ground_truth, write_bundle)


def test_single_person_spec():
    sc = generate_scene(SceneSpec(n_persons=1, motion="single", resolution=(16, 16)), 0)
    assert len(sc.bodies) == 1 and all(len(fr) == 1 for fr in sc.poses)


@pytest.mark.parametrize("kw", [dict(n_persons=0), dict(n_frames=0), dict(motion="dance"),
                                dict(n_persons=3, motion="contact")])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


def test_same_seed_same_bundle(tmp_path):
    spec = SceneSpec(resolution=(24, 24), rig=RigSpec(count=2))
    a = render_ground_truth(generate_scene(spec, 3), n_per_box=16)
    b = render_ground_truth(generate_scene(spec, 3), n_per_box=16)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.masks, b.masks)
    c = generate_scene(spec, 4)
    assert not np.array_equal(c.poses[0][0].theta, generate_scene(spec, 3).poses[0][0].theta)


def test_bundle_roundtrip(tmp_path, tiny_pair):
    synthetic, gt = tiny_pair
    write_bundle(tmp_path, synthetic, gt)
    back = load_bundle(tmp_path)
    assert back.images.shape == gt.images.shape
    assert np.abs(back.images - gt.images).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(back.masks, gt.masks)
    assert np.allclose(back.gt_poses[0][1].theta, synthetic.poses[0][1].theta)
    assert np.allclose(load_gt_joints(tmp_path)[0], synthetic.joints()[0])
    # images per view and frame
    assert gt.images.shape[:2] == (len(synthetic.poses), len(synthetic.cameras))


def test_empty_scene():
    spec = SceneSpec(resolution=(12, 12), rig=RigSpec(count=2), background=(0.2, 0.4, 0.6))
    gt = render_ground_truth(empty_scene(spec))
    assert np.all(gt.images == np.array([0.2, 0.4, 0.6])) and not gt.masks.any()


def test_contact_frames_intersect():
    for seed in range(3):
        sc = generate_scene(SceneSpec(n_frames=2, resolution=(16, 16)), seed)
        for frame in sc.poses:
            states = [instance_state(b, f, torch.as_tensor(p.theta), torch.as_tensor(p.trans))
                      for b, f, p in zip(sc.bodies, sc.fields, frame)]
            assert states[0].box.intersection(states[1].box) is not None
            assert len(collision_set(states, n_grid=12, eps_s=1e-6)) > 0


def test_contact_frames_do_not_interpenetrate():
    for seed in range(3):
        sc = generate_scene(SceneSpec(n_frames=2, resolution=(16, 16)), seed)
        for frame in sc.poses:
            assert clearance(sc.bodies, sc.fields, frame) >= CONTACT_GAP - 1e-9


def test_mask_covers_projected_joints():
    spec = SceneSpec(n_persons=1, motion="single", resolution=(128, 128), rig=RigSpec(count=2))
    sc = generate_scene(spec, 1)
    gt = render_ground_truth(sc, n_per_box=64)
    J = sc.joints()[0][0]
    for v, cam in enumerate(sc.cameras):
        px = np.floor(project_points(cam, J)).astype(int)
        assert gt.masks[0, v][px[:, 1], px[:, 0]].all()


def test_perturb_zero_is_identity():
    sc = generate_scene(SceneSpec(resolution=(8, 8)), 0)
    out = perturb_poses(sc.poses[0], 0.0, 0.0, 5)
    assert all(np.array_equal(a.theta, b.theta) and np.array_equal(a.trans, b.trans)
               for a, b in zip(out, sc.poses[0]))


def test_perturb_reproducible():
    sc = generate_scene(SceneSpec(n_frames=2, resolution=(8, 8)), 0)
    a = perturb_frames(sc.poses, 0.1, 0.03, 9)
    b = perturb_frames(sc.poses, 0.1, 0.03, 9)
    assert all(np.array_equal(x.theta, y.theta) for fa, fb in zip(a, b) for x, y in zip(fa, fb))


def test_perturb_monotone_in_angle(template):
    sc = generate_scene(SceneSpec(resolution=(8, 8)), 0)
    J = np.stack([joints3d(template, p) for p in sc.poses[0]])
    means = []
    for deg in (1.0, 5.0, 10.0):
        errs = [mpjpe(np.stack([joints3d(template, p) for p in perturb_poses(sc.poses[0], np.deg2rad(deg), 0.0, s)]),
                      J) for s in range(20)]
        means.append(np.mean(errs))
    assert means[0] < means[1] < means[2]


def test_load_spec(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text('[scene]\nn_persons = 2\nresolution = [32, 24]\n[scene.rig]\ncount = 4\n')
    spec = load_spec(p)
    assert spec.resolution == (32, 24) and spec.rig.count == 4
