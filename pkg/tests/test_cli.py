import hashlib
import json
import subprocess
import sys
import time

import pytest
import torch

from avopt.cli import main
from avopt.field import load_field, save_field

SCENE = """
seed = 0
[scene]
n_persons = 2
n_frames = {frames}
resolution = [{res}, {res}]
gt_samples_per_box = 48
[scene.rig]
count = {views}
[perturb]
angle_sigma_deg = 5.0
trans_sigma = 0.03
"""

FAST = """
[train]
iterations = {train_its}
batch_size = 256
n_per_box = 24
density_points = 256
[pose]
iterations = {pose_its}
batch_size = 128
n_per_box = 24
eval_rays = 256
eval_every = 5
[pose.weights]
n_grid = 8
"""


def write(path, text):
    path.write_text(text)
    return str(path)


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root / "scene.toml", SCENE.format(frames=1, res=24, views=2))
    assert run("synth-gen", "--config", cfg, "--out", str(root / "bundle")) == 0
    fit = write(root / "fit.toml", '[input]\nbundle = "bundle"\n' + FAST.format(train_its=3, pose_its=0))
    assert run("fit-avatars", "--config", fit, "--out", str(root / "fields")) == 0
    return root


def test_synth_gen_layout(bundle):
    b = bundle / "bundle"
    for name in ("cameras.json", "gt_joints.json", "frames/0/view_0.png", "frames/0/mask_1.png",
                 "frames/0/poses.json", "init/frames/0/poses.json", "manifest.json"):
        assert (b / name).exists(), name
    man = json.loads((b / "manifest.json").read_text())
    assert man["config_sha256"] == hashlib.sha256((bundle / "scene.toml").read_bytes()).hexdigest()
    assert set(man["phases"]) >= {"generate", "render", "write", "total"}
    assert not (b / ".manifest.json.tmp").exists()


def test_eval_self_is_zero(bundle, capsys):
    cfg = write(bundle / "eval.toml", '[input]\ngt = "bundle"\npred = "bundle"\n')
    assert run("eval", "--config", cfg, "--out", str(bundle / "eval")) == 0
    res = json.loads((bundle / "eval" / "eval.json").read_text())
    assert res["mpjpe"] == 0 and res["pcp3d"] == 100 and res["recall"] == 100
    assert "MPJPE" in capsys.readouterr().out


def test_opt_pose_zero_iterations_is_noop(bundle):
    cfg = write(bundle / "noop.toml", '[input]\nbundle = "bundle"\nfields = "fields"\ninit = "bundle/init"\n'
                + FAST.format(train_its=1, pose_its=0))
    assert run("opt-pose", "--config", cfg, "--out", str(bundle / "noop")) == 0
    a = (bundle / "bundle" / "init" / "frames" / "0" / "poses.json").read_bytes()
    b = (bundle / "noop" / "frames" / "0" / "poses.json").read_bytes()
    assert a == b


def test_fit_avatars_outputs(bundle):
    d = bundle / "fields"
    assert (d / "field_0.bin").exists() and (d / "field_1.bin").exists()
    assert (d / "losses.csv").read_text().splitlines()[0].startswith("iteration")


@pytest.mark.parametrize("body,needle", [
    ('[input]\nbundle = "bundle"\n[train]\nspeed = 1\n', "train.speed"),
    ('[input]\nbundle = "bundle"\n[train]\niterations = 0\n', "train"),
    ('[input]\n', "input.bundle"),
    ('[input]\nbundle = "nowhere"\n', "input.bundle"),
    ('[input\n', "invalid TOML"),
])
def test_validation_errors_exit_1(bundle, capsys, body, needle):
    cfg = write(bundle / "bad.toml", body)
    assert run("fit-avatars", "--config", cfg, "--out", str(bundle / "bad")) == 1
    assert needle in capsys.readouterr().err


def test_pose_weight_errors_are_qualified(bundle, capsys):
    cfg = write(bundle / "badw.toml", '[input]\nbundle = "bundle"\nfields = "fields"\ninit = "bundle/init"\n'
                '[pose.weights]\nrgb = -1\n')
    assert run("opt-pose", "--config", cfg, "--out", str(bundle / "badw")) == 1
    assert "pose.weights" in capsys.readouterr().err


def test_nonfinite_fields_exit_2(bundle, tmp_path):
    bad = tmp_path / "nan"
    bad.mkdir()
    for i in range(2):
        f = load_field(bundle / "fields" / f"field_{i}.bin")
        with torch.no_grad():
            f.grid.fill_(float("nan"))
        save_field(bad / f"field_{i}.bin", f)
    cfg = write(tmp_path / "c.toml", f'[input]\nbundle = "{bundle / "bundle"}"\nfields = "{bad}"\n'
                f'init = "{bundle / "bundle" / "init"}"\n' + FAST.format(train_its=1, pose_its=2))
    assert run("opt-pose", "--config", cfg, "--out", str(tmp_path / "o")) == 2


def test_grad_check_command(tmp_path):
    cfg = write(tmp_path / "g.toml", '[grad_check]\nconfigs = 1\nresolution = 16\nviews = 2\nrays = 16\n'
                'n_per_box = 6\ncollision_grid = 4\ndensity_points = 16\nn_coords = 2\n'
                'terms = ["pose_rgb", "density"]\n')
    assert run("grad-check", "--config", cfg, "--out", str(tmp_path)) == 0
    rep = json.loads((tmp_path / "gradreport.json").read_text())
    assert set(rep) == {"pose_rgb", "density"}


def test_help_lists_flags():
    out = subprocess.run([sys.executable, "-m", "avopt.cli", "opt-pose", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--config", "--out", "--seed", "--threads"):
        assert flag in out.stdout


def test_full_pipeline_smoke(tmp_path):
    """64x64, 2 views, 3 frames through every subcommand in under five minutes."""
    t = time.perf_counter()
    scene = write(tmp_path / "scene.toml", SCENE.format(frames=3, res=64, views=2))
    assert run("synth-gen", "--config", scene, "--out", str(tmp_path / "bundle")) == 0
    fast = FAST.format(train_its=20, pose_its=6)
    inp = '[input]\nbundle = "bundle"\ninit = "bundle/init"\n'
    assert run("fit-avatars", "--config", write(tmp_path / "fit.toml", '[input]\nbundle = "bundle"\n'
                                                  'poses = "bundle/init"\n' + fast),
               "--out", str(tmp_path / "fields")) == 0
    assert run("opt-pose", "--config", write(tmp_path / "opt.toml", inp + 'fields = "fields"\n' + fast),
               "--out", str(tmp_path / "opt")) == 0
    assert run("alternate", "--config", write(tmp_path / "alt.toml", inp + 'fields = "fields"\n' + fast
                                                + "[alternate]\nrounds = 1\n"),
               "--out", str(tmp_path / "alt")) == 0
    assert run("render", "--config", write(tmp_path / "render.toml",
                                             '[input]\nbundle = "bundle"\nfields = "alt"\nposes = "alt"\n'
                                             '[render]\nn_per_box = 32\nframes = [0]\n'),
               "--out", str(tmp_path / "render")) == 0
    assert run("eval", "--config", write(tmp_path / "eval.toml", '[input]\ngt = "bundle"\npred = "alt"\n'),
               "--out", str(tmp_path / "eval")) == 0
    for path in ("bundle/frames/2/view_1.png", "fields/field_1.bin", "opt/frames/2/poses.json", "opt/losses.csv",
                 "alt/rounds.json", "alt/field_0.bin", "render/frames/0/view_1.png", "render/frames/0/alpha_0.png",
                 "eval/eval.json"):
        assert (tmp_path / path).exists(), path
    for d in ("bundle", "fields", "opt", "alt", "render", "eval"):
        assert (tmp_path / d / "manifest.json").exists()
    rounds = json.loads((tmp_path / "alt" / "rounds.json").read_text())
    assert rounds[0]["mpjpe_start"] is not None
    assert time.perf_counter() - t < 300
