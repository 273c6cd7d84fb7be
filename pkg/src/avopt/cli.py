"""Command line entry point.

Every subcommand takes ``--config`` (TOML), ``--out``, ``--seed`` and
``--threads`` and writes its artifacts plus ``manifest.json`` under ``--out``.
Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
Set ``AVOPT_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

log = logging.getLogger("avopt")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifest


@dataclasses.dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_sha256: str
    seed: int
    threads: int
    versions: dict
    inputs: dict = dataclasses.field(default_factory=dict)
    outputs: list = dataclasses.field(default_factory=list)
    phases: dict = dataclasses.field(default_factory=dict)  # phase -> wall seconds

    @contextmanager
    def phase(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = round(time.perf_counter() - t, 3)

    def write(self, out_dir: Path) -> None:
        """Atomic write of ``manifest.json``."""
        path = out_dir / "manifest.json"
        tmp = out_dir / ".manifest.json.tmp"
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True))
        os.replace(tmp, path)


def _versions() -> dict:
    import numba
    import scipy
    import torch

    from . import __version__

    return {"avopt": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "numba": numba.__version__}


# ---------------------------------------------------------------------------
# configuration helpers


def _read_config(path: str | None) -> tuple[dict, bytes]:
    if path is None:
        return {}, b""
    import tomli

    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    raw = p.read_bytes()
    try:
        return tomli.loads(raw.decode()), raw
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from e


def _build(cls, data: dict, where: str):
    """Instantiate dataclass ``cls`` from ``data`` with path-qualified errors."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{where}.{k}: unknown option")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _input_path(cfg: dict, key: str, base: Path, required: bool = True) -> Path | None:
    inp = cfg.get("input", {})
    if key not in inp:
        if required:
            raise ConfigError(f"input.{key}: missing")
        return None
    p = Path(inp[key])
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"input.{key}: {p} does not exist")
    return p


def _train_config(cfg: dict, seed: int | None):
    from .training import TrainConfig

    d = dict(cfg.get("train", {}))
    if seed is not None:
        d["seed"] = seed
    return _build(TrainConfig, d, "train")


def _pose_config(cfg: dict, seed: int | None):
    from .poseopt import LossWeights, PoseConfig

    d = dict(cfg.get("pose", {}))
    weights = _build(LossWeights, d.pop("weights", {}), "pose.weights")
    if seed is not None:
        d["seed"] = seed
    return _build(PoseConfig, {**d, "weights": weights}, "pose")


def _load_fields(path: Path, n: int):
    from .field import load_field

    files = [path / f"field_{i}.bin" for i in range(n)]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise ConfigError(f"input.fields: missing checkpoint(s) {missing}")
    return [load_field(f) for f in files]


def _save_fields(out: Path, fields) -> list[str]:
    from .field import save_field

    names = []
    for i, f in enumerate(fields):
        save_field(out / f"field_{i}.bin", f)
        names.append(f"field_{i}.bin")
    return names


def _poses_from(path: Path):
    from .scene import load_pose_frames

    if not (path / "frames").exists():
        raise ConfigError(f"{path}: no frames/ directory with poses")
    return load_pose_frames(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(cfg: dict, out: Path, seed: int | None, man: RunManifest, base: Path) -> None:
    from .scene import save_pose_frames
    from .synth import SceneSpec, generate_scene, perturb_frames, render_ground_truth, write_bundle

    scene_cfg = dict(cfg.get("scene", {}))
    rig = scene_cfg.pop("rig", {})
    try:
        spec = SceneSpec.from_dict({**scene_cfg, "rig": rig})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"scene: {e}") from e
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    man.seed = seed
    with man.phase("generate"):
        synthetic = generate_scene(spec, seed)
    with man.phase("render"):
        gt = render_ground_truth(synthetic)
    with man.phase("write"):
        write_bundle(out, synthetic, gt)
        man.outputs += ["cameras.json", "frames/", "gt_joints.json", "scene.json"]
        pert = cfg.get("perturb")
        if pert is not None:
            unknown = set(pert) - {"angle_sigma_deg", "trans_sigma", "seed"}
            if unknown:
                raise ConfigError(f"perturb.{sorted(unknown)[0]}: unknown option")
            init = perturb_frames(synthetic.poses, np.deg2rad(pert.get("angle_sigma_deg", 5.0)),
                                  pert.get("trans_sigma", 0.03), int(pert.get("seed", seed)))
            save_pose_frames(out / "init", init)
            man.outputs.append("init/")


def cmd_fit_avatars(cfg: dict, out: Path, seed: int | None, man: RunManifest, base: Path) -> None:
    from .scene import load_bundle
    from .training import train_avatars

    bundle = _input_path(cfg, "bundle", base)
    poses_dir = _input_path(cfg, "poses", base, required=False) or bundle
    tcfg = _train_config(cfg, seed)
    man.seed = tcfg.seed
    man.inputs = {"bundle": str(bundle), "poses": str(poses_dir)}
    scene = load_bundle(bundle)
    poses = _poses_from(poses_dir)
    with man.phase("train"):
        res = train_avatars(scene, poses, tcfg)
    man.outputs += _save_fields(out, res.fields)
    res.write_history(out / "losses.csv")
    man.outputs.append("losses.csv")
    if tcfg.joint_optimization:
        from .scene import save_pose_frames

        save_pose_frames(out, res.poses)
        man.outputs.append("frames/")


def cmd_opt_pose(cfg: dict, out: Path, seed: int | None, man: RunManifest, base: Path) -> None:
    from .poseopt import optimize_poses
    from .scene import load_bundle, save_pose_frames
    from .training import write_loss_csv

    bundle = _input_path(cfg, "bundle", base)
    fields_dir = _input_path(cfg, "fields", base)
    init_dir = _input_path(cfg, "init", base)
    pcfg = _pose_config(cfg, seed)
    man.seed = pcfg.seed
    man.inputs = {"bundle": str(bundle), "fields": str(fields_dir), "init": str(init_dir)}
    scene = load_bundle(bundle)
    init = _poses_from(init_dir)
    fields = _load_fields(fields_dir, scene.n_persons)
    with man.phase("optimize"):
        res = optimize_poses(scene, fields, init, pcfg)
    save_pose_frames(out, res.poses)
    write_loss_csv(out / "losses.csv", res.trace)
    man.outputs += ["frames/", "losses.csv"]


def cmd_alternate(cfg: dict, out: Path, seed: int | None, man: RunManifest, base: Path) -> None:
    from .alternate import AlternateConfig, run
    from .scene import load_bundle, load_gt_joints, save_pose_frames

    bundle = _input_path(cfg, "bundle", base)
    init_dir = _input_path(cfg, "init", base)
    fields_dir = _input_path(cfg, "fields", base, required=False)
    alt = dict(cfg.get("alternate", {}))
    if seed is not None:
        alt["seed"] = seed
    acfg = _build(AlternateConfig, {**alt, "train": _train_config(cfg, seed), "pose": _pose_config(cfg, seed)},
                  "alternate")
    man.seed = acfg.seed
    man.inputs = {"bundle": str(bundle), "init": str(init_dir), "fields": str(fields_dir)}
    scene = load_bundle(bundle)
    fields = _load_fields(fields_dir, scene.n_persons) if fields_dir else None
    gt = load_gt_joints(bundle) if (bundle / "gt_joints.json").exists() else None
    with man.phase("alternate"):
        res = run(scene, _poses_from(init_dir), acfg, fields, gt)
    (out / "rounds.json").write_text(json.dumps(res.rounds, indent=1))
    save_pose_frames(out, res.poses)
    man.outputs += ["rounds.json", "frames/"] + _save_fields(out, res.fields)


def cmd_render(cfg: dict, out: Path, seed: int | None, man: RunManifest, base: Path) -> None:
    from .renderer import render_image
    from .scene import load_bundle, save_png

    bundle = _input_path(cfg, "bundle", base)
    fields_dir = _input_path(cfg, "fields", base)
    poses_dir = _input_path(cfg, "poses", base, required=False) or bundle
    r = cfg.get("render", {})
    unknown = set(r) - {"n_per_box", "frames", "views"}
    if unknown:
        raise ConfigError(f"render.{sorted(unknown)[0]}: unknown option")
    scene = load_bundle(bundle)
    poses = _poses_from(poses_dir)
    fields = _load_fields(fields_dir, scene.n_persons)
    n = int(r.get("n_per_box", 256))
    if n < 1:
        raise ConfigError("render.n_per_box: must be >= 1")
    man.inputs = {"bundle": str(bundle), "fields": str(fields_dir), "poses": str(poses_dir)}
    with man.phase("render"):
        for f in r.get("frames", range(len(poses))):
            d = out / "frames" / str(f)
            d.mkdir(parents=True, exist_ok=True)
            for v in r.get("views", range(scene.n_views)):
                img, alpha, _ = render_image(scene.cameras[v], scene.bodies, fields, poses[f], n_per_box=n,
                                             background=scene.background)
                save_png(d / f"view_{v}.png", img)
                save_png(d / f"alpha_{v}.png", alpha)
    man.outputs.append("frames/")


def cmd_eval(cfg: dict, out: Path, seed: int | None, man: RunManifest, base: Path) -> None:
    from .body import default_template, joints3d
    from .metrics import evaluate
    from .scene import load_gt_joints

    gt_dir = _input_path(cfg, "gt", base)
    pred_dir = _input_path(cfg, "pred", base)
    man.inputs = {"gt": str(gt_dir), "pred": str(pred_dir)}
    gt = load_gt_joints(gt_dir)
    template = default_template()
    pred = [np.stack([joints3d(template, p) for p in frame]) if frame else np.zeros((0, 24, 3))
            for frame in _poses_from(pred_dir)]
    k = cfg.get("eval", {}).get("thresholds", [25, 50, 100, 150])
    with man.phase("evaluate"):
        res = evaluate(pred, gt, thresholds=tuple(k))
    (out / "eval.json").write_text(res.to_json())
    (out / "eval.txt").write_text(res.table() + "\n")
    print(res.table())
    man.outputs += ["eval.json", "eval.txt"]


def cmd_grad_check(cfg: dict, out: Path, seed: int | None, man: RunManifest, base: Path) -> None:
    from .gradcheck import GradCheckConfig, run_grad_check

    gc = _build(GradCheckConfig, {**cfg.get("grad_check", {}), **({} if seed is None else {"seed": seed})},
                "grad_check")
    man.seed = gc.seed
    with man.phase("grad_check"):
        reports = run_grad_check(gc)
    doc = {term: json.loads(r.to_json()) for term, r in reports.items()}
    (out / "gradreport.json").write_text(json.dumps(doc, indent=1))
    man.outputs.append("gradreport.json")
    worst = max((r.max_error for r in reports.values()), default=0.0)
    print(json.dumps({"max_error": worst, "terms": {t: r.max_error for t, r in reports.items()}}, indent=1))


COMMANDS = {
    "synth-gen": (cmd_synth_gen, "render a synthetic ground-truth bundle"),
    "fit-avatars": (cmd_fit_avatars, "fit canonical avatar fields to a bundle"),
    "opt-pose": (cmd_opt_pose, "refine poses against frozen avatars"),
    "alternate": (cmd_alternate, "alternate pose and avatar refinement"),
    "render": (cmd_render, "render images of fitted avatars"),
    "eval": (cmd_eval, "evaluate predicted poses against ground truth"),
    "grad-check": (cmd_grad_check, "compare analytic and finite-difference gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed (u64); overrides config seeds")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: logical cores)")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("AVOPT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    import torch

    threads = args.threads or os.cpu_count() or 1
    torch.set_num_threads(threads)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    fn = COMMANDS[args.command][0]
    try:
        cfg, raw = _read_config(args.config)
        base = Path(args.config).resolve().parent if args.config else Path.cwd()
        out.mkdir(parents=True, exist_ok=True)
        man = RunManifest(args.command, args.config, hashlib.sha256(raw).hexdigest(),
                          args.seed if args.seed is not None else 0, threads, _versions())
        with man.phase("total"):
            fn(cfg, out, args.seed, man, base)
        man.write(out)
    except (ConfigError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
