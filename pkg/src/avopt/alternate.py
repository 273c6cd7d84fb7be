"""Alternate pose refinement (fields frozen) and avatar refinement (poses frozen)."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
import torch

from .body import PoseParams, joints3d
from .metrics import evaluate
from .poseopt import PoseConfig, PoseProblem, make_nets, optimize_poses
from .scene import Scene
from .training import TrainConfig, train_avatars

log = logging.getLogger(__name__)


class PhaseError(RuntimeError):
    """A sub-optimizer failed; ``round`` and ``phase`` say where."""

    def __init__(self, round_index: int, phase: str, cause: Exception):
        super().__init__(f"round {round_index}, {phase} phase: {cause}")
        self.round = round_index
        self.phase = phase
        self.cause = cause


@dataclass
class AlternateConfig:
    rounds: int = 2
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=500, eval_every=50))
    pose: PoseConfig = field(default_factory=PoseConfig)
    initial_train_iterations: int = 2000  # used only when no fields are given
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.pose, dict):
            self.pose = PoseConfig.from_dict(self.pose)
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AlternateConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown alternate option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class AlternateResult:
    fields: list
    poses: list[list[PoseParams]]
    rounds: list[dict]


def pose_objective(scene: Scene, fields, poses: list[list[PoseParams]], config: PoseConfig) -> float:
    """The pose objective at ``poses`` on the fixed evaluation batches used by :func:`optimize_poses`."""
    nets = make_nets(len(scene.bodies), config)
    total = 0.0
    with torch.no_grad():
        for f, frame in enumerate(poses):
            prob = PoseProblem(scene, f, fields, frame, nets, config)
            erng = np.random.default_rng([config.seed + 7919, f])
            batch = prob.pool.sample(erng, config.eval_rays)
            total += float(prob.objective(prob.plan(erng, batch)))
    return total


def run(scene: Scene, init: list[list[PoseParams]], config: AlternateConfig, fields=None,
        gt_joints: list[np.ndarray] | None = None) -> AlternateResult:
    """N rounds of pose refinement followed by avatar refinement.

    Without ``fields`` the avatars are first fitted to the initial poses.
    Per-round MPJPE against ``gt_joints`` is recorded when given.
    """
    cfg = config
    template = scene.bodies[0].template

    def score(poses) -> float | None:
        if gt_joints is None:
            return None
        pred = [np.stack([joints3d(template, p) for p in frame]) for frame in poses]
        return evaluate(pred, gt_joints).mpjpe

    poses = [[p.copy() for p in frame] for frame in init]
    if fields is None:
        tcfg = TrainConfig(**{**cfg.train.__dict__, "iterations": cfg.initial_train_iterations,
                              "seed": cfg.seed})
        try:
            fields = train_avatars(scene, poses, tcfg).fields
        except Exception as e:
            raise PhaseError(0, "initial avatar", e) from e
    rounds = []
    for k in range(cfg.rounds):
        row = {"round": k + 1, "mpjpe_start": score(poses)}
        pcfg = PoseConfig(**{**cfg.pose.__dict__, "seed": cfg.pose.seed + 1000 * k})
        try:
            pres = optimize_poses(scene, fields, poses, pcfg)
        except Exception as e:
            raise PhaseError(k + 1, "pose", e) from e
        poses = pres.poses
        if math.isnan(pres.best_objective):  # zero pose iterations
            after = start = pose_objective(scene, fields, poses, pcfg)
        else:
            start, after = pres.initial_objective, pres.best_objective
        row["objective_start"] = start
        row["objective_after_pose"] = after
        row["mpjpe_after_pose"] = score(poses)
        tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": cfg.train.seed + 1000 * k})
        try:
            refined = train_avatars(scene, poses, tcfg, copy.deepcopy(fields)).fields
        except Exception as e:
            raise PhaseError(k + 1, "avatar", e) from e
        end = pose_objective(scene, refined, poses, pcfg)
        # the avatar phase minimizes its own losses; keep the old fields if it worsened the pose objective
        row["avatar_accepted"] = end <= after
        if row["avatar_accepted"]:
            fields = refined
        row["objective_end"] = min(end, after)
        row["mpjpe_end"] = score(poses)
        log.info("round %d: %s", k + 1, row)
        rounds.append(row)
    return AlternateResult(fields, poses, rounds)
