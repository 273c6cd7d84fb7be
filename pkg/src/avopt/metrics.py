"""Multi-person 3D pose metrics and the avatar overlap measure.

Joint arrays are in meters, shaped (persons, n_b, 3); reported distances are
in millimeters and rates in percent.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .body import PARENTS

LIMBS = [(int(p), j) for j, p in enumerate(PARENTS) if p >= 0]  # the 23 parent-child bones
DEFAULT_K = (25, 50, 100, 150)


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index)
    unmatched_pred: list[int]
    unmatched_gt: list[int]


def _as3(j) -> np.ndarray:
    j = np.asarray(j, dtype=np.float64)
    return j.reshape(0, 0, 3) if j.size == 0 else j


def match_persons(pred, gt, root: int = 0) -> Assignment:
    """Hungarian matching on root-joint distance."""
    pred, gt = _as3(pred), _as3(gt)
    if len(pred) == 0 or len(gt) == 0:
        return Assignment([], list(range(len(pred))), list(range(len(gt))))
    cost = np.linalg.norm(pred[:, None, root] - gt[None, :, root], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])
    return Assignment(pairs, sorted(set(range(len(pred))) - set(rows.tolist())),
                      sorted(set(range(len(gt))) - set(cols.tolist())))


def per_person_mpjpe(pred, gt, assignment: Assignment) -> np.ndarray:
    pred, gt = _as3(pred), _as3(gt)
    return np.array([1000.0 * np.linalg.norm(pred[i] - gt[j], axis=-1).mean() for i, j in assignment.pairs])


def mpjpe(pred, gt, assignment: Assignment | None = None) -> float:
    """Mean joint distance over matched persons, mm."""
    pred, gt = _as3(pred), _as3(gt)
    a = match_persons(pred, gt) if assignment is None else assignment
    if not a.pairs:
        return float("nan")
    d = [np.linalg.norm(pred[i] - gt[j], axis=-1) for i, j in a.pairs]
    return float(1000.0 * np.mean(np.concatenate(d)))


def _limb_hits(pred, gt, a: Assignment) -> np.ndarray:
    hits = []
    for i, j in a.pairs:
        for p, c in LIMBS:
            length = np.linalg.norm(gt[j, c] - gt[j, p])
            ok = (np.linalg.norm(pred[i, p] - gt[j, p]) < 0.5 * length
                  and np.linalg.norm(pred[i, c] - gt[j, c]) < 0.5 * length)
            hits.append(ok)
    return np.array(hits, dtype=bool)


def pcp3d(pred, gt, assignment: Assignment | None = None) -> float:
    """Percent of limbs whose two endpoints both lie within half the true limb length."""
    pred, gt = _as3(pred), _as3(gt)
    a = match_persons(pred, gt) if assignment is None else assignment
    hits = _limb_hits(pred, gt, a)
    return float(100.0 * hits.mean()) if len(hits) else 0.0


def _true_positive(err_mm: np.ndarray, k: float) -> np.ndarray:
    # an exact prediction counts at K = 0
    return (err_mm < k) | (err_mm == 0)


def ap_k(pred, gt, thresholds=DEFAULT_K, assignment: Assignment | None = None) -> dict[float, float]:
    """Single-operating-point precision: matched predictions under K mm over all predictions."""
    pred, gt = _as3(pred), _as3(gt)
    a = match_persons(pred, gt) if assignment is None else assignment
    err = per_person_mpjpe(pred, gt, a)
    n = len(pred)
    return {k: (100.0 * _true_positive(err, k).sum() / n if n else 0.0) for k in thresholds}


def recall(pred, gt, threshold: float = 500.0, assignment: Assignment | None = None) -> float:
    pred, gt = _as3(pred), _as3(gt)
    if len(gt) == 0:
        return 100.0
    a = match_persons(pred, gt) if assignment is None else assignment
    err = per_person_mpjpe(pred, gt, a)
    return float(100.0 * (err < threshold).sum() / len(gt))


def overlap_metric(states, n_grid: int = 64, skip_distance: float | None = 0.06) -> float:
    """Mean over an ``n_grid``³ probe grid of the summed pairwise opacity products.

    The grid spans the union of the instance boxes; the probe interval is the
    union diagonal divided by ``n_grid``.
    """
    from .poseopt import _probe_density

    if len(states) < 2:
        return 0.0
    box = states[0].box
    for st in states[1:]:
        box = box.union(st.box)
    k = (np.arange(n_grid) + 0.5) / n_grid
    grid = np.stack(np.meshgrid(k, k, k, indexing="ij"), -1).reshape(-1, 3)
    pts = box.min + grid * (box.max - box.min)
    delta = box.diagonal / n_grid
    alphas = [1 - np.exp(-_probe_density(st, pts, skip_distance)[0] * delta) for st in states]
    total = np.zeros(len(pts))
    for p in range(len(states)):
        for q in range(p + 1, len(states)):
            total += alphas[p] * alphas[q]
    return float(total.mean())


@dataclass
class EvalResult:
    mpjpe: float
    pcp3d: float
    ap: dict = field(default_factory=dict)
    recall: float = 0.0
    overlap: float | None = None
    n_frames: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["ap"] = {str(k): v for k, v in self.ap.items()}
        return json.dumps(d, indent=1, sort_keys=True)

    def table(self) -> str:
        rows = [("MPJPE [mm]", self.mpjpe), ("PCP3D [%]", self.pcp3d)]
        rows += [(f"AP@{k} [%]", v) for k, v in self.ap.items()]
        rows += [("Recall@500 [%]", self.recall)]
        if self.overlap is not None:
            rows.append(("overlap", self.overlap))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{w}}  {value:10.4f}" for name, value in rows)


def evaluate(pred_frames, gt_frames, thresholds=DEFAULT_K, overlap: float | None = None) -> EvalResult:
    """Pool matched persons over frames: joint errors, limbs, detections."""
    if len(pred_frames) != len(gt_frames):
        raise ValueError(f"{len(pred_frames)} predicted frames vs {len(gt_frames)} ground-truth frames")
    dists, hits, errs = [], [], []
    n_pred = n_gt = 0
    for pred, gt in zip(pred_frames, gt_frames):
        pred, gt = _as3(pred), _as3(gt)
        a = match_persons(pred, gt)
        dists += [np.linalg.norm(pred[i] - gt[j], axis=-1) for i, j in a.pairs]
        hits.append(_limb_hits(pred, gt, a))
        errs.append(per_person_mpjpe(pred, gt, a))
        n_pred += len(pred)
        n_gt += len(gt)
    err = np.concatenate(errs) if errs else np.zeros(0)
    hits = np.concatenate(hits) if hits else np.zeros(0, dtype=bool)
    return EvalResult(
        mpjpe=float(1000.0 * np.mean(np.concatenate(dists))) if dists else float("nan"),
        pcp3d=float(100.0 * hits.mean()) if len(hits) else 0.0,
        ap={k: (100.0 * _true_positive(err, k).sum() / n_pred if n_pred else 0.0) for k in thresholds},
        recall=float(100.0 * (err < 500.0).sum() / n_gt) if n_gt else 100.0,
        overlap=overlap,
        n_frames=len(gt_frames),
    )
