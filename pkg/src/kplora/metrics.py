"""Keypoint metrics: MPJPE, PCK@alpha, instance matching, dataset reports.

All metric arithmetic happens in normalized coordinates (x/width, y/height,
clamped to [0, 1]), so MPJPE is dimensionless and the PCK normalizer L
defaults to 1. PCK uses a strict inequality: a point at distance exactly
alpha*L does not count as correct.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, InputError
from .instruments import KEYPOINTS_PER_INSTANCE

# Distance charged to every point of a ground-truth instance that received
# no prediction, under the default "penalize" policy: the diagonal of the
# normalized unit square, the largest possible error.
MISS_DISTANCE = float(np.sqrt(2.0))

UNMATCHED_POLICIES = ("penalize", "skip")


class KeypointSet:
    """Exactly 12 normalized (x, y) points as an immutable float64 array."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape != (KEYPOINTS_PER_INSTANCE, 2):
            raise ContractError(
                f"expected {KEYPOINTS_PER_INSTANCE}x2 points, got {pts.shape}"
            )
        if not np.all(np.isfinite(pts)):
            raise ContractError("keypoint coordinates must be finite")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __setattr__(self, name, value):
        raise AttributeError("KeypointSet is immutable")

    @classmethod
    def from_pixels(cls, points, width: float, height: float) -> "KeypointSet":
        """Normalize pixel coordinates per axis and clamp into [0, 1]."""
        if width <= 0 or height <= 0:
            raise ContractError("width and height must be positive")
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ContractError(f"expected Nx2 pixel points, got {pts.shape}")
        scaled = pts / np.array([width, height], dtype=np.float64)
        return cls(np.clip(scaled, 0.0, 1.0))


@dataclass(frozen=True)
class PckConfig:
    alpha: float
    normalizer: float = 1.0  # 1.0 == image-width-normalized coordinates

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if self.normalizer <= 0:
            raise ContractError("normalizer must be positive")


def _paired_distances(pred: KeypointSet, gt: KeypointSet) -> np.ndarray:
    return np.linalg.norm(pred.points - gt.points, axis=1)


def mpjpe(pred: KeypointSet, gt: KeypointSet) -> float:
    """Mean Euclidean distance over the 12 point pairs."""
    return float(np.mean(_paired_distances(pred, gt)))


def pck(pred: KeypointSet, gt: KeypointSet, cfg: PckConfig) -> float:
    """Fraction of points with distance / L strictly below alpha."""
    d = _paired_distances(pred, gt)
    return float(np.mean(d / cfg.normalizer < cfg.alpha))


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (pred index, gt index)
    unmatched_preds: tuple[int, ...]
    unmatched_gts: tuple[int, ...]

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[p, g] for p, g in self.pairs))


def match_instances(
    preds: Sequence[KeypointSet], gts: Sequence[KeypointSet]
) -> MatchResult:
    """Minimum-total-MPJPE one-to-one assignment between instance lists.

    Class labels play no role; ties between equal-cost assignments are
    broken toward the lexicographically smallest (pred index, gt index)
    pair list.
    """
    cost = np.array(
        [[mpjpe(p, g) for g in gts] for p in preds], dtype=np.float64
    ).reshape(len(preds), len(gts))
    pairs = _lexmin_assignment(cost)
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_preds=tuple(i for i in range(len(preds)) if i not in matched_p),
        unmatched_gts=tuple(j for j in range(len(gts)) if j not in matched_g),
    )


def _optimal_cost(cost: np.ndarray) -> float:
    if min(cost.shape) == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _lexmin_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Among minimum-cost assignments, pick the lexicographically smallest
    pair list by greedy fixing with optimal-cost feasibility checks."""
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    budget = _optimal_cost(cost)
    tol = 1e-9 * max(1.0, abs(budget))
    pred_pool = list(range(n))
    gt_pool = list(range(m))
    pairs: list[tuple[int, int]] = []
    for p in range(n):
        pred_pool.remove(p)
        chosen = None
        for g in gt_pool:
            rest = cost[np.ix_(pred_pool, [j for j in gt_pool if j != g])]
            if cost[p, g] + _optimal_cost(rest) <= budget + tol:
                chosen = g
                break
        if chosen is None:
            # p stays unmatched only if the remaining items still reach budget
            continue
        gt_pool.remove(chosen)
        budget -= cost[p, chosen]
        pairs.append((p, chosen))
    return pairs


@dataclass(frozen=True)
class ClassReport:
    mpjpe: float
    pck: dict[float, float]
    instances: int


@dataclass(frozen=True)
class EvalReport:
    """Aggregate and per-class metrics over one prediction/ground-truth run.

    Aggregate values micro-average over keypoints: every point of every
    matched instance contributes equally, plus (under the "penalize"
    policy) a MISS_DISTANCE point for each keypoint of an unmatched
    ground-truth instance. Per-class rows cover matched instances only and
    are keyed by ground-truth class.
    """

    mpjpe: float | None
    pck: dict[float, float | None]
    per_class: dict[str, ClassReport]
    matched: int
    unmatched_gt: int
    unmatched_pred: int
    scored_keypoints: int
    unmatched_policy: str
    pck_alphas: tuple[float, ...] = field(default=(0.05, 0.10))


def evaluate_dataset(
    predictions: Mapping[str, Sequence],
    gt_samples: Sequence,
    pck_alphas: Sequence[float] = (0.05, 0.10),
    normalizer: float = 1.0,
    unmatched_policy: str = "penalize",
) -> EvalReport:
    """Match and score predictions against ground truth, image by image.

    ``predictions`` maps sample_id to parsed instances (objects with
    ``class_name`` and ``keypoints`` in pixel coordinates); ``gt_samples``
    are annotation samples (``image_id``, ``width``, ``height``,
    ``instances``). Every prediction id must name a ground-truth sample;
    ground-truth samples without predictions score all instances as
    unmatched.
    """
    if unmatched_policy not in UNMATCHED_POLICIES:
        raise ContractError(
            f"unmatched_policy must be one of {UNMATCHED_POLICIES}"
        )
    alphas = tuple(float(a) for a in pck_alphas)
    for a in alphas:
        PckConfig(a, normalizer)  # validate
    gt_by_id = {s.image_id: s for s in gt_samples}
    unknown = sorted(set(predictions) - set(gt_by_id))
    if unknown:
        raise InputError(f"predictions reference unknown sample_id {unknown[0]!r}")

    all_dists: list[np.ndarray] = []
    per_class_dists: dict[str, list[np.ndarray]] = {}
    per_class_counts: dict[str, int] = {}
    matched = unmatched_gt = unmatched_pred = 0

    for sample in gt_samples:
        gt_sets = [
            KeypointSet.from_pixels(
                [(k.x, k.y) for k in inst.keypoints], sample.width, sample.height
            )
            for inst in sample.instances
        ]
        pred_instances = predictions.get(sample.image_id, [])
        pred_sets = [
            KeypointSet.from_pixels(inst.keypoints, sample.width, sample.height)
            for inst in pred_instances
        ]
        match = match_instances(pred_sets, gt_sets)
        matched += len(match.pairs)
        unmatched_pred += len(match.unmatched_preds)
        unmatched_gt += len(match.unmatched_gts)
        for p, g in match.pairs:
            d = _paired_distances(pred_sets[p], gt_sets[g])
            all_dists.append(d)
            cls = sample.instances[g].class_name
            per_class_dists.setdefault(cls, []).append(d)
            per_class_counts[cls] = per_class_counts.get(cls, 0) + 1
        if unmatched_policy == "penalize":
            for _ in match.unmatched_gts:
                all_dists.append(
                    np.full(KEYPOINTS_PER_INSTANCE, MISS_DISTANCE)
                )

    def summarize(dists: list[np.ndarray]):
        if not dists:
            return None, {a: None for a in alphas}, 0
        d = np.concatenate(dists)
        return (
            float(d.mean()),
            {a: float(np.mean(d / normalizer < a)) for a in alphas},
            int(d.size),
        )

    agg_mpjpe, agg_pck, scored = summarize(all_dists)
    per_class = {}
    for cls in sorted(per_class_dists):
        c_mpjpe, c_pck, _ = summarize(per_class_dists[cls])
        per_class[cls] = ClassReport(
            mpjpe=c_mpjpe, pck=c_pck, instances=per_class_counts[cls]
        )

    return EvalReport(
        mpjpe=agg_mpjpe,
        pck=agg_pck,
        per_class=per_class,
        matched=matched,
        unmatched_gt=unmatched_gt,
        unmatched_pred=unmatched_pred,
        scored_keypoints=scored,
        unmatched_policy=unmatched_policy,
        pck_alphas=alphas,
    )
