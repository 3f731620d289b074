"""Quadruplet tuple mining over keyframe cloud centroids.

Two clouds are a positive pair when they come from the same scene and their
centroids lie strictly within ``tau_pos`` of each other; they are a negative
pair when the scenes differ or the centroids are strictly further apart than
``tau_neg``. Pairs in between fall in a dead zone and are never sampled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (InsufficientNegatives, InsufficientPositives,
                     InvalidParameter, ShapeError)


@dataclass
class MiningConfig:
    tau_pos: float = 2.0
    tau_neg: float = 4.0
    num_positives: int = 2
    num_negatives: int = 6

    def validate(self) -> None:
        if not 0 < self.tau_pos <= self.tau_neg:
            raise InvalidParameter(
                f"need 0 < tau_pos <= tau_neg, got {self.tau_pos}, {self.tau_neg}")
        if self.num_positives < 1 or self.num_negatives < 1:
            raise InvalidParameter("tuple sizes must be at least 1")


def is_positive(scene_a: str, centroid_a: np.ndarray,
                scene_b: str, centroid_b: np.ndarray,
                cfg: MiningConfig) -> bool:
    if scene_a != scene_b:
        return False
    return float(np.linalg.norm(np.asarray(centroid_a) - np.asarray(centroid_b))) \
        < cfg.tau_pos


def is_negative(scene_a: str, centroid_a: np.ndarray,
                scene_b: str, centroid_b: np.ndarray,
                cfg: MiningConfig) -> bool:
    if scene_a != scene_b:
        return True
    return float(np.linalg.norm(np.asarray(centroid_a) - np.asarray(centroid_b))) \
        > cfg.tau_neg


@dataclass
class TrainingTuple:
    anchor: int
    positives: np.ndarray       # (m,) indices
    negatives: np.ndarray       # (n,) indices
    extra_negative: int

    def validate(self) -> None:
        ids = [self.anchor, self.extra_negative,
               *self.positives.tolist(), *self.negatives.tolist()]
        if len(set(ids)) != len(ids):
            raise InvalidParameter("tuple members must be distinct")


class MiningIndex:
    """Centroid index over a keyframe list, one position tree per scene.

    The trees only prune candidates; membership is always re-checked with the
    exact strict predicates so boundary points are classified consistently.
    """

    def __init__(self, scenes: Sequence[str], centroids: np.ndarray):
        centroids = np.asarray(centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[1] != 3:
            raise ShapeError(f"centroids must be (N, 3), got {centroids.shape}")
        if len(scenes) != len(centroids):
            raise ShapeError("one scene id per centroid required")
        self.scenes = list(scenes)
        self.centroids = centroids
        uniq = sorted(set(self.scenes))
        self._code = {s: i for i, s in enumerate(uniq)}
        self.scene_codes = np.array([self._code[s] for s in self.scenes])
        self._trees = {}
        self._members = {}
        for s in uniq:
            members = np.flatnonzero(self.scene_codes == self._code[s])
            self._members[s] = members
            self._trees[s] = cKDTree(centroids[members])

    def __len__(self) -> int:
        return len(self.scenes)

    def positive_candidates(self, idx: int, cfg: MiningConfig) -> np.ndarray:
        """Indices that form a positive pair with ``idx`` (excluding itself)."""
        scene = self.scenes[idx]
        members = self._members[scene]
        near = self._trees[scene].query_ball_point(
            self.centroids[idx], cfg.tau_pos)
        cand = members[np.sort(near)]
        cand = cand[cand != idx]
        d = np.linalg.norm(self.centroids[cand] - self.centroids[idx], axis=1)
        return cand[d < cfg.tau_pos]

    def negative_mask(self, idx: int, cfg: MiningConfig) -> np.ndarray:
        """Boolean mask of every index that is a negative of ``idx``."""
        same = self.scene_codes == self.scene_codes[idx]
        d = np.linalg.norm(self.centroids - self.centroids[idx], axis=1)
        mask = ~same | (d > cfg.tau_neg)
        mask[idx] = False
        return mask


def mine_tuple(index: MiningIndex, anchor: int, cfg: MiningConfig,
               rng: np.random.Generator) -> TrainingTuple:
    """Draw one quadruplet tuple for the given anchor, uniformly without
    replacement from the valid candidate sets.

    The extra negative must be a negative of the anchor and of every selected
    positive and negative, which is what lets the second loss term push it
    away from the whole neighbourhood.
    """
    cfg.validate()
    pos_cand = index.positive_candidates(anchor, cfg)
    if len(pos_cand) < cfg.num_positives:
        raise InsufficientPositives(
            f"anchor {anchor}: {len(pos_cand)} positive candidates, "
            f"need {cfg.num_positives}")
    positives = np.sort(rng.choice(pos_cand, cfg.num_positives, replace=False))

    neg_mask = index.negative_mask(anchor, cfg)
    neg_cand = np.flatnonzero(neg_mask)
    if len(neg_cand) < cfg.num_negatives:
        raise InsufficientNegatives(
            f"anchor {anchor}: {len(neg_cand)} negative candidates, "
            f"need {cfg.num_negatives}")
    negatives = np.sort(rng.choice(neg_cand, cfg.num_negatives, replace=False))

    extra_mask = neg_mask.copy()
    for ref in (*positives.tolist(), *negatives.tolist()):
        extra_mask &= index.negative_mask(ref, cfg)
    extra_mask[negatives] = False
    extra_cand = np.flatnonzero(extra_mask)
    if len(extra_cand) == 0:
        raise InsufficientNegatives(
            f"anchor {anchor}: no candidate is a negative of the whole tuple")
    extra = int(rng.choice(extra_cand))

    t = TrainingTuple(anchor, positives, negatives, extra)
    t.validate()
    return t


def usable_anchors(index: MiningIndex, cfg: MiningConfig) -> List[int]:
    """Anchors with enough positive and negative candidates to mine from.

    The extra-negative condition is not pre-checked here; it depends on the
    drawn tuple and is rare to fail when negatives are plentiful.
    """
    out = []
    for i in range(len(index)):
        if len(index.positive_candidates(i, cfg)) < cfg.num_positives:
            continue
        if index.negative_mask(i, cfg).sum() < cfg.num_negatives:
            continue
        out.append(i)
    return out
