"""Pairwise similarity features from transform outputs.

For a pair of faces, corresponding region vectors are collected per node
(fixed facial regions at level 1, two stripes at level 2, groups of ten
scalars at level 3) and reduced to cosine similarities plus per-region
averaged length ratios. Node responses are standardized with training-set
statistics before any similarity math.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError
from .pixelhop import HopOutputs, PixelHopModel

EPS_STD = 1e-8
LEVEL3_GROUP = 10


@dataclass(frozen=True)
class RoiSpec:
    """Inclusive row/col ranges of one region in a level's response grid."""

    level: int
    name: str
    rows: tuple[int, int]
    cols: tuple[int, int]

    def slice_map(self, grid: np.ndarray) -> np.ndarray:
        r0, r1 = self.rows
        c0, c1 = self.cols
        return grid[r0 : r1 + 1, c0 : c1 + 1]


# Region placement on the 28x28 level-1 grid and the 10x10 level-2 grid,
# proportional to face geometry on aligned 32x32 crops. Centralized so a
# recalibration is a one-line change.
LEVEL1_ROIS = (
    RoiSpec(1, "left_eye", (4, 11), (3, 12)),
    RoiSpec(1, "right_eye", (4, 11), (15, 24)),
    RoiSpec(1, "nose", (10, 19), (9, 18)),
    RoiSpec(1, "mouth", (18, 25), (6, 21)),
)
LEVEL2_ROIS = (
    RoiSpec(2, "eye_stripe", (1, 4), (0, 9)),
    RoiSpec(2, "nose_mouth_stripe", (3, 9), (3, 6)),
)


@dataclass
class ChannelStats:
    """Per-node response mean/std over all spatial positions and images."""

    level1_mean: np.ndarray
    level1_std: np.ndarray
    level2_mean: np.ndarray
    level2_std: np.ndarray
    level3_mean: np.ndarray
    level3_std: np.ndarray

    def for_level(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        return (
            (self.level1_mean, self.level1_std),
            (self.level2_mean, self.level2_std),
            (self.level3_mean, self.level3_std),
        )[level - 1]

    @property
    def n_nodes(self) -> int:
        return self.level1_mean.size + self.level2_mean.size + self.level3_mean.size


@dataclass(frozen=True)
class FeatureLayout:
    """Slot map of the pair-feature vector: 7 ratio averages then cosines."""

    k1: int
    k2: int
    k3: int

    @property
    def p(self) -> int:
        return self.k3 // LEVEL3_GROUP

    @property
    def n_features(self) -> int:
        return 7 + 4 * self.k1 + 2 * self.k2 + self.p

    def slot_names(self) -> list[str]:
        names = [f"ratio.L1.{r.name}" for r in LEVEL1_ROIS]
        names += [f"ratio.L2.{r.name}" for r in LEVEL2_ROIS]
        names += ["ratio.L3.groups"]
        for k in range(self.k1):
            names += [f"cos.L1.n{k:03d}.{r.name}" for r in LEVEL1_ROIS]
        for k in range(self.k2):
            names += [f"cos.L2.n{k:03d}.{r.name}" for r in LEVEL2_ROIS]
        names += [f"cos.L3.g{g:02d}" for g in range(self.p)]
        return names

    @classmethod
    def for_model(cls, model: PixelHopModel) -> "FeatureLayout":
        k1, k2, k3 = model.level_counts
        return cls(k1=k1, k2=k2, k3=k3)


def fit_stats(outputs: Iterable[HopOutputs]) -> ChannelStats:
    """Population mean/std of every node's responses over a training stream."""
    sums = [None, None, None]
    sqs = [None, None, None]
    counts = [0, 0, 0]
    n_seen = 0
    for out in outputs:
        n_seen += 1
        for i, arr in enumerate((out.level1, out.level2, out.level3)):
            flat = arr.reshape(-1, arr.shape[-1]) if arr.ndim == 3 else arr.reshape(1, -1)
            if sums[i] is None:
                sums[i] = flat.sum(axis=0)
                sqs[i] = (flat**2).sum(axis=0)
            else:
                sums[i] += flat.sum(axis=0)
                sqs[i] += (flat**2).sum(axis=0)
            counts[i] += flat.shape[0]
    if n_seen < 2:
        raise DataError("fit_stats needs at least 2 training images")
    means, stds = [], []
    for i in range(3):
        mean = sums[i] / counts[i]
        var = np.maximum(sqs[i] / counts[i] - mean**2, 0.0)
        means.append(mean)
        stds.append(np.sqrt(var))
    return ChannelStats(
        level1_mean=means[0],
        level1_std=stds[0],
        level2_mean=means[1],
        level2_std=stds[1],
        level3_mean=means[2],
        level3_std=stds[2],
    )


def _pairwise_similarity(u_rows: np.ndarray, v_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine and length ratio with zero-vector conventions.

    Two zero vectors count as identical (cosine and ratio 1); a zero against
    a nonzero vector is maximally dissimilar (both 0). Built on squared norms
    so a vector paired with itself scores exactly 1.
    """
    dot = np.einsum("ij,ij->i", u_rows, v_rows)
    usq = np.einsum("ij,ij->i", u_rows, u_rows)
    vsq = np.einsum("ij,ij->i", v_rows, v_rows)
    both_zero = (usq == 0.0) & (vsq == 0.0)
    any_zero = (usq == 0.0) | (vsq == 0.0)
    denom = np.sqrt(np.where(any_zero, 1.0, usq * vsq))
    cos = np.clip(dot / denom, -1.0, 1.0)
    cos = np.where(both_zero, 1.0, np.where(any_zero, 0.0, cos))
    nu, nv = np.sqrt(usq), np.sqrt(vsq)
    ratio = np.minimum(nu, nv) / np.where(any_zero, 1.0, np.maximum(nu, nv))
    ratio = np.where(both_zero, 1.0, np.where(any_zero, 0.0, ratio))
    return cos, ratio


def extract_pair_feature(
    out_a: HopOutputs,
    out_b: HopOutputs,
    stats: ChannelStats,
    layout: FeatureLayout,
    standardize: bool = True,
) -> np.ndarray:
    """Similarity feature vector for one face pair.

    Layout: [7 average ratios | 4*K1 level-1 cosines | 2*K2 level-2 cosines |
    P level-3 cosines], cosine blocks node-major and region-minor.
    ``standardize=False`` skips the per-node z-scoring (ablation hook used by
    tests). The result is symmetric in (a, b).
    """
    shapes = (out_a.level1.shape[-1], out_a.level2.shape[-1], out_a.level3.shape[-1])
    if shapes != (layout.k1, layout.k2, layout.k3):
        raise DataError(f"outputs {shapes} do not match layout ({layout.k1}, {layout.k2}, {layout.k3})")
    if (out_a.level1.shape, out_a.level2.shape) != (out_b.level1.shape, out_b.level2.shape):
        raise DataError("pair outputs come from different models")

    def z(arr: np.ndarray, level: int) -> np.ndarray:
        if not standardize:
            return arr
        mean, std = stats.for_level(level)
        return (arr - mean) / (std + EPS_STD)

    cosines: list[np.ndarray] = []
    ratio_slots: list[float] = []

    for level, rois in ((1, LEVEL1_ROIS), (2, LEVEL2_ROIS)):
        za = z(out_a.level_array(level), level)
        zb = z(out_b.level_array(level), level)
        k = za.shape[-1]
        per_roi_cos = []
        for roi in rois:
            u = roi.slice_map(za).reshape(-1, k).T  # (k, roi_size)
            v = roi.slice_map(zb).reshape(-1, k).T
            cos, ratio = _pairwise_similarity(u, v)
            per_roi_cos.append(cos)
            ratio_slots.append(float(ratio.mean()))
        cosines.append(np.stack(per_roi_cos, axis=1).ravel())  # node-major

    l3a = z(out_a.level3, 3)[: layout.p * LEVEL3_GROUP].reshape(layout.p, LEVEL3_GROUP)
    l3b = z(out_b.level3, 3)[: layout.p * LEVEL3_GROUP].reshape(layout.p, LEVEL3_GROUP)
    cos3, ratio3 = _pairwise_similarity(l3a, l3b)
    ratio_slots.append(float(ratio3.mean()) if layout.p else 1.0)
    cosines.append(cos3)

    values = np.concatenate([np.asarray(ratio_slots), *cosines])
    assert values.size == layout.n_features
    return values
