"""Training losses: concentration, cycle-consistency, color reconstruction.

All losses are nonnegative scalars, exactly zero on their ideal transport
(identity or permutation affinities), and differentiable end-to-end through
the affinity computation. The truncation in the region concentration loss
is applied per point: points inside the box contribute nothing, points
outside contribute their distance to the center.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .affinity import AffinityMatrix, FeatureMap, LocationMap, trace_locations, transport
from .autodiff import Tensor
from .errors import DimensionError, ParameterError

STAGES = ("warmup", "joint")
TERM_NAMES = ("reconstruction", "concentration_region", "concentration_local",
              "orthogonal_location", "orthogonal_feature")


@dataclass
class LossWeights:
    reconstruction: float = 1.0
    concentration_region: float = 1.0
    concentration_local: float = 1.0
    orthogonal_location: float = 1.0
    orthogonal_feature: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in TERM_NAMES}


@dataclass
class LossBreakdown:
    """Per-term loss values (floats) plus the effective weights used."""

    reconstruction: float = 0.0
    concentration_region: float = 0.0
    concentration_local: float = 0.0
    orthogonal_location: float = 0.0
    orthogonal_feature: float = 0.0
    total: float = 0.0
    weights: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        out = {name: float(getattr(self, name)) for name in TERM_NAMES}
        out["total"] = float(self.total)
        return out


def _mse(a: Tensor, b: Tensor) -> Tensor:
    diff = ad.subtract(a, b)
    return ad.tmean(ad.multiply(diff, diff))


def concentration_truncated(l_traced: LocationMap, center: Tensor,
                            w, h) -> Tensor:
    """Mean distance-to-center of points that strayed outside the box.

    A point within the (w, h) window around the center contributes 0;
    outside it contributes its Euclidean distance to the center. The
    inside/outside test is a constant at the current values (subgradient 0
    across the threshold), so gradients pull outliers toward the center
    without acting on the window itself.
    """
    w_val = float(w.data) if isinstance(w, Tensor) else float(w)
    h_val = float(h.data) if isinstance(h, Tensor) else float(h)
    if w_val <= 0 or h_val <= 0:
        raise ParameterError("window half-extents must be positive")
    center = ad.reshape(center, (2, 1))
    delta = ad.subtract(l_traced.coords, center)
    outside = ((np.abs(delta.data[0]) > w_val)
               | (np.abs(delta.data[1]) > h_val)).astype(np.float64)
    dist = ad.sqrt(ad.tsum(ad.multiply(delta, delta), axis=0))
    return ad.tmean(ad.multiply(dist, Tensor(outside)))


def concentration_local(l_traced: LocationMap, grid: int = 8) -> Tensor:
    """Mean spread of traced points within non-overlapping grid-aligned cells.

    The index grid of the map is partitioned into grid x grid blocks; each
    block's loss is the mean distance of its traced points to their own
    centroid, so a block may move rigidly for free but is penalized for
    dispersing. Edge blocks of a non-divisible grid are simply smaller.
    """
    if grid < 1:
        raise ParameterError("grid size must be positive")
    h, w = l_traced.h, l_traced.w
    j = np.arange(h * w)
    block = (j // w) // grid * ((w + grid - 1) // grid) + (j % w) // grid
    cell_losses = []
    for b in np.unique(block):
        idx = np.where(block == b)[0]
        pts = l_traced.coords[:, idx]
        centroid = ad.reshape(ad.tmean(pts, axis=1), (2, 1))
        delta = ad.subtract(pts, centroid)
        dist = ad.sqrt(ad.tsum(ad.multiply(delta, delta), axis=0))
        cell_losses.append(ad.tmean(dist))
    return ad.tmean(ad.stack(cell_losses))


def _normalized_transpose(affinity: AffinityMatrix) -> AffinityMatrix:
    """The backward transport: transpose renormalized column-stochastic."""
    at = ad.transpose(affinity.values)
    sums = ad.tsum(at, axis=0, keepdims=True)
    return AffinityMatrix(ad.divide(at, sums), affinity.dst_hw,
                          affinity.src_hw)


def orthogonal_cycle_location(l11: LocationMap, a12: AffinityMatrix) -> Tensor:
    """Location round-trip error: trace forward through the affinity, trace
    back through its column-normalized transpose, compare to the start.
    Zero exactly when the backward transport inverts the forward one, as a
    permutation does."""
    l12 = trace_locations(l11, a12)
    back = _normalized_transpose(a12)
    l11_hat = trace_locations(LocationMap(l12.coords, *a12.dst_hw), back)
    return _mse(l11_hat.coords, l11.coords)


def orthogonal_cycle_feature(f1: FeatureMap, a12: AffinityMatrix) -> Tensor:
    """Feature round-trip error under the same forward/backward transport."""
    f2_hat = transport(f1.values, a12)
    back = _normalized_transpose(a12)
    f1_hat = transport(f2_hat, back)
    return _mse(f1_hat, f1.values)


def reconstruction_loss(c1: Tensor, c2_true: Tensor,
                        affinity: AffinityMatrix) -> Tensor:
    """MSE between transported color features and the target's own."""
    c1, c2_true = ad.as_tensor(c1), ad.as_tensor(c2_true)
    if c1.shape[0] != c2_true.shape[0]:
        raise DimensionError("color feature channel counts differ")
    if c2_true.shape[1] != affinity.n_dst:
        raise DimensionError("target color features disagree with affinity")
    return _mse(transport(c1, affinity), c2_true)


def total_loss(stage: str, terms: Mapping[str, Tensor | None],
               weights: LossWeights | None = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the supplied loss terms, gated by training stage.

    The warmup stage has no localization, so the region-level concentration
    term is excluded (its effective weight is reported as 0 to keep
    total == sum of weight * term exact). Missing terms count as 0.
    """
    if stage not in STAGES:
        raise ParameterError(f"stage must be one of {STAGES}")
    weights = weights or LossWeights()
    effective = weights.as_dict()
    if stage == "warmup":
        effective["concentration_region"] = 0.0

    total = Tensor(0.0)
    breakdown = LossBreakdown(weights=effective)
    for name in TERM_NAMES:
        term = terms.get(name)
        if term is None:
            continue
        setattr(breakdown, name, float(term.data))
        if effective[name] != 0.0:
            total = ad.add(total, ad.multiply(term, Tensor(effective[name])))
    breakdown.total = float(total.data)
    return total, breakdown
