"""The shared inter-frame affinity: building it, transporting through it.

Features live on a 1/8-resolution grid and are vectorized C x N with x
fastest (pixel j sits at x = j mod W, y = j div W). The affinity between two
feature maps scores every (source, target) cell pair with a dot product and
normalizes each target column with a softmax, so each target cell is a
convex combination of source cells. The same matrix transports feature or
label channels and traces pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError


@dataclass
class FeatureMap:
    """C-channel feature grid with explicit geometry and a C x N view."""

    values: Tensor  # (C, N), N = h * w
    h: int
    w: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionError("FeatureMap values must be 2-D (C, N)")
        if self.values.shape[1] != self.h * self.w:
            raise DimensionError(
                f"FeatureMap has {self.values.shape[1]} columns for geometry "
                f"{self.h}x{self.w}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_grid(cls, grid: Tensor) -> "FeatureMap":
        """Vectorize a (C, H, W) grid tensor; differentiable."""
        if grid.ndim != 3:
            raise DimensionError("from_grid expects a (C, H, W) tensor")
        c, h, w = grid.shape
        return cls(ad.reshape(grid, (c, h * w)), h, w)

    def grid(self) -> Tensor:
        """The (C, H, W) view; round-trips losslessly with from_grid."""
        return ad.reshape(self.values, (self.channels, self.h, self.w))


@dataclass
class AffinityMatrix:
    """Column-stochastic N1 x N2 transport matrix between two grids."""

    values: Tensor  # (N1, N2), every column sums to 1
    src_hw: tuple[int, int]
    dst_hw: tuple[int, int]
    sparsity: int | None = None  # top-k kept per column, None when dense

    @property
    def n_src(self) -> int:
        return self.values.shape[0]

    @property
    def n_dst(self) -> int:
        return self.values.shape[1]


@dataclass
class LocationMap:
    """Per-pixel (x, y) coordinates in feature-grid units.

    ``h`` and ``w`` describe the index grid (which pixel each column is),
    not the range of the coordinate values: a traced map keeps the source
    patch's index grid while its values land in the target frame.
    """

    coords: Tensor  # (2, N): row 0 = x, row 1 = y
    h: int
    w: int

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[0] != 2:
            raise DimensionError("LocationMap coords must be (2, N)")
        if self.coords.shape[1] != self.h * self.w:
            raise DimensionError("LocationMap size disagrees with geometry")

    @property
    def n(self) -> int:
        return self.coords.shape[1]


def canonical_grid(h: int, w: int) -> LocationMap:
    """The identity location map: pixel j at (j mod w, j div w)."""
    j = np.arange(h * w)
    coords = np.stack([j % w, j // w]).astype(np.float64)
    return LocationMap(Tensor(coords), h, w)


def compute_affinity(f1: FeatureMap, f2: FeatureMap,
                     temperature: float = 1.0) -> AffinityMatrix:
    """Dot-product affinity with per-target-column softmax normalization.

    A[i, j] = exp(f1_i . f2_j / T) / sum_k exp(f1_k . f2_j / T).
    Differentiable with respect to both feature maps.
    """
    if f1.channels != f2.channels:
        raise DimensionError(
            f"channel mismatch: {f1.channels} vs {f2.channels}")
    logits = ad.matmul(ad.transpose(f1.values), f2.values)
    values = ad.softmax_columns(logits, temperature)
    return AffinityMatrix(values, (f1.h, f1.w), (f2.h, f2.w))


def transport(c: Tensor, affinity: AffinityMatrix) -> Tensor:
    """Carry channels across frames: each output column is a convex
    combination of source columns under the column-stochastic affinity."""
    c = ad.as_tensor(c)
    if c.ndim != 2 or c.shape[1] != affinity.n_src:
        raise DimensionError(
            f"transport expects (D, {affinity.n_src}) channels, got {c.shape}")
    return ad.matmul(c, affinity.values)


def trace_locations(l_src: LocationMap, affinity: AffinityMatrix) -> LocationMap:
    """Trace pixel coordinates through the affinity.

    Output column j averages the source coordinates with column j's weights,
    so every traced point lies in the convex hull of the source points. The
    result keeps the affinity's target geometry as its index grid.
    """
    if l_src.n != affinity.n_src:
        raise DimensionError("location map size disagrees with affinity")
    coords = ad.matmul(l_src.coords, affinity.values)
    h, w = affinity.dst_hw
    return LocationMap(coords, h, w)


def topk_sparsify(affinity: AffinityMatrix, k: int) -> AffinityMatrix:
    """Keep the k largest entries per column and renormalize to sum 1.

    Ties are broken toward the lower row index. Inference-only: the result
    does not track gradients.
    """
    n_src = affinity.n_src
    if not 1 <= k <= n_src:
        raise ParameterError(f"top-k must be in [1, {n_src}], got {k}")
    vals = affinity.values.data
    # Stable argsort keeps lower row indices first among equal values.
    order = np.argsort(-vals, axis=0, kind="stable")
    keep = order[:k, :]
    sparse = np.zeros_like(vals)
    np.put_along_axis(sparse, keep, np.take_along_axis(vals, keep, axis=0),
                      axis=0)
    sums = sparse.sum(axis=0, keepdims=True)
    if np.any(sums <= 0):
        raise ParameterError("cannot renormalize a column with no mass")
    sparse /= sums
    return AffinityMatrix(Tensor(sparse), affinity.src_hw, affinity.dst_hw,
                          sparsity=k)


def gram_energy(f: FeatureMap) -> Tensor:
    """The C x C energy matrix f . f^T, preserved by orthogonal transport.

    Diagnostic only: orthogonal (permutation-like) affinities keep it
    unchanged, so drift here signals non-energy-preserving transport.
    """
    return ad.matmul(f.values, ad.transpose(f.values))
