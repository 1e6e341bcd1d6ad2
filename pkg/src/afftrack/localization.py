"""Region-level localization: center, scale, differentiable ROI, mean-shift.

Tracking a reference patch into a target frame reduces to tracing each
patch pixel through the shared affinity, averaging the traced coordinates
for the center, and reading the scale off the mean absolute deviation
(uniformly spread points in a box of half-width w have mean |x - cx| = w/2,
so twice the mean deviation recovers w). The resulting box drives a
bilinear ROI crop that stays differentiable in both the features and the
box parameters. At inference the center can be refined by mean-shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .affinity import AffinityMatrix, FeatureMap, LocationMap, canonical_grid
from .autodiff import Tensor
from .errors import DimensionError, LocalizationError, NumericError, ParameterError


@dataclass
class BBox:
    """Axis-aligned box: center plus positive half-extents, grid units."""

    cx: Tensor
    cy: Tensor
    w: Tensor  # half-extent, so the box spans [cx - w, cx + w]
    h: Tensor

    @classmethod
    def from_floats(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        if w <= 0 or h <= 0:
            raise ParameterError("box half-extents must be positive")
        return cls(Tensor(cx), Tensor(cy), Tensor(w), Tensor(h))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (float(self.cx.data), float(self.cy.data),
                float(self.w.data), float(self.h.data))


@dataclass
class LocalizeConfig:
    temperature: float = 1.0
    min_half_extent: float = 2.0  # cells; floors degenerate spread
    refine_center: bool = False   # mean-shift at inference only
    refine_bandwidth: float = 1.5
    refine_max_iters: int = 50
    refine_tol: float = 1e-3


@dataclass
class LocalizeResult:
    bbox: BBox
    affinity: AffinityMatrix  # patch -> frame, matching orientation
    traced: LocationMap       # patch pixels' coordinates in the target frame


def locate_center(l_traced: LocationMap) -> Tensor:
    """Average coordinate of the traced points; shape (2,) = (cx, cy)."""
    if l_traced.n == 0:
        raise ParameterError("cannot locate the center of an empty map")
    return ad.tmean(l_traced.coords, axis=1)


def estimate_scale(l_traced: LocationMap, center: Tensor) -> tuple[Tensor, Tensor]:
    """Half-extents (w, h) from mean absolute deviation about the center.

    For points uniform in a box of half-width w the mean |x - cx| is w / 2,
    so w = 2 * mean |x - cx|; height is analogous. Degenerate all-equal
    input yields 0 — callers clamp (see clamp_half_extents).
    """
    center = ad.reshape(center, (2, 1))
    dev = ad.absolute(ad.subtract(l_traced.coords, center))
    scaled = ad.tmean(dev, axis=1) * 2.0
    return scaled[0], scaled[1]


def clamp_half_extents(w: Tensor, h: Tensor, frame_hw: tuple[int, int],
                       min_half: float = 2.0) -> tuple[Tensor, Tensor]:
    """Clamp half-extents into [min_half, frame half-size]; differentiable
    where not clamped."""
    max_w = max((frame_hw[1] - 1) / 2.0, min_half)
    max_h = max((frame_hw[0] - 1) / 2.0, min_half)
    w = ad.maximum(ad.minimum(w, Tensor(max_w)), Tensor(min_half))
    h = ad.maximum(ad.minimum(h, Tensor(max_h)), Tensor(min_half))
    return w, h


def bilinear_sample(grid: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample a (C, H, W) grid at continuous points; edge-clamped.

    Differentiable in the grid values and in the sample coordinates. The
    coordinate gradient is zero wherever a sample is clamped to the border
    (moving the point does not change the value there).
    """
    grid = ad.as_tensor(grid)
    xs, ys = ad.as_tensor(xs), ad.as_tensor(ys)
    if grid.ndim != 3:
        raise DimensionError("bilinear_sample expects a (C, H, W) grid")
    if xs.ndim != 1 or ys.ndim != 1 or xs.size != ys.size:
        raise DimensionError("sample coordinates must be matching 1-D arrays")
    c, h, w = grid.shape

    x = np.clip(xs.data, 0.0, w - 1.0)
    y = np.clip(ys.data, 0.0, h - 1.0)
    in_x = (xs.data >= 0.0) & (xs.data <= w - 1.0)
    in_y = (ys.data >= 0.0) & (ys.data <= h - 1.0)

    x0 = np.minimum(np.floor(x), w - 2).astype(np.intp) if w > 1 else np.zeros_like(x, np.intp)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.intp) if h > 1 else np.zeros_like(y, np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    flat = grid.data.reshape(c, h * w)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    v00, v01 = flat[:, i00], flat[:, i01]
    v10, v11 = flat[:, i10], flat[:, i11]
    out = ((1 - fy) * ((1 - fx) * v00 + fx * v01)
           + fy * ((1 - fx) * v10 + fx * v11))

    def backward(g):
        g_flat = np.zeros((c, h * w))
        np.add.at(g_flat, (slice(None), i00), g * ((1 - fy) * (1 - fx)))
        np.add.at(g_flat, (slice(None), i01), g * ((1 - fy) * fx))
        np.add.at(g_flat, (slice(None), i10), g * (fy * (1 - fx)))
        np.add.at(g_flat, (slice(None), i11), g * (fy * fx))
        d_dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        d_dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        gx = (g * d_dx).sum(axis=0) * in_x
        gy = (g * d_dy).sum(axis=0) * in_y
        return g_flat.reshape(c, h, w), gx, gy

    return ad.record("bilinear_sample", out, (grid, xs, ys), backward)


def _lattice_fractions(n: int) -> np.ndarray:
    # Endpoint-inclusive in [-1, 1] so integer-aligned boxes copy exactly.
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def roi_crop(f: FeatureMap, box: BBox, out_h: int, out_w: int) -> FeatureMap:
    """Differentiable crop: bilinear samples on a regular lattice spanning
    [cx - w, cx + w] x [cy - h, cy + h], edge-clamped."""
    if out_h < 1 or out_w < 1:
        raise ParameterError("ROI output dimensions must be >= 1")
    cx, cy, w, h = box.as_tuple()
    if w <= 0 or h <= 0:
        raise ParameterError("box half-extents must be positive")
    if cx + w < 0 or cx - w > f.w - 1 or cy + h < 0 or cy - h > f.h - 1:
        raise LocalizationError("box does not overlap the frame")

    ux = np.tile(_lattice_fractions(out_w), out_h)
    uy = np.repeat(_lattice_fractions(out_h), out_w)
    xs = ad.add(ad.multiply(Tensor(ux), box.w), box.cx)
    ys = ad.add(ad.multiply(Tensor(uy), box.h), box.cy)
    sampled = bilinear_sample(f.grid(), xs, ys)
    return FeatureMap(sampled, out_h, out_w)


def mean_shift_refine(l_traced: LocationMap, init, bandwidth: float = 1.5,
                      max_iters: int = 50, tol: float = 1e-3,
                      return_path: bool = False):
    """Refine a center estimate by Gaussian mean-shift over traced points.

    Iterates C <- sum_i K(l_i - C) l_i / sum_i K(l_i - C) with
    K(d) = exp(-|d|^2 / bandwidth^2) until the step is below tol. The kernel
    density at C never decreases between iterations; a decrease beyond float
    noise raises. Underflowing weights fall back to the unweighted mean.
    Inference-only: not differentiated.
    """
    if bandwidth <= 0:
        raise ParameterError("bandwidth must be positive")
    pts = l_traced.coords.data  # (2, N)
    center = np.asarray(init, dtype=np.float64).reshape(2).copy()
    path = [center.copy()]

    def density(c):
        d2 = ((pts - c[:, None]) ** 2).sum(axis=0)
        return np.exp(-d2 / (bandwidth * bandwidth))

    prev_density = density(center).sum()
    for _ in range(max_iters):
        weights = density(center)
        total = weights.sum()
        if total <= 0.0:
            new_center = pts.mean(axis=1)
        else:
            new_center = (pts * weights).sum(axis=1) / total
        new_density = density(new_center).sum()
        if new_density < prev_density - 1e-9 * max(1.0, prev_density):
            raise NumericError("mean-shift density decreased")
        step = float(np.linalg.norm(new_center - center))
        center = new_center
        prev_density = new_density
        path.append(center.copy())
        if step < tol:
            break
    if return_path:
        return center, path
    return center


def localize_patch(p1: FeatureMap, f2: FeatureMap,
                   config: LocalizeConfig | None = None) -> LocalizeResult:
    """Locate the reference patch inside the target frame.

    One logit matrix (patch features against frame features) is shared by
    both directions: normalizing over frame cells traces each patch pixel
    into the frame (center + scale), and normalizing over patch cells gives
    the matching affinity returned for reuse.
    """
    cfg = config or LocalizeConfig()
    if p1.channels != f2.channels:
        raise DimensionError("patch/frame channel counts differ")
    logits = ad.matmul(ad.transpose(p1.values), f2.values)  # (N1, N2)

    # Patch pixel i's location in the frame: frame coordinates averaged with
    # weights normalized over frame cells (softmax of logit row i).
    to_frame = ad.softmax_columns(ad.transpose(logits), cfg.temperature)
    frame_grid = canonical_grid(f2.h, f2.w)
    traced_coords = ad.matmul(frame_grid.coords, to_frame)
    traced = LocationMap(traced_coords, p1.h, p1.w)

    center = locate_center(traced)
    if cfg.refine_center:
        refined = mean_shift_refine(traced, center.data,
                                    bandwidth=cfg.refine_bandwidth,
                                    max_iters=cfg.refine_max_iters,
                                    tol=cfg.refine_tol)
        center = Tensor(refined)
    w, h = estimate_scale(traced, center)
    w, h = clamp_half_extents(w, h, (f2.h, f2.w), cfg.min_half_extent)
    bbox = BBox(center[0], center[1], w, h)

    matching = AffinityMatrix(ad.softmax_columns(logits, cfg.temperature),
                              (p1.h, p1.w), (f2.h, f2.w))
    return LocalizeResult(bbox=bbox, affinity=matching, traced=traced)
