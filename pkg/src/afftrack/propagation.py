"""Recurrent label propagation and its evaluation metrics.

Propagation keeps the first frame's ground-truth labels pinned and a ring
of the most recent predictions; each new frame averages the transported
maps from all of them. Labels are any per-cell channels: mask one-hot,
keypoint heatmaps, or texture colors. Track mode restricts each instance's
transport to a localized box in the target frame, which suppresses matches
onto lookalike background or other instances.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .affinity import AffinityMatrix, FeatureMap, compute_affinity, topk_sparsify, transport
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, MetricError, ParameterError
from .localization import LocalizeConfig, localize_patch, mean_shift_refine
from .sprites import CELL

logger = logging.getLogger("afftrack.propagation")

LABEL_KINDS = ("mask", "keypoint", "texture")


@dataclass
class LabelMap:
    """Per-cell label channels at feature-grid resolution."""

    kind: str
    values: Tensor  # (L, N)
    h: int
    w: int

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise ParameterError(f"label kind must be one of {LABEL_KINDS}")
        if self.values.ndim != 2 or self.values.shape[1] != self.h * self.w:
            raise DimensionError("label values disagree with geometry")

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class PropagationConfig:
    k_frames: int = 7       # recent predictions kept besides the first frame
    k_nn: int = 5           # top-k sparsification of each affinity column
    temperature: float = 1.0
    mode: str = "global"    # "global" | "track"
    track_bandwidth: float = 1.5
    track_min_half: float = 1.0

    def __post_init__(self):
        if self.k_frames < 0:
            raise ParameterError("k_frames must be >= 0")
        if self.k_nn < 1:
            raise ParameterError("k_nn must be >= 1")
        if self.mode not in ("global", "track"):
            raise ParameterError("mode must be 'global' or 'track'")


def masks_to_labelmap(cell_ids: np.ndarray, n_ids: int | None = None) -> LabelMap:
    """One-hot label channels (background = channel 0) from an id grid."""
    cell_ids = np.asarray(cell_ids)
    h, w = cell_ids.shape
    n = n_ids if n_ids is not None else int(cell_ids.max()) + 1
    flat = cell_ids.reshape(-1)
    values = np.zeros((max(n, 1), h * w))
    values[flat, np.arange(h * w)] = 1.0
    return LabelMap("mask", Tensor(values), h, w)


def labelmap_to_mask(labels: LabelMap) -> np.ndarray:
    """Hard ids by per-cell argmax (ties to the lower channel)."""
    return labels.values.data.argmax(axis=0).reshape(labels.h, labels.w)


def keypoints_to_labelmap(joints_px: np.ndarray, cells_hw: tuple[int, int]) -> LabelMap:
    """One heatmap channel per joint: a unit spike at the containing cell."""
    h, w = cells_hw
    joints_px = np.asarray(joints_px, dtype=np.float64)
    values = np.zeros((joints_px.shape[0], h * w))
    for j, (x, y) in enumerate(joints_px):
        cx = int(np.clip(x // CELL, 0, w - 1))
        cy = int(np.clip(y // CELL, 0, h - 1))
        values[j, cy * w + cx] = 1.0
    return LabelMap("keypoint", Tensor(values), h, w)


def heatmap_to_joint(heatmap: np.ndarray) -> tuple[int, int] | None:
    """Cell (x, y) of the heatmap mode on a 2-D channel; ties resolve to the
    lowest flat index. Returns None for an all-zero channel (undefined)."""
    arr = np.asarray(heatmap)
    if arr.ndim != 2:
        raise DimensionError("heatmap_to_joint expects a 2-D channel")
    flat = arr.reshape(-1)
    if flat.max(initial=0.0) <= 0.0:
        return None
    idx = int(flat.argmax())
    return idx % arr.shape[1], idx // arr.shape[1]


def joint_cell_to_px(cell_xy: tuple[int, int]) -> tuple[float, float]:
    """Pixel center of a feature cell."""
    half = (CELL - 1) / 2.0
    return cell_xy[0] * CELL + half, cell_xy[1] * CELL + half


def decode_joints(labels: LabelMap) -> np.ndarray:
    """Joint pixel positions from propagated heatmap channels; an undefined
    channel decodes to NaN."""
    out = np.full((labels.channels, 2), np.nan)
    grid = labels.values.data.reshape(labels.channels, labels.h, labels.w)
    for j in range(labels.channels):
        cell = heatmap_to_joint(grid[j])
        if cell is not None:
            out[j] = joint_cell_to_px(cell)
    return out


def propagate_step(sources: list[tuple[FeatureMap, LabelMap]],
                   target_f: FeatureMap, cfg: PropagationConfig) -> LabelMap:
    """Average the transported label maps from every source frame."""
    if not sources:
        raise ParameterError("propagate_step needs at least one source")
    channels = sources[0][1].channels
    kind = sources[0][1].kind
    acc = None
    for f_src, labels in sources:
        if labels.channels != channels:
            raise DimensionError("source label channel counts differ")
        affinity = compute_affinity(f_src, target_f, cfg.temperature)
        affinity = topk_sparsify(affinity, min(cfg.k_nn, affinity.n_src))
        moved = transport(labels.values, affinity).data
        acc = moved if acc is None else acc + moved
    out = acc / len(sources)
    return LabelMap(kind, Tensor(out), target_f.h, target_f.w)


def _instance_cell_box(ids: np.ndarray, instance: int,
                       h: int, w: int) -> tuple[int, int, int, int] | None:
    cells = np.flatnonzero(ids == instance)
    if cells.size == 0:
        return None
    xs, ys = cells % w, cells // w
    return int(xs.min()), int(xs.max()), int(ys.min()), int(ys.max())


def _box_rows(box: tuple[int, int, int, int], w: int) -> np.ndarray:
    x0, x1, y0, y1 = box
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    return (ys[:, None] * w + xs[None, :]).reshape(-1)


def _restricted_transport(affinity: AffinityMatrix, labels: np.ndarray,
                          rows: np.ndarray, cols: np.ndarray,
                          k_nn: int, n: int) -> np.ndarray:
    """Transport label rows through the row/column-restricted affinity.

    Restricting the softmax's support and renormalizing equals computing
    the softmax over the restricted source set directly. When the row set
    is the full frame the matrix is taken as-is, so a full-frame box
    reproduces global propagation bit for bit.
    """
    vals = affinity.values.data
    if rows.size == vals.shape[0]:
        sub = vals[:, cols]
    else:
        sub = vals[np.ix_(rows, cols)]
        sums = sub.sum(axis=0, keepdims=True)
        good = sums > 0
        sub = np.where(good, sub / np.where(good, sums, 1.0), 0.0)
    sub_aff = AffinityMatrix(Tensor(sub), (1, rows.size), (1, cols.size))
    sub_aff = topk_sparsify(sub_aff, min(k_nn, rows.size))
    moved = labels[rows][None, :] @ sub_aff.values.data
    out = np.zeros(n)
    out[cols] = moved[0]
    return out


def _locate_instance_box(prev_f: FeatureMap, prev_ids: np.ndarray,
                         instance: int, target_f: FeatureMap,
                         cfg: PropagationConfig) -> tuple[int, int, int, int] | None:
    """Track one instance's box into the target frame: localize the box
    features, refine the center by mean-shift, clamp to the frame."""
    box = _instance_cell_box(prev_ids, instance, prev_f.h, prev_f.w)
    if box is None:
        return None
    x0, x1, y0, y1 = box
    rows = _box_rows(box, prev_f.w)
    patch = FeatureMap(Tensor(prev_f.values.data[:, rows]),
                       y1 - y0 + 1, x1 - x0 + 1)
    loc = localize_patch(patch, target_f, LocalizeConfig(
        temperature=cfg.temperature, min_half_extent=cfg.track_min_half))
    center = mean_shift_refine(loc.traced, np.array([float(loc.bbox.cx.data),
                                                     float(loc.bbox.cy.data)]),
                               bandwidth=cfg.track_bandwidth)
    w_half = float(loc.bbox.w.data)
    h_half = float(loc.bbox.h.data)
    tx0 = max(0, int(round(center[0] - w_half)))
    tx1 = min(target_f.w - 1, int(round(center[0] + w_half)))
    ty0 = max(0, int(round(center[1] - h_half)))
    ty1 = min(target_f.h - 1, int(round(center[1] + h_half)))
    if tx1 < tx0 or ty1 < ty0:
        return None
    return tx0, tx1, ty0, ty1


def _propagate_step_track(sources: list[tuple[FeatureMap, LabelMap]],
                          target_f: FeatureMap,
                          cfg: PropagationConfig) -> LabelMap:
    """Per-instance propagation restricted to tracked boxes.

    The target box for each instance comes from localizing the previous
    prediction's box; each source then transports that instance only from
    its own instance cells into the target box. Instances whose box
    degenerates fall back to global transport for the frame (logged).
    The background channel is synthesized as 1 - sum(instances), which
    matches transported background exactly when boxes cover the frame.
    """
    channels = sources[0][1].channels
    n = target_f.h * target_f.w
    prev_f, prev_labels = sources[-1]
    prev_ids = labelmap_to_mask(prev_labels).reshape(-1)

    affinities = []
    for f_src, labels in sources:
        if labels.channels != channels:
            raise DimensionError("source label channel counts differ")
        affinities.append(compute_affinity(f_src, target_f, cfg.temperature))

    out = np.zeros((channels, n))
    all_rows = np.arange(n)
    for inst in range(1, channels):
        tgt_box = _locate_instance_box(prev_f, prev_ids, inst, target_f, cfg)
        if tgt_box is None:
            logger.info("instance %d lost; falling back to global transport",
                        inst)
            cols = all_rows
        else:
            cols = _box_rows(tgt_box, target_f.w)
        acc = np.zeros(n)
        for (f_src, labels), affinity in zip(sources, affinities):
            src_ids = labelmap_to_mask(labels).reshape(-1)
            src_box = _instance_cell_box(src_ids, inst, f_src.h, f_src.w)
            rows = (_box_rows(src_box, f_src.w) if src_box is not None
                    and tgt_box is not None else all_rows)
            acc += _restricted_transport(affinity, labels.values.data[inst],
                                         rows, cols, cfg.k_nn, n)
        out[inst] = acc / len(sources)

    inst_sum = out[1:].sum(axis=0)
    over = inst_sum > 1.0
    if over.any():
        out[1:, over] /= inst_sum[over]
        inst_sum = out[1:].sum(axis=0)
    out[0] = 1.0 - inst_sum
    return LabelMap("mask", Tensor(out), target_f.h, target_f.w)


def propagate_video(frames, first_labels: LabelMap, cfg: PropagationConfig,
                    encoder=None) -> list[LabelMap]:
    """Propagate first-frame labels through the video.

    ``frames`` is either a list of FeatureMaps or, with ``encoder`` given,
    a list of gray images (H, W) that the encoder turns into FeatureMaps.
    Returns one LabelMap per frame; index 0 is the pinned input labels.
    """
    if encoder is not None:
        features = [encoder(Tensor(np.asarray(g)[None])) for g in frames]
    else:
        features = list(frames)
    if len(features) < 2:
        raise ParameterError("need at least two frames to propagate")
    if first_labels.values.data.size == 0 or first_labels.channels == 0:
        raise ParameterError("empty first-frame labels")
    if cfg.mode == "track" and first_labels.kind != "mask":
        raise ConfigError("track mode requires mask labels")

    predictions: list[LabelMap] = [first_labels]
    recent: deque[tuple[FeatureMap, LabelMap]] = deque(maxlen=cfg.k_frames)
    pinned = (features[0], first_labels)
    for t in range(1, len(features)):
        sources = [pinned] + list(recent)
        if cfg.mode == "track":
            pred = _propagate_step_track(sources, features[t], cfg)
        else:
            pred = propagate_step(sources, features[t], cfg)
        predictions.append(pred)
        if cfg.k_frames > 0:
            recent.append((features[t], pred))
    return predictions


# ---------------------------------------------------------------------------
# Metrics

def _as_mask_list(masks) -> list[np.ndarray]:
    arr = np.asarray(masks)
    if arr.ndim == 2:
        return [arr]
    return [np.asarray(m) for m in masks]


def metric_jaccard(pred_mask, true_mask) -> tuple[float, float]:
    """Mean per-object IoU and the fraction of object-frames with J > 0.5.

    Objects are the nonzero ids of the true mask, per frame. An empty union
    scores 1 when both masks are empty for that object, else 0.
    """
    preds, trues = _as_mask_list(pred_mask), _as_mask_list(true_mask)
    if len(preds) != len(trues):
        raise DimensionError("prediction/truth frame counts differ")
    scores = []
    for p, t in zip(preds, trues):
        if p.shape != t.shape:
            raise DimensionError("mask geometries differ")
        ids = [i for i in np.unique(t) if i != 0]
        if not ids:
            ids = [1]  # binary convention: empty truth scores the fg channel
        for obj in ids:
            inter = float(np.logical_and(p == obj, t == obj).sum())
            union = float(np.logical_or(p == obj, t == obj).sum())
            scores.append(1.0 if union == 0 else inter / union)
    mean_j = float(np.mean(scores))
    recall = float(np.mean([s > 0.5 for s in scores]))
    return mean_j, recall


def _boundary_cells(mask: np.ndarray) -> np.ndarray:
    """Cells whose 4-neighborhood crosses a label change; (K, 2) as (y, x)."""
    m = np.asarray(mask) != 0
    edge = np.zeros_like(m)
    edge[:-1, :] |= m[:-1, :] != m[1:, :]
    edge[1:, :] |= m[1:, :] != m[:-1, :]
    edge[:, :-1] |= m[:, :-1] != m[:, 1:]
    edge[:, 1:] |= m[:, 1:] != m[:, :-1]
    edge &= m
    return np.argwhere(edge)


def metric_boundary_f(pred_mask, true_mask, tol_cells: int = 1) -> float:
    """Boundary F-measure: precision/recall of boundary cells matched within
    a Chebyshev distance tolerance, combined by harmonic mean."""
    pred_b = _boundary_cells(pred_mask)
    true_b = _boundary_cells(true_mask)
    if len(pred_b) == 0 and len(true_b) == 0:
        return 1.0
    if len(pred_b) == 0 or len(true_b) == 0:
        return 0.0
    tree_t = cKDTree(true_b)
    tree_p = cKDTree(pred_b)
    d_pt, _ = tree_t.query(pred_b, k=1, p=np.inf)
    d_tp, _ = tree_p.query(true_b, k=1, p=np.inf)
    precision = float(np.mean(d_pt <= tol_cells))
    recall = float(np.mean(d_tp <= tol_cells))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pck_norm(true_joints: np.ndarray) -> float:
    """Max side of the ground-truth joints' bounding box."""
    pts = np.asarray(true_joints, dtype=np.float64)
    spread = pts.max(axis=0) - pts.min(axis=0)
    return float(spread.max())


def metric_pck(pred_joints, true_joints, thresholds=(0.1, 0.2),
               norm: float | None = None) -> dict[float, float]:
    """Fraction of joints within threshold * norm of their ground truth."""
    pred = np.asarray(pred_joints, dtype=np.float64)
    true = np.asarray(true_joints, dtype=np.float64)
    if pred.shape != true.shape:
        raise DimensionError("joint arrays must have matching shapes")
    if norm is None:
        norm = pck_norm(true)
    if not norm > 0:
        raise MetricError("PCK normalization length must be positive")
    dist = np.linalg.norm(pred - true, axis=-1).reshape(-1)
    return {float(th): float(np.mean(dist <= th * norm)) for th in thresholds}
