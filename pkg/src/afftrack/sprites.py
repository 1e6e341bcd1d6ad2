"""Synthetic sprite videos with exact correspondence ground truth.

Each scene composites textured rectangular sprites over a textured
background. Sprites move by per-frame translation and scaling, so the true
pixel correspondence between any two frames is a known affine map; masks,
keypoint tracks, and cell-level flow all derive from it exactly. Textures
are band-limited value noise (no wavelength below the 8-pixel feature
stride) so color features at 1/8 resolution can represent them.

The oracle features assign each ground-truth correspondence class a scaled
one-hot embedding, yielding near-permutation affinities for testing the
transport/localization machinery without any training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .affinity import FeatureMap
from .autodiff import Tensor
from .colorspace import rgb_to_gray, rgb_to_lab
from .errors import ConfigError
from .io_utils import (
    read_json,
    read_keypoints,
    read_png_indexed,
    read_png_rgb,
    write_flow,
    write_json,
    write_keypoints,
    write_png_indexed,
    write_png_rgb,
)

CELL = 8  # pixels per feature cell

MASK_PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
]


@dataclass
class SceneSpec:
    """Parameters of one generated scene."""

    height: int = 128
    width: int = 128
    frames: int = 16
    n_sprites: int = 2
    sprite_px: tuple[int, int] = (32, 48)  # sampled size range
    max_speed: float = 4.0                 # px per frame per axis
    scale_amplitude: float = 0.0           # 0 disables scaling
    same_color: bool = False               # all sprites share one texture
    cell_aligned: bool = False             # pure translation in whole cells
    keypoints_per_sprite: int = 5

    def __post_init__(self):
        if self.height % CELL or self.width % CELL:
            raise ConfigError("canvas dims must be divisible by 8")
        if self.sprite_px[1] >= min(self.height, self.width):
            raise ConfigError("sprite larger than canvas")


@dataclass
class _Sprite:
    texture: np.ndarray          # (s, s, 3) in [0, 1]
    size: int
    centers: np.ndarray          # (T, 2) float canvas positions (x, y)
    scales: np.ndarray           # (T,) float
    keypoints_local: np.ndarray  # (K, 2) in sprite coords


@dataclass
class SpriteScene:
    spec: SceneSpec
    seed: int
    frames_rgb: np.ndarray       # (T, H, W, 3) float64 [0, 1]
    masks_px: np.ndarray         # (T, H, W) uint8 instance ids, 0 = background
    keypoints: np.ndarray        # (T, K_total, 2) pixel coords
    keypoint_owner: np.ndarray   # (K_total,) sprite id per joint
    sprites: list[_Sprite] = field(repr=False, default_factory=list)

    @property
    def cells_hw(self) -> tuple[int, int]:
        return self.spec.height // CELL, self.spec.width // CELL

    def gray(self, t: int) -> np.ndarray:
        return rgb_to_gray(self.frames_rgb[t])

    def lab(self, t: int) -> np.ndarray:
        """(3, H, W) Lab image for the autoencoder."""
        return rgb_to_lab(self.frames_rgb[t]).transpose(2, 0, 1)

    def cell_mask(self, t: int) -> np.ndarray:
        """(h, w) instance ids at feature-grid resolution, majority vote."""
        h, w = self.cells_hw
        blocks = self.masks_px[t].reshape(h, CELL, w, CELL).transpose(0, 2, 1, 3)
        blocks = blocks.reshape(h, w, CELL * CELL)
        n_ids = int(self.masks_px.max()) + 1
        counts = np.stack([(blocks == i).sum(axis=2) for i in range(n_ids)], axis=0)
        return counts.argmax(axis=0)

    def affine_map(self, t0: int, t1: int, sprite_id: int) -> tuple[float, np.ndarray]:
        """(scale_ratio, offset) mapping sprite pixels from frame t0 to t1."""
        s = self.sprites[sprite_id - 1]
        ratio = s.scales[t1] / s.scales[t0]
        offset = s.centers[t1] - ratio * s.centers[t0]
        return float(ratio), offset

    def map_points(self, points: np.ndarray, t0: int, t1: int,
                   sprite_id: int) -> np.ndarray:
        """Apply the ground-truth motion of a sprite (or background, id 0)."""
        points = np.asarray(points, dtype=np.float64)
        if sprite_id == 0:
            return points.copy()
        ratio, offset = self.affine_map(t0, t1, sprite_id)
        return ratio * points + offset

    def cell_flow_step(self, t: int) -> np.ndarray:
        """(2, N) positions in frame t+1 of frame t's cell centers, in cells."""
        h, w = self.cells_hw
        owners = self.cell_mask(t).reshape(-1)
        j = np.arange(h * w)
        centers_px = np.stack([(j % w) * CELL + (CELL - 1) / 2.0,
                               (j // w) * CELL + (CELL - 1) / 2.0], axis=1)
        out = np.empty_like(centers_px)
        for sid in np.unique(owners):
            idx = owners == sid
            out[idx] = self.map_points(centers_px[idx], t, t + 1, int(sid))
        return (out / CELL).T


def _value_noise(rng: np.random.Generator, h: int, w: int,
                 scales=(32, 16, 8)) -> np.ndarray:
    """Band-limited multi-octave value noise in [0, 1]; no detail below the
    smallest scale so a stride-8 autoencoder can represent it."""
    out = np.zeros((h, w))
    amp_total = 0.0
    amp = 1.0
    for scale in scales:
        gh, gw = max(h // scale, 1) + 2, max(w // scale, 1) + 2
        lattice = rng.uniform(0, 1, size=(gh, gw))
        ys = np.arange(h) / scale
        xs = np.arange(w) / scale
        y0 = ys.astype(int)
        x0 = xs.astype(int)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        v00 = lattice[np.ix_(y0, x0)]
        v01 = lattice[np.ix_(y0, x0 + 1)]
        v10 = lattice[np.ix_(y0 + 1, x0)]
        v11 = lattice[np.ix_(y0 + 1, x0 + 1)]
        layer = ((1 - fy) * ((1 - fx) * v00 + fx * v01)
                 + fy * ((1 - fx) * v10 + fx * v11))
        out += amp * layer
        amp_total += amp
        amp *= 0.5
    return out / amp_total


def _colorize(noise: np.ndarray, palette: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    lo, hi = palette
    return lo[None, None, :] + noise[:, :, None] * (hi - lo)[None, None, :]


_PALETTES = [
    (np.array([0.55, 0.10, 0.10]), np.array([1.00, 0.55, 0.35])),
    (np.array([0.05, 0.25, 0.45]), np.array([0.45, 0.75, 1.00])),
    (np.array([0.10, 0.40, 0.10]), np.array([0.60, 1.00, 0.50])),
    (np.array([0.40, 0.10, 0.45]), np.array([0.95, 0.60, 1.00])),
    (np.array([0.45, 0.40, 0.05]), np.array([1.00, 0.95, 0.50])),
]
_BG_PALETTE = (np.array([0.25, 0.25, 0.28]), np.array([0.65, 0.65, 0.70]))


def _trajectory(rng: np.random.Generator, spec: SceneSpec, size: int,
                lane: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sampled per-frame centers and scales keeping >=50% of the sprite
    visible every frame (rejection-sampled, seeded)."""
    t = np.arange(spec.frames)
    x_lo, x_hi = (0.0, float(spec.width)) if lane is None else lane
    for _ in range(200):
        cx0 = rng.uniform(x_lo + size * 0.4, x_hi - size * 0.4)
        cy0 = rng.uniform(size * 0.4, spec.height - size * 0.4)
        vel = rng.uniform(-spec.max_speed, spec.max_speed, size=2)
        if spec.scale_amplitude > 0:
            target = rng.uniform(1.0 - spec.scale_amplitude,
                                 1.0 + spec.scale_amplitude)
            scales = np.linspace(1.0, target, spec.frames)
            scales = np.clip(scales, 0.7, 1.4)
        else:
            scales = np.ones(spec.frames)
        centers = np.stack([cx0 + vel[0] * t, cy0 + vel[1] * t], axis=1)
        half = scales * size / 2.0
        x_ok = np.minimum(centers[:, 0] + half, x_hi) - np.maximum(centers[:, 0] - half, x_lo)
        y_ok = np.minimum(centers[:, 1] + half, spec.height) - np.maximum(centers[:, 1] - half, 0.0)
        frac = np.clip(x_ok, 0, None) * np.clip(y_ok, 0, None) / (2 * half) ** 2
        if np.all(frac >= 0.5):
            return centers, scales
    raise ConfigError("could not sample an in-canvas trajectory")


def _cell_aligned_trajectory(rng: np.random.Generator, spec: SceneSpec,
                             size: int) -> tuple[np.ndarray, np.ndarray]:
    """Whole-cell translation that bounces off the canvas walls, so the
    motion stays exact at feature resolution."""
    step = np.array([CELL, CELL // 2], dtype=np.float64)
    if rng.uniform() < 0.5:
        step = step[::-1].copy()
    pos = np.array([
        rng.integers(1, (spec.width - size) // CELL - 1) * CELL + size / 2.0,
        rng.integers(1, (spec.height - size) // CELL - 1) * CELL + size / 2.0,
    ])
    centers = []
    vel = step.copy()
    cur = pos.copy()
    bounds = np.array([spec.width, spec.height], dtype=np.float64)
    for _ in range(spec.frames):
        centers.append(cur.copy())
        nxt = cur + vel
        for axis in range(2):
            if nxt[axis] - size / 2 < 0 or nxt[axis] + size / 2 > bounds[axis]:
                vel[axis] = -vel[axis]
                nxt[axis] = cur[axis] + vel[axis]
        cur = nxt
    return np.stack(centers), np.ones(spec.frames)


def generate_scene(spec: SceneSpec, seed: int) -> SpriteScene:
    """Render a scene; identical (spec, seed) pairs are bit-identical."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    background = _colorize(_value_noise(rng, h, w), _BG_PALETTE)

    sprites: list[_Sprite] = []
    shared_texture = None
    lanes = None
    if spec.same_color and spec.n_sprites == 2:
        # Keep same-looking sprites in separate halves so they never merge.
        lanes = [(0.0, w / 2.0 - 4), (w / 2.0 + 4, float(w))]
    for i in range(spec.n_sprites):
        size = int(rng.integers(spec.sprite_px[0], spec.sprite_px[1] + 1))
        size -= size % 2
        if spec.cell_aligned:
            size -= size % CELL
        palette = _PALETTES[i % len(_PALETTES)]
        if spec.same_color:
            if shared_texture is None:
                shared_texture = _colorize(
                    _value_noise(rng, size, size, scales=(16, 8)), _PALETTES[0])
            texture = shared_texture[:size, :size]
        else:
            texture = _colorize(_value_noise(rng, size, size, scales=(16, 8)),
                                palette)
        if spec.cell_aligned:
            centers, scales = _cell_aligned_trajectory(rng, spec, size)
        else:
            lane = lanes[i] if lanes else None
            centers, scales = _trajectory(rng, spec, size, lane)
        if spec.cell_aligned:
            # Interior keypoints on cell centers so decoded joints are exact.
            ks = size // CELL
            picks = rng.choice(ks * ks, size=min(spec.keypoints_per_sprite, ks * ks),
                               replace=False)
            kp = np.stack([(picks % ks) * CELL + (CELL - 1) / 2.0,
                           (picks // ks) * CELL + (CELL - 1) / 2.0], axis=1)
        else:
            kp = rng.uniform(size * 0.15, size * 0.85,
                             size=(spec.keypoints_per_sprite, 2))
        sprites.append(_Sprite(texture=texture, size=size, centers=centers,
                               scales=scales, keypoints_local=kp))

    frames = np.empty((spec.frames, h, w, 3))
    masks = np.zeros((spec.frames, h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for t in range(spec.frames):
        canvas = background.copy()
        mask = np.zeros((h, w), dtype=np.uint8)
        for sid, s in enumerate(sprites, start=1):
            cx, cy = s.centers[t]
            scale = s.scales[t]
            half = scale * s.size / 2.0
            qx = (xx - cx) / scale + s.size / 2.0
            qy = (yy - cy) / scale + s.size / 2.0
            inside = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
            if not inside.any():
                continue
            qxc = np.clip(qx[inside], 0, s.size - 1)
            qyc = np.clip(qy[inside], 0, s.size - 1)
            x0 = np.minimum(qxc.astype(int), s.size - 2)
            y0 = np.minimum(qyc.astype(int), s.size - 2)
            fx = (qxc - x0)[:, None]
            fy = (qyc - y0)[:, None]
            tex = ((1 - fy) * ((1 - fx) * s.texture[y0, x0]
                               + fx * s.texture[y0, x0 + 1])
                   + fy * ((1 - fx) * s.texture[y0 + 1, x0]
                           + fx * s.texture[y0 + 1, x0 + 1]))
            canvas[inside] = tex
            mask[inside] = sid
        frames[t] = canvas
        masks[t] = mask

    k_total = sum(len(s.keypoints_local) for s in sprites)
    keypoints = np.zeros((spec.frames, k_total, 2))
    owners = np.zeros(k_total, dtype=np.int64)
    col = 0
    for sid, s in enumerate(sprites, start=1):
        k = len(s.keypoints_local)
        owners[col:col + k] = sid
        for t in range(spec.frames):
            cx, cy = s.centers[t]
            scale = s.scales[t]
            keypoints[t, col:col + k, 0] = cx + scale * (s.keypoints_local[:, 0] - s.size / 2.0)
            keypoints[t, col:col + k, 1] = cy + scale * (s.keypoints_local[:, 1] - s.size / 2.0)
        col += k

    return SpriteScene(spec=spec, seed=seed, frames_rgb=frames, masks_px=masks,
                       keypoints=keypoints, keypoint_owner=owners,
                       sprites=sprites)


def oracle_features(scene: SpriteScene, t: int, strength: float = 10.0) -> FeatureMap:
    """Ground-truth features: one-hot embeddings shared across frames by
    corresponding cells, fresh for content with no frame-0 counterpart.

    Dot-product affinities on these are near-permutations, which lets every
    transport/localization path be validated without training.
    """
    classes, n_classes = _oracle_classes(scene)
    h, w = scene.cells_hw
    values = np.zeros((n_classes, h * w))
    values[classes[t], np.arange(h * w)] = strength
    return FeatureMap(Tensor(values), h, w)


def _oracle_classes(scene: SpriteScene) -> tuple[np.ndarray, int]:
    cache = getattr(scene, "_oracle_cache", None)
    if cache is not None:
        return cache
    h, w = scene.cells_hw
    n = h * w
    j = np.arange(n)
    centers_px = np.stack([(j % w) * CELL + (CELL - 1) / 2.0,
                           (j // w) * CELL + (CELL - 1) / 2.0], axis=1)
    owner0 = scene.cell_mask(0).reshape(-1)
    classes = np.zeros((scene.spec.frames, n), dtype=np.int64)
    classes[0] = j
    next_fresh = n
    for t in range(1, scene.spec.frames):
        owners = scene.cell_mask(t).reshape(-1)
        for idx in range(n):
            sid = int(owners[idx])
            src = scene.map_points(centers_px[idx], t, 0, sid)
            sx = int(round((src[0] - (CELL - 1) / 2.0) / CELL))
            sy = int(round((src[1] - (CELL - 1) / 2.0) / CELL))
            if 0 <= sx < w and 0 <= sy < h and owner0[sy * w + sx] == sid:
                classes[t, idx] = sy * w + sx
            else:
                classes[t, idx] = next_fresh
                next_fresh += 1
    scene._oracle_cache = (classes, next_fresh)
    return scene._oracle_cache


# ---------------------------------------------------------------------------
# On-disk corpus layout: one directory per video with numbered frame and
# mask PNGs, a keypoint text file, a cell-flow binary, and a manifest.

def write_video_dir(video_dir, scene: SpriteScene) -> None:
    video_dir = Path(video_dir)
    for t in range(scene.spec.frames):
        write_png_rgb(video_dir / f"frame_{t:03d}.png", scene.frames_rgb[t])
        write_png_indexed(video_dir / f"mask_{t:03d}.png", scene.masks_px[t],
                          MASK_PALETTE)
    write_keypoints(video_dir / "keypoints.txt", scene.keypoints)
    flows = np.stack([scene.cell_flow_step(t)
                      for t in range(scene.spec.frames - 1)])
    write_flow(video_dir / "flow.bin", flows)
    manifest = {
        "seed": scene.seed,
        "spec": asdict(scene.spec),
        "keypoint_owner": scene.keypoint_owner.tolist(),
        "sprites": [
            {"size": s.size,
             "centers": s.centers.tolist(),
             "scales": s.scales.tolist()}
            for s in scene.sprites
        ],
    }
    write_json(video_dir / "manifest.json", manifest)


@dataclass
class VideoData:
    """A corpus video loaded back from disk."""

    frames_rgb: np.ndarray
    masks_px: np.ndarray
    keypoints: np.ndarray
    keypoint_owner: np.ndarray
    manifest: dict

    def __len__(self) -> int:
        return self.frames_rgb.shape[0]

    @property
    def cells_hw(self) -> tuple[int, int]:
        h, w = self.frames_rgb.shape[1:3]
        return h // CELL, w // CELL

    def gray(self, t: int) -> np.ndarray:
        return rgb_to_gray(self.frames_rgb[t])

    def lab(self, t: int) -> np.ndarray:
        return rgb_to_lab(self.frames_rgb[t]).transpose(2, 0, 1)

    def cell_mask(self, t: int) -> np.ndarray:
        h, w = self.cells_hw
        blocks = self.masks_px[t].reshape(h, CELL, w, CELL).transpose(0, 2, 1, 3)
        blocks = blocks.reshape(h, w, CELL * CELL)
        n_ids = int(self.masks_px.max()) + 1
        counts = np.stack([(blocks == i).sum(axis=2) for i in range(n_ids)], axis=0)
        return counts.argmax(axis=0)


def read_video_dir(video_dir) -> VideoData:
    video_dir = Path(video_dir)
    manifest = read_json(video_dir / "manifest.json")
    frames = sorted(video_dir.glob("frame_*.png"))
    if not frames:
        raise ConfigError(f"no frames in {video_dir}")
    rgb = np.stack([read_png_rgb(p) for p in frames])
    masks = np.stack([read_png_indexed(video_dir / f"mask_{t:03d}.png")
                      for t in range(len(frames))]).astype(np.uint8)
    keypoints = read_keypoints(video_dir / "keypoints.txt")
    owner = np.asarray(manifest["keypoint_owner"], dtype=np.int64)
    return VideoData(frames_rgb=rgb, masks_px=masks, keypoints=keypoints,
                     keypoint_owner=owner, manifest=manifest)


def make_corpus(out_root, n_train: int = 64, n_eval: int = 16,
                n_twosprite: int = 4, seed: int = 0,
                spec: SceneSpec | None = None) -> dict:
    """Generate the train/eval corpus plus the same-color two-sprite eval
    preset; deterministic per seed, idempotent on disk."""
    out_root = Path(out_root)
    base = spec or SceneSpec()
    ss = np.random.SeedSequence(seed)
    groups = {
        "train": (n_train, base),
        "eval": (n_eval, base),
        "eval_twosprite": (n_twosprite,
                           SceneSpec(height=base.height, width=base.width,
                                     frames=base.frames, n_sprites=2,
                                     sprite_px=base.sprite_px,
                                     max_speed=min(base.max_speed, 3.0),
                                     same_color=True)),
    }
    children = ss.spawn(sum(n for n, _ in groups.values()))
    counts = {}
    child_iter = iter(children)
    for group, (count, group_spec) in groups.items():
        for i in range(count):
            child_seed = int(next(child_iter).generate_state(1)[0])
            scene = generate_scene(group_spec, child_seed)
            write_video_dir(out_root / group / f"video_{i:03d}", scene)
        counts[group] = count
    index = {"seed": seed, "counts": counts, "spec": asdict(base)}
    write_json(out_root / "corpus.json", index)
    return index


def list_videos(corpus_root, group: str) -> list[Path]:
    root = Path(corpus_root) / group
    if not root.is_dir():
        raise ConfigError(f"corpus group not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir())
