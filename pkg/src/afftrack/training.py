"""Two-stage self-supervised training over sprite videos.

The warm-up stage matches patches cropped at the same place in both frames
(no localization), so the matching losses can shape the features before the
localizer depends on them. The joint stage then localizes the reference
patch in the full target frame, crops a differentiable ROI there, and adds
the region-level concentration term. A single seeded Generator drives all
sampling, so a (config, seed) pair reproduces parameter trajectories bit
for bit; checkpoints capture parameters, optimizer moments, and the
generator state, so a resumed run continues the same trajectory.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .affinity import FeatureMap, canonical_grid, compute_affinity, trace_locations
from .autodiff import GradTape, Tensor
from .errors import ConfigError, NumericError, SamplingError, TrainingError
from .localization import LocalizeConfig, localize_patch, roi_crop
from .models import ColorAutoencoder, ConvEncoder, encode_color, load_checkpoint, save_checkpoint
from .objectives import (
    LossBreakdown,
    LossWeights,
    concentration_local,
    concentration_truncated,
    orthogonal_cycle_feature,
    orthogonal_cycle_location,
    reconstruction_loss,
    total_loss,
)
from .sprites import CELL


@dataclass
class TrainConfig:
    warmup_epochs: int = 10
    joint_epochs: int = 10
    lr_warmup: float = 1e-4
    lr_joint: float = 0.5e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    patch_px: int = 64
    max_frame_gap: int = 4
    pairs_per_video: int = 4
    feature_channels: int = 32
    temperature: float = 1.0
    local_grid: int = 8
    min_half_extent: float = 2.0
    grad_clip: float = 10.0
    use_localization: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.patch_px % 8:
            raise ConfigError("patch size must be divisible by 8")
        if self.lr_warmup <= 0 or self.lr_joint <= 0:
            raise ConfigError("learning rates must be positive")


@dataclass
class PairSample:
    """One training pair: frame indices plus the reference patch box."""

    video: object
    ref_idx: int
    tgt_idx: int
    box_px: tuple[int, int]  # top-left (x0, y0); side = config patch_px
    stage: str


class Adam:
    """Adam with bias-corrected first/second moments over named tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def export_state(self) -> dict[str, np.ndarray]:
        blocks = {"adam.t": np.array(float(self.t))}
        for name in self.params:
            blocks[f"adam.m.{name}"] = self.m[name].copy()
            blocks[f"adam.v.{name}"] = self.v[name].copy()
        return blocks

    def load_state(self, blocks: dict[str, np.ndarray]) -> None:
        self.t = int(blocks["adam.t"])
        for name in self.params:
            self.m[name] = np.ascontiguousarray(blocks[f"adam.m.{name}"])
            self.v[name] = np.ascontiguousarray(blocks[f"adam.v.{name}"])


def sample_pair(video, stage: str, rng: np.random.Generator,
                config: TrainConfig) -> PairSample:
    """Draw a frame pair and a reference patch box from one video.

    The warm-up stage applies the box identically to both frames; the joint
    stage keeps the full target frame so the localizer has work to do.
    """
    n_frames = video.frames_rgb.shape[0]
    if n_frames < 2:
        raise SamplingError("video too short to sample a pair")
    gap = int(rng.integers(1, min(config.max_frame_gap, n_frames - 1) + 1))
    ref = int(rng.integers(0, n_frames - gap))
    h, w = video.frames_rgb.shape[1:3]
    if config.patch_px > min(h, w):
        raise SamplingError("patch larger than the frame")
    x0 = int(rng.integers(0, w - config.patch_px + 1))
    y0 = int(rng.integers(0, h - config.patch_px + 1))
    return PairSample(video=video, ref_idx=ref, tgt_idx=ref + gap,
                      box_px=(x0, y0), stage=stage)


def _crop(img: np.ndarray, box: tuple[int, int], side: int) -> np.ndarray:
    x0, y0 = box
    if img.ndim == 2:
        return img[y0:y0 + side, x0:x0 + side]
    return img[:, y0:y0 + side, x0:x0 + side]


def _sample_terms(sample: PairSample, encoder: ConvEncoder,
                  color_ae: ColorAutoencoder, stage: str,
                  config: TrainConfig) -> dict[str, Tensor]:
    video = sample.video
    side = config.patch_px
    gray_ref = _crop(video.gray(sample.ref_idx), sample.box_px, side)
    p1 = encoder(Tensor(gray_ref[None]))
    c1 = encode_color(Tensor(_crop(video.lab(sample.ref_idx), sample.box_px, side)),
                      color_ae)

    use_loc = stage == "joint" and config.use_localization
    terms: dict[str, Tensor] = {}
    if use_loc:
        f2 = encoder(Tensor(video.gray(sample.tgt_idx)[None]))
        loc = localize_patch(p1, f2, LocalizeConfig(
            temperature=config.temperature,
            min_half_extent=config.min_half_extent))
        box = loc.bbox
        if config.weights.concentration_region != 0.0:
            center = ad.stack([box.cx, box.cy])
            terms["concentration_region"] = concentration_truncated(
                loc.traced, center, box.w, box.h)
        p2 = roi_crop(f2, box, p1.h, p1.w)
        lab_full = Tensor(video.lab(sample.tgt_idx))
        latent_full = encode_color(lab_full, color_ae)
        latent_map = FeatureMap(latent_full, f2.h, f2.w)
        c2 = roi_crop(latent_map, box, p1.h, p1.w).values
    else:
        gray_tgt = _crop(video.gray(sample.tgt_idx), sample.box_px, side)
        p2 = encoder(Tensor(gray_tgt[None]))
        c2 = encode_color(
            Tensor(_crop(video.lab(sample.tgt_idx), sample.box_px, side)),
            color_ae)

    a12 = compute_affinity(p1, p2, config.temperature)
    if config.weights.reconstruction != 0.0:
        terms["reconstruction"] = reconstruction_loss(c1, c2, a12)
    l11 = canonical_grid(p1.h, p1.w)
    if config.weights.concentration_local != 0.0:
        traced = trace_locations(l11, a12)
        terms["concentration_local"] = concentration_local(traced, config.local_grid)
    if config.weights.orthogonal_location != 0.0:
        terms["orthogonal_location"] = orthogonal_cycle_location(l11, a12)
    if config.weights.orthogonal_feature != 0.0:
        terms["orthogonal_feature"] = orthogonal_cycle_feature(p1, a12)
    return terms


def train_step(batch: list[PairSample], encoder: ConvEncoder,
               color_ae: ColorAutoencoder, stage: str, optimizer: Adam,
               config: TrainConfig) -> tuple[LossBreakdown, float]:
    """One Adam update on the encoder from a batch of pairs.

    Returns the batch-mean loss breakdown and the (pre-clip) gradient norm.
    A non-finite loss aborts with a pointer to the last checkpoint.
    """
    if not color_ae.frozen:
        raise TrainingError("color autoencoder must be frozen during training")
    try:
        with GradTape() as tape:
            sums: dict[str, Tensor] = {}
            for sample in batch:
                for name, term in _sample_terms(sample, encoder, color_ae,
                                                stage, config).items():
                    sums[name] = term if name not in sums else ad.add(sums[name], term)
            scale = Tensor(1.0 / len(batch))
            means = {name: ad.multiply(t, scale) for name, t in sums.items()}
            total, breakdown = total_loss(stage, means, config.weights)
            tape.backward(total)
    except NumericError as err:
        raise TrainingError(
            f"non-finite loss; restore from the last epoch checkpoint ({err})")

    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in encoder.params.items()}
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if config.grad_clip > 0 and norm > config.grad_clip:
        factor = config.grad_clip / norm
        grads = {name: g * factor for name, g in grads.items()}
    optimizer.step(grads)
    return breakdown, norm


@dataclass
class TrainResult:
    encoder: ConvEncoder
    log: list[dict]
    checkpoint_paths: list[Path] = field(default_factory=list)


def _save_train_checkpoint(out_dir: Path, epoch: int, encoder: ConvEncoder,
                           optimizer: Adam, rng: np.random.Generator,
                           step: int) -> Path:
    blocks = encoder.export_params()
    blocks.update(optimizer.export_state())
    path = out_dir / f"ckpt_epoch_{epoch:03d}.aftk"
    save_checkpoint(path, blocks)
    state = {
        "epoch": epoch,
        "step": step,
        "rng_state": rng.bit_generator.state,
    }
    (out_dir / f"ckpt_epoch_{epoch:03d}.state.json").write_text(
        json.dumps(state, indent=2) + "\n")
    return path


def run_training(videos: list, config: TrainConfig, color_ae: ColorAutoencoder,
                 out_dir=None, resume_from=None) -> TrainResult:
    """Run warm-up then joint epochs over the corpus.

    One epoch makes ``pairs_per_video`` samples from every video, shuffles
    them, and steps batch by batch. With ``out_dir`` set, every epoch writes
    a checkpoint (parameters + optimizer moments + generator state) and the
    log streams to ``train_log.jsonl`` one record per step, flushed so a
    crashed run keeps its partial log.
    """
    if not videos:
        raise TrainingError("no training videos supplied")
    encoder = ConvEncoder(out_channels=config.feature_channels,
                          seed=config.seed)
    optimizer = Adam(encoder.params, lr=config.lr_warmup,
                     betas=config.adam_betas, eps=config.adam_eps)
    rng = np.random.default_rng(config.seed)
    start_epoch = 0
    step = 0
    if resume_from is not None:
        blocks = load_checkpoint(resume_from)
        encoder.load_params(blocks)
        optimizer.load_state(blocks)
        state = json.loads(Path(str(resume_from).replace(".aftk", ".state.json"))
                           .read_text())
        rng.bit_generator.state = state["rng_state"]
        start_epoch = state["epoch"] + 1
        step = state["step"]

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl",
                        "a" if resume_from else "w", encoding="utf-8")

    log: list[dict] = []
    result_paths: list[Path] = []
    total_epochs = config.warmup_epochs + config.joint_epochs
    try:
        for epoch in range(start_epoch, total_epochs):
            stage = "warmup" if epoch < config.warmup_epochs else "joint"
            optimizer.lr = config.lr_warmup if stage == "warmup" else config.lr_joint
            samples = [sample_pair(v, stage, rng, config)
                       for v in videos for _ in range(config.pairs_per_video)]
            order = rng.permutation(len(samples))
            t0 = time.monotonic()
            for start in range(0, len(order), config.batch_size):
                batch = [samples[i] for i in order[start:start + config.batch_size]]
                breakdown, grad_norm = train_step(batch, encoder, color_ae,
                                                  stage, optimizer, config)
                record = {"step": step, "epoch": epoch, "stage": stage,
                          "grad_norm": grad_norm}
                record.update(breakdown.as_dict())
                log.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                step += 1
            if out_dir is not None:
                result_paths.append(_save_train_checkpoint(
                    out_dir, epoch, encoder, optimizer, rng, step))
            elapsed = time.monotonic() - t0
            log.append({"epoch_summary": epoch, "stage": stage,
                        "seconds": round(elapsed, 3)})
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(encoder=encoder, log=log, checkpoint_paths=result_paths)


def effective_config(config: TrainConfig) -> dict:
    out = asdict(config)
    out["weights"] = config.weights.as_dict()
    return out
