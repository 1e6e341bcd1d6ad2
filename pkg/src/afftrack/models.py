"""Desk-scale encoders: a trainable gray-image feature encoder producing
1/8-resolution features, and a frozen color autoencoder over Lab images.

Convolutions are implemented as nine offset matmuls (one per 3x3 tap),
which keeps both forward and backward passes as plain matrix products.
Checkpoints are a little-endian binary container of named float64 blocks
with magic "AFTK0001".
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .affinity import FeatureMap
from .autodiff import Tensor
from .colorspace import lab_denormalize, lab_normalize
from .errors import (
    ConfigError,
    DimensionError,
    NumericError,
    StateError,
    TrainingError,
)
from .io_utils import atomic_write_bytes

CHECKPOINT_MAGIC = b"AFTK0001"


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 1) -> Tensor:
    """2-D convolution on a single (C_in, H, W) image; 3x3 kernels.

    Output spatial dims are (H + 2*pad - K) // stride + 1. Differentiable in
    the input, weights, and bias.
    """
    x, weight, bias = ad.as_tensor(x), ad.as_tensor(weight), ad.as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError("conv2d expects (C,H,W) input and (O,C,K,K) weight")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError("conv2d channel mismatch")
    _, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    w_flat = weight.data.reshape(c_out, c_in, kh * kw)

    views = []
    out = np.broadcast_to(bias.data[:, None], (c_out, oh * ow)).copy()
    for dy in range(kh):
        for dx in range(kw):
            v = xp[:, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride]
            v = np.ascontiguousarray(v).reshape(c_in, oh * ow)
            views.append(v)
            out += w_flat[:, :, dy * kw + dx] @ v

    def backward(g):
        g_mat = g.reshape(c_out, oh * ow)
        g_w = np.empty_like(weight.data)
        g_xp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                tap = dy * kw + dx
                g_w[:, :, dy, dx] = g_mat @ views[tap].T
                contrib = (w_flat[:, :, tap].T @ g_mat).reshape(c_in, oh, ow)
                g_xp[:, dy:dy + stride * oh:stride,
                     dx:dx + stride * ow:stride] += contrib
        g_x = g_xp[:, pad:pad + h, pad:pad + w] if pad else g_xp
        return np.ascontiguousarray(g_x), g_w, g_mat.sum(axis=1)

    return ad.record("conv2d", out.reshape(c_out, oh, ow),
                     (x, weight, bias), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of a (C, H, W) tensor."""
    x = ad.as_tensor(x)
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(g):
        g_blocks = g.reshape(c, h, factor, w, factor)
        return (g_blocks.sum(axis=(2, 4)),)

    return ad.record("upsample_nearest", out, (x,), backward)


def _init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3,
               requires_grad: bool = True) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(1.0 / (c_in * k * k))
    weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    bias = rng.uniform(-bound, bound, size=(c_out,))
    return (Tensor(weight, requires_grad=requires_grad),
            Tensor(bias, requires_grad=requires_grad))


class ConvEncoder:
    """Three stride-2 3x3 conv layers, 1 -> 16 -> 32 -> C_out features.

    Leaky rectification (slope 0.1) after the first two layers; the final
    layer is linear so dot-product similarities are unconstrained in sign.
    Output geometry is exactly input/8 for inputs divisible by 8.
    """

    CHANNELS = (1, 16, 32)

    def __init__(self, out_channels: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        chain = self.CHANNELS + (out_channels,)
        self.out_channels = out_channels
        self.params: dict[str, Tensor] = {}
        for i in range(3):
            w, b = _init_conv(rng, chain[i + 1], chain[i])
            self.params[f"conv{i + 1}.weight"] = w
            self.params[f"conv{i + 1}.bias"] = b

    def __call__(self, img: Tensor) -> FeatureMap:
        return encode_gray(img, self)

    def load_params(self, blocks: dict[str, np.ndarray]) -> None:
        for name, param in self.params.items():
            if name not in blocks:
                raise ConfigError(f"checkpoint missing block {name}")
            if blocks[name].shape != param.shape:
                raise ConfigError(f"checkpoint block {name} has wrong shape")
            param.data = np.ascontiguousarray(blocks[name], dtype=np.float64)

    def export_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


def encode_gray(img: Tensor, enc: ConvEncoder) -> FeatureMap:
    """Encode a (1, H, W) gray image into a FeatureMap at 1/8 resolution."""
    img = ad.as_tensor(img)
    if img.ndim != 3 or img.shape[0] != 1:
        raise DimensionError("encode_gray expects a (1, H, W) tensor")
    _, h, w = img.shape
    if h % 8 or w % 8:
        raise DimensionError("input dims must be divisible by 8")
    x = img
    p = enc.params
    x = ad.leaky_relu(conv2d(x, p["conv1.weight"], p["conv1.bias"], stride=2), 0.1)
    x = ad.leaky_relu(conv2d(x, p["conv2.weight"], p["conv2.bias"], stride=2), 0.1)
    x = conv2d(x, p["conv3.weight"], p["conv3.bias"], stride=2)
    return FeatureMap.from_grid(x)


class ColorAutoencoder:
    """Small conv autoencoder over normalized Lab images.

    The encoder mirrors the feature encoder's stride-8 geometry so color
    latents align with the affinity grid without resampling; the decoder
    upsamples back with nearest-neighbor + conv blocks. Once frozen, no
    gradient ever flows into its parameters.
    """

    def __init__(self, latent_channels: int = 8, seed: int = 1):
        rng = np.random.default_rng(seed)
        self.latent_channels = latent_channels
        self.frozen = False
        self.training_curve: list[float] = []
        enc_chain = (3, 16, 24, latent_channels)
        dec_chain = (latent_channels, 24, 16, 3)
        self.params: dict[str, Tensor] = {}
        for i in range(3):
            w, b = _init_conv(rng, enc_chain[i + 1], enc_chain[i])
            self.params[f"enc{i + 1}.weight"] = w
            self.params[f"enc{i + 1}.bias"] = b
        for i in range(3):
            w, b = _init_conv(rng, dec_chain[i + 1], dec_chain[i])
            self.params[f"dec{i + 1}.weight"] = w
            self.params[f"dec{i + 1}.bias"] = b

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def encode(self, lab_norm: Tensor) -> Tensor:
        """(3, H, W) normalized Lab -> (D_c, H/8, W/8) latent grid."""
        p = self.params
        x = ad.leaky_relu(conv2d(lab_norm, p["enc1.weight"], p["enc1.bias"], stride=2), 0.1)
        x = ad.leaky_relu(conv2d(x, p["enc2.weight"], p["enc2.bias"], stride=2), 0.1)
        return conv2d(x, p["enc3.weight"], p["enc3.bias"], stride=2)

    def decode(self, latent: Tensor) -> Tensor:
        p = self.params
        x = upsample_nearest(latent, 2)
        x = ad.leaky_relu(conv2d(x, p["dec1.weight"], p["dec1.bias"]), 0.1)
        x = upsample_nearest(x, 2)
        x = ad.leaky_relu(conv2d(x, p["dec2.weight"], p["dec2.bias"]), 0.1)
        x = upsample_nearest(x, 2)
        return conv2d(x, p["dec3.weight"], p["dec3.bias"])

    def load_params(self, blocks: dict[str, np.ndarray]) -> None:
        for name, param in self.params.items():
            if name not in blocks:
                raise ConfigError(f"checkpoint missing block {name}")
            param.data = np.ascontiguousarray(blocks[name], dtype=np.float64)

    def export_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


def encode_color(img_lab: Tensor, ae: ColorAutoencoder) -> Tensor:
    """Frozen color features (D_c, N) at feature-grid resolution.

    Takes Lab in its native units; normalization happens internally. Raises
    if the autoencoder has not been frozen, which would let the main
    training phase corrupt the color pathway.
    """
    img_lab = ad.as_tensor(img_lab)
    if not ae.frozen:
        raise StateError("color autoencoder must be frozen before use")
    if img_lab.ndim != 3 or img_lab.shape[0] != 3:
        raise DimensionError("encode_color expects a (3, H, W) tensor")
    _, h, w = img_lab.shape
    if h % 8 or w % 8:
        raise DimensionError("input dims must be divisible by 8")
    lab_norm = Tensor(lab_normalize(img_lab.data.transpose(1, 2, 0)).transpose(2, 0, 1))
    latent = ae.encode(lab_norm)
    c, lh, lw = latent.shape
    return ad.reshape(latent, (c, lh * lw))


def reconstruction_mse_lab(ae: ColorAutoencoder, img_lab: np.ndarray) -> float:
    """Per-pixel Lab-unit MSE of the autoencoder round trip (3, H, W)."""
    lab_norm = lab_normalize(np.asarray(img_lab).transpose(1, 2, 0)).transpose(2, 0, 1)
    recon = ae.decode(ae.encode(Tensor(lab_norm))).data
    recon_lab = lab_denormalize(recon.transpose(1, 2, 0))
    return float(np.mean((recon_lab - np.asarray(img_lab).transpose(1, 2, 0)) ** 2))


def pretrain_color_autoencoder(corpus, epochs: int, lr: float = 1e-3,
                               latent_channels: int = 8, batch_size: int = 4,
                               seed: int = 1) -> ColorAutoencoder:
    """Train the Lab autoencoder to convergence on the corpus, then freeze.

    ``corpus`` is a sequence of Lab images shaped (3, H, W). Returns the
    frozen model with its per-epoch loss curve on ``training_curve``.
    Divergence (non-finite loss) raises TrainingError.
    """
    from .training import Adam  # local import to avoid a cycle

    images = [np.asarray(img, dtype=np.float64) for img in corpus]
    if not images:
        raise TrainingError("color autoencoder corpus is empty")
    ae = ColorAutoencoder(latent_channels=latent_channels, seed=seed)
    curve: list[float] = []
    if epochs > 0:
        rng = np.random.default_rng(seed)
        adam = Adam(ae.params, lr=lr)
        norm_images = [
            lab_normalize(img.transpose(1, 2, 0)).transpose(2, 0, 1)
            for img in images
        ]
        try:
            for _ in range(epochs):
                order = rng.permutation(len(norm_images))
                epoch_losses = []
                for start in range(0, len(order), batch_size):
                    batch = order[start:start + batch_size]
                    with ad.GradTape() as tape:
                        loss = Tensor(0.0)
                        for idx in batch:
                            target = Tensor(norm_images[idx])
                            recon = ae.decode(ae.encode(target))
                            diff = ad.subtract(recon, target)
                            loss = ad.add(loss, ad.tmean(ad.multiply(diff, diff)))
                        loss = ad.multiply(loss, Tensor(1.0 / len(batch)))
                        tape.backward(loss)
                    grads = {name: (p.grad if p.grad is not None
                                    else np.zeros_like(p.data))
                             for name, p in ae.params.items()}
                    adam.step(grads)
                    epoch_losses.append(float(loss.data))
                curve.append(float(np.mean(epoch_losses)))
        except NumericError as err:
            raise TrainingError(f"autoencoder pretraining diverged: {err}")
    ae.freeze()
    ae.training_curve = curve
    return ae


def save_checkpoint(path, blocks: dict[str, np.ndarray]) -> None:
    """Write named float64 blocks to the versioned binary container."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    offset = 8
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
        offset += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        blocks[name] = arr.reshape(shape).astype(np.float64)
    return blocks
