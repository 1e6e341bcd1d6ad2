"""sRGB <-> CIE Lab conversion (D65) and the gray channel used for encoding.

The white point is taken as the sRGB matrix's own row sums so that
rgb=(1,1,1) maps exactly to L=100, a=b=0 and the round trip is stable to
float precision.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = _RGB_TO_XYZ.sum(axis=1)  # D65, consistent with the matrix
_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _f_inv(u):
    return np.where(u > _DELTA, u ** 3, 3 * _DELTA ** 2 * (u - 4.0 / 29.0))


def rgb_to_lab(rgb, strict: bool = False) -> np.ndarray:
    """Convert sRGB in [0, 1] (channels on the last axis) to CIE Lab.

    Out-of-range input is clamped; with strict=True it raises instead.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ParameterError("expected 3 sRGB channels on the last axis")
    if strict and (rgb.min() < 0.0 or rgb.max() > 1.0):
        raise ParameterError("sRGB values outside [0, 1] in strict mode")
    rgb = np.clip(rgb, 0.0, 1.0)
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    fxyz = _f(xyz / _WHITE)
    lab = np.empty_like(rgb)
    lab[..., 0] = 116.0 * fxyz[..., 1] - 16.0
    lab[..., 1] = 500.0 * (fxyz[..., 0] - fxyz[..., 1])
    lab[..., 2] = 200.0 * (fxyz[..., 1] - fxyz[..., 2])
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    """Inverse of rgb_to_lab; output clipped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    if lab.shape[-1] != 3:
        raise ParameterError("expected 3 Lab channels on the last axis")
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * _WHITE
    return np.clip(_linear_to_srgb(xyz @ _XYZ_TO_RGB.T), 0.0, 1.0)


def rgb_to_gray(rgb) -> np.ndarray:
    """Lightness channel rescaled to [0, 1]; the feature encoder's input."""
    return rgb_to_lab(rgb)[..., 0] / 100.0


# The autoencoder works on Lab scaled to comparable ranges per channel.
_LAB_SCALE = np.array([100.0, 110.0, 110.0])


def lab_normalize(lab) -> np.ndarray:
    return np.asarray(lab, dtype=np.float64) / _LAB_SCALE


def lab_denormalize(lab_norm) -> np.ndarray:
    return np.asarray(lab_norm, dtype=np.float64) * _LAB_SCALE
