"""Impedance-change images from lung and heart masks.

No electrode physics: each pixel is a weighted mix of the volume signal and a
delayed cardiac waveform, plus white noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 32
MAX_CARDIAC_DELAY = 5  # samples at 100 Hz


@dataclass(frozen=True)
class Anatomy:
    lung: np.ndarray  # [32, 32] ventilation gain g_L
    heart: np.ndarray  # [32, 32] cardiac gain g_H
    delay: np.ndarray  # [32, 32] int, cardiac delay in 100 Hz samples

    def lung_centroid(self) -> tuple[float, float]:
        w = self.lung
        rows, cols = np.indices(w.shape)
        return float((rows * w).sum() / w.sum()), float((cols * w).sum() / w.sum())


def _soft_ellipse(u, v, cx, cy, ax, ay, theta, sharpness=4.0):
    c, s = np.cos(theta), np.sin(theta)
    du, dv = u - cx, v - cy
    x = (c * du + s * dv) / ax
    y = (-s * du + c * dv) / ay
    return np.clip((1.0 - (x * x + y * y)) * sharpness, 0.0, 1.0)


def anatomy_masks(seed: int, size: int = IMAGE_SIZE) -> Anatomy:
    """Two lungs and a heart with seeded rotation, translation and size jitter.

    Image rows run ventral (top) to dorsal (bottom); the heart sits ventrally,
    slightly to the image right.
    """
    rng = np.random.default_rng(seed)
    theta = np.deg2rad(rng.uniform(-12, 12))
    shift = rng.uniform(-0.12, 0.12, size=2)
    scale = rng.uniform(0.85, 1.1)
    asym = rng.uniform(0.9, 1.1)
    grad = rng.uniform(0.3, 0.7)

    coords = (np.arange(size) + 0.5) / (size / 2) - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    c, s = np.cos(theta), np.sin(theta)
    ur = c * u + s * v - shift[0]
    vr = -s * u + c * v - shift[1]

    right = _soft_ellipse(ur, vr, -0.42 * scale, 0.05, 0.3 * scale * asym, 0.5 * scale, 0.1)
    left = _soft_ellipse(ur, vr, 0.42 * scale, 0.08, 0.27 * scale, 0.46 * scale, -0.1)
    heart = _soft_ellipse(ur, vr, 0.12 * scale, -0.3 * scale, 0.22 * scale, 0.17 * scale, 0.3)
    # ventilation is stronger ventrally for supine patients
    ventral = 1.0 - grad * (vr + 1.0) / 2.0
    lung = np.clip(right + left, 0.0, 1.0) * (1.0 - heart) * ventral
    dist = np.hypot(ur - 0.12 * scale, vr + 0.3 * scale)
    delay = np.clip(np.round(dist / 0.5 * MAX_CARDIAC_DELAY), 0, MAX_CARDIAC_DELAY).astype(np.int64)
    return Anatomy(lung, heart, delay)


def render_eit(
    volume: np.ndarray,
    cardiac: np.ndarray,
    anatomy: Anatomy,
    rng: np.random.Generator,
    v_ref: float = 500.0,
    noise_sigma: float = 0.05,
    cardiac_gain: float = 0.1,
    ventilation_gain: float = 1.0,
) -> np.ndarray:
    """Frames [T, 32, 32] float32.

    ``cardiac`` is [MAX_CARDIAC_DELAY + 1, T]: row d is the heart waveform delayed
    by d samples. Noise and cardiac gains are fractions of the ventilation
    amplitude reached at ``v_ref``.
    """
    volume = np.asarray(volume, dtype=np.float64)
    frames = ventilation_gain * (volume / v_ref)[:, None, None] * anatomy.lung[None]
    if cardiac_gain:
        per_pixel = cardiac[:, :].T[:, anatomy.delay]  # [T, 32, 32]
        frames = frames + cardiac_gain * ventilation_gain * anatomy.heart[None] * per_pixel
    if noise_sigma:
        frames = frames + noise_sigma * ventilation_gain * rng.standard_normal(frames.shape)
    return frames.astype(np.float32)
