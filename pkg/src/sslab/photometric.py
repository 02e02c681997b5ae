"""Per-pixel photometric perturbation: brightness, saturation, hue, contrast, channel shuffle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BRIGHTNESS_RANGE = (-0.25, 0.25)
SATURATION_RANGE = (0.25, 2.0)
HUE_RANGE = (-36.0, 36.0)  # degrees
CONTRAST_RANGE = (0.25, 2.0)


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 0.0
    saturation: float = 1.0
    hue: float = 0.0
    contrast: float = 1.0
    permutation: tuple[int, int, int] = field(default=(0, 1, 2))

    def __post_init__(self):
        if self.saturation <= 0 or self.contrast <= 0:
            raise ValueError("saturation and contrast factors must be positive")
        perm = tuple(int(i) for i in self.permutation)
        if sorted(perm) != [0, 1, 2]:
            raise ValueError(f"{self.permutation} is not a permutation of the RGB channels")
        object.__setattr__(self, "permutation", perm)

    @property
    def is_identity(self) -> bool:
        return (
            self.brightness == 0
            and self.saturation == 1
            and self.hue == 0
            and self.contrast == 1
            and self.permutation == (0, 1, 2)
        )

    def to_dict(self) -> dict:
        return {
            "brightness": self.brightness,
            "saturation": self.saturation,
            "hue": self.hue,
            "contrast": self.contrast,
            "permutation": list(self.permutation),
        }


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone conversion; hue in degrees [0, 360). Accepts values outside [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.max(rgb, axis=-1)
    span = v - np.min(rgb, axis=-1)
    s = np.divide(span, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(span > 0, span, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe) % 6.0,
        np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(span > 0, h * 60.0, 0.0)
    return h, s, v


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = []
    for n in (5.0, 3.0, 1.0):
        k = (n + h / 60.0) % 6.0
        out.append(v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0))
    return np.stack(out, axis=-1)


def apply_photometric(image, params: PhotometricParams) -> np.ndarray:
    """Apply brightness, saturation, hue, contrast and channel permutation in that order.

    Intermediate values are unclamped; the result is clamped to [0, 1] once,
    before the channel permutation.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.shape[-1] != 3:
        raise ValueError(f"expected RGB channels last, got shape {x.shape}")
    if params.is_identity:
        return x.copy()
    x = x + params.brightness
    if params.saturation != 1 or params.hue != 0:
        h, s, v = rgb_to_hsv(x)
        s = np.clip(s * params.saturation, 0.0, 1.0)
        h = (h + params.hue) % 360.0
        x = hsv_to_rgb(h, s, v)
    x = np.clip(x * params.contrast, 0.0, 1.0)
    return x[..., list(params.permutation)]


def sample_photometric(rng: np.random.Generator) -> PhotometricParams:
    return PhotometricParams(
        brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
        saturation=float(rng.uniform(*SATURATION_RANGE)),
        hue=float(rng.uniform(*HUE_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        permutation=tuple(rng.permutation(3).tolist()),
    )
