"""Deterministic toy datasets, labeled splits, and binary PPM/PGM image I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# two moons


@dataclass
class MoonsDataset:
    points: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N,) in {1, 2}
    labeled: np.ndarray  # sorted indices of labeled points


def two_moons(n: int, noise_sd: float = 0.08, seed: int = 0, n_labeled: int = 6) -> MoonsDataset:
    """Two interleaved half circles with ``n // 2`` points each plus Gaussian noise.

    Moon 1 is ``(cos t, sin t)`` and moon 2 ``(1 - cos t, 0.5 - sin t)`` for
    ``t`` evenly spaced on [0, pi].  The labeled points are spread evenly in
    ``t``, half per moon.
    """
    if n % 2:
        raise ValueError(f"n must be even, got {n}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if n_labeled % 2 or n_labeled > n:
        raise ValueError(f"n_labeled must be even and at most n, got {n_labeled}")
    m = n // 2
    t = np.linspace(0.0, np.pi, m)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    points = np.concatenate([upper, lower])
    rng = np.random.default_rng(seed)
    if noise_sd > 0:
        points = points + rng.normal(0.0, noise_sd, size=points.shape)
    labels = np.repeat(np.array([1, 2]), m)
    k = n_labeled // 2
    if k:
        within = np.round((np.arange(k) + 0.5) / k * (m - 1)).astype(np.int64)
        labeled = np.concatenate([within, within + m])
    else:
        labeled = np.zeros(0, dtype=np.int64)
    return MoonsDataset(points, labels, np.sort(labeled))


# ---------------------------------------------------------------------------
# synthetic dense scenes

# base colors of foreground classes 2..5; class 1 is background
CLASS_COLORS = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.25, 0.35, 0.85],
        [0.85, 0.80, 0.25],
    ]
)


@dataclass
class SceneDataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    labels: np.ndarray  # (N, H, W) in 1..C
    num_classes: int


def class_patterns(h: int, w: int) -> np.ndarray:
    """Zero-mean 0/1 stripe patterns, one per foreground class: horizontal,
    vertical, checkerboard, diagonal (period 4 px)."""
    ys, xs = np.mgrid[0:h, 0:w]
    pats = [(ys // 2) % 2, (xs // 2) % 2, (xs // 2 + ys // 2) % 2, ((xs + ys) // 2) % 2]
    return np.stack(pats).astype(np.float64) - 0.5


def _scene(rng: np.random.Generator, h: int, w: int, illumination: float, texture: float) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    patterns = class_patterns(h, w) if texture > 0 else None
    c0, c1 = rng.uniform(0.3, 0.7, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xs / w + np.sin(angle) * ys / h) * 0.5 + 0.5
    img = c0 + (c1 - c0) * ramp[..., None]
    lab = np.ones((h, w), dtype=np.int64)
    for _ in range(rng.integers(2, 6)):
        cls = int(rng.integers(2, 2 + len(CLASS_COLORS)))
        color = np.clip(CLASS_COLORS[cls - 2] + rng.uniform(-0.1, 0.1, size=3), 0, 1)
        if rng.random() < 0.5:
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            rad = rng.uniform(0.08, 0.2) * min(h, w)
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 < rad**2
        else:
            x0, y0 = rng.uniform(-0.1, 0.9) * w, rng.uniform(-0.1, 0.9) * h
            sw, sh = rng.uniform(0.12, 0.35, size=2) * (w, h)
            inside = (xs >= x0) & (xs < x0 + sw) & (ys >= y0) & (ys < y0 + sh)
        img[inside] = color
        if patterns is not None:
            img[inside] += texture * patterns[cls - 2][inside][:, None]
        lab[inside] = cls
    if illumination > 0:
        gain = rng.uniform(1 - illumination, 1 + illumination, size=3)
        offset = rng.uniform(-illumination, illumination) * 0.5
        img = img * gain + offset
    return np.clip(img, 0, 1), lab


def synth_scenes(
    n: int, height: int = 64, width: int = 64, seed: int = 0, illumination: float = 0.0, texture: float = 0.0
) -> SceneDataset:
    """Scenes of colored disks and rectangles over a smooth background gradient.

    Each foreground shape belongs to one of four classes with a fixed base
    color jittered by up to 0.1 per channel; later shapes occlude earlier
    ones.  ``illumination`` > 0 adds a per-image channel gain in
    ``1 +- illumination`` and a brightness offset, emulating capture
    conditions that vary between images.  ``texture`` > 0 overlays each
    shape with its class's stripe pattern at that amplitude, giving a cue
    that survives color changes.
    """
    if height < 16 or width < 16:
        raise ValueError("scenes must be at least 16x16")
    rng = np.random.default_rng(seed)
    images = np.empty((n, height, width, 3))
    labels = np.empty((n, height, width), dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = _scene(rng, height, width, illumination, texture)
    return SceneDataset(images, labels, 1 + len(CLASS_COLORS))


def draw_disk(labels: np.ndarray, center: tuple[float, float], radius: float, cls: int) -> np.ndarray:
    """Paint class ``cls`` on pixels strictly closer than ``radius`` to ``center`` (x, y)."""
    h, w = labels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    out = labels.copy()
    out[(xs - center[0]) ** 2 + (ys - center[1]) ** 2 < radius**2] = cls
    return out


def make_split(n: int, proportion: float, seed: int = 0) -> np.ndarray:
    """Sorted indices of ``floor(n * proportion)`` labeled examples, drawn without replacement."""
    if not 0 < proportion <= 1:
        raise ValueError(f"proportion must lie in (0, 1], got {proportion}")
    k = int(np.floor(n * proportion + 1e-9))
    if k < 1:
        raise ValueError(f"split of {n} at proportion {proportion} is empty")
    if k == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


# ---------------------------------------------------------------------------
# netpbm I/O


class ImageFormatError(ValueError):
    pass


def _to_bytes(values: np.ndarray) -> bytes:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8).tobytes()


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(img)


def encode_pgm(labels: np.ndarray) -> bytes:
    """Encode integer labels 0..255 directly as gray levels."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ImageFormatError(f"PGM needs an (H, W) array, got {lab.shape}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ImageFormatError("PGM values must lie in 0..255")
    h, w = lab.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + lab.astype(np.uint8).tobytes()


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    if not buf.startswith(magic):
        raise ImageFormatError(f"expected magic {magic!r}, got {buf[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("malformed header")
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    return w, h, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, start = _parse_header(buf, b"P6")
    payload = buf[start : start + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {3 * w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, start = _parse_header(buf, b"P5")
    payload = buf[start : start + w * h]
    if len(payload) != w * h:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.int64)


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_pgm(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(labels))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_manifest(path, images: list[str], labels: list[str], labeled_indices, seed: int) -> None:
    doc = {
        "images": [str(p) for p in images],
        "labels": [str(p) for p in labels],
        "labeled_indices": [int(i) for i in labeled_indices],
        "seed": int(seed),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for key in ("images", "labels", "labeled_indices", "seed"):
        if key not in doc:
            raise ValueError(f"{path}: manifest lacks {key!r}")
    return doc
