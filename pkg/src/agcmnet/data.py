"""Synthetic multi-object scenes and PNM image I/O."""

from __future__ import annotations

import colorsys
import csv
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import zoom

from .errors import ConfigError, DataError, PnmError

SHAPES = ("disk", "rectangle", "triangle")


@dataclass(frozen=True)
class ObjectSpec:
    """Explicit object placement; ``size`` is the radius / half-extent in pixels."""

    kind: str
    center: tuple[float, float]
    size: float
    color: tuple[float, float, float] = (1.0, 0.1, 0.1)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    n_objects: Optional[int] = None  # None: drawn uniformly from 1..max_objects
    max_objects: int = 3
    shapes: tuple[str, ...] = SHAPES
    min_size: float = 0.08  # fraction of the shorter side
    max_size: float = 0.22
    fg_range: tuple[float, float] = (0.02, 0.6)
    max_retries: int = 50
    objects: Optional[tuple[ObjectSpec, ...]] = None

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"scene must be at least 32x32, got {self.height}x{self.width}")
        if self.n_objects is not None and not 1 <= self.n_objects <= 4:
            raise ConfigError(f"object count must be in [1, 4], got {self.n_objects}")
        if not 1 <= self.max_objects <= 4:
            raise ConfigError(f"max_objects must be in [1, 4], got {self.max_objects}")
        bad = [s for s in self.shapes if s not in SHAPES]
        if bad or not self.shapes:
            raise ConfigError(f"unknown shapes {bad}; choose from {SHAPES}")
        if not 0 < self.min_size <= self.max_size < 0.5:
            raise ConfigError("object sizes must satisfy 0 < min_size <= max_size < 0.5")


@dataclass
class SyntheticScene:
    image: np.ndarray  # 3×H×W in [0, 1]
    mask: np.ndarray   # 1×H×W in {0, 1}
    objects: list[ObjectSpec] = field(default_factory=list)
    seed: int = 0

    @property
    def n_objects(self) -> int:
        return len(self.objects)


def rasterize(obj: ObjectSpec, height: int, width: int) -> np.ndarray:
    """Boolean H×W mask of pixels whose centres fall inside ``obj``."""
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    cy, cx = obj.center
    r = obj.size
    if obj.kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if obj.kind == "rectangle":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.7 * r)
    if obj.kind == "triangle":
        verts = [(cy - r, cx), (cy + r, cx - r), (cy + r, cx + r)]
        signs = []
        for (y0, x0), (y1, x1) in zip(verts, verts[1:] + verts[:1]):
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
        s = np.stack(signs)
        return (s >= 0).all(axis=0) | (s <= 0).all(axis=0)
    raise ConfigError(f"unknown object kind {obj.kind!r}")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.6, size=(3, 4, 4))
    base = zoom(coarse, (1, h / 4, w / 4), order=1, mode="nearest")[:, :h, :w]
    # desaturate so salient objects stand out in colour as well as luminance
    grey = base.mean(axis=0, keepdims=True)
    base = 0.7 * grey + 0.3 * base
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.15, 0.4)
    yy, xx = np.mgrid[0:h, 0:w]
    stripes = 0.04 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    noise = rng.normal(0.0, 0.01, size=(3, h, w))
    return np.clip(base + stripes[None] + noise, 0.0, 1.0)


def _random_object(rng: np.random.Generator, spec: SceneSpec) -> ObjectSpec:
    side = min(spec.height, spec.width)
    size = rng.uniform(spec.min_size, spec.max_size) * side
    cy = rng.uniform(size, spec.height - size)
    cx = rng.uniform(size, spec.width - size)
    hue = rng.uniform(0, 1)
    color = colorsys.hsv_to_rgb(hue, rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0))
    kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
    return ObjectSpec(kind, (float(cy), float(cx)), float(size), tuple(float(c) for c in color))


def gen_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Render a deterministic scene of salient shapes over a textured background."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    image = _background(rng, h, w)
    if spec.objects is not None:
        objects = list(spec.objects)
        mask = np.zeros((h, w), dtype=bool)
        for obj in objects:
            mask |= rasterize(obj, h, w)
    else:
        n = spec.n_objects or int(rng.integers(1, spec.max_objects + 1))
        lo, hi = spec.fg_range
        for _ in range(spec.max_retries):
            objects = [_random_object(rng, spec) for _ in range(n)]
            mask = np.zeros((h, w), dtype=bool)
            for obj in objects:
                mask |= rasterize(obj, h, w)
            if lo <= mask.mean() <= hi:
                break
        else:
            raise ConfigError(f"could not place {n} objects with foreground in {spec.fg_range} "
                              f"after {spec.max_retries} attempts")
    for obj in objects:
        region = rasterize(obj, h, w)
        for ch in range(3):
            image[ch][region] = obj.color[ch]
    return SyntheticScene(image, mask[None].astype(np.float64), objects, seed)


def scene_seeds(n: int, seed: int) -> list[int]:
    if n <= 0:
        return []
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def gen_dataset(n: int, seed: int, spec: SceneSpec = SceneSpec()) -> list[SyntheticScene]:
    return [gen_scene(s, spec) for s in scene_seeds(n, seed)]


# ---------------------------------------------------------------- PNM


_WS = b" \t\n\r\v\f"


def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, array) -> None:
    """Write a C×H×W array in [0, 1]: C=1 as binary PGM (P5), C=3 as PPM (P6)."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"PNM needs a 1×H×W or 3×H×W array, got {arr.shape}")
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    body = _to_bytes(arr).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h) + body)


def parse_pnm(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise PnmError("expected P5 or P6 magic number", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        start = pos
        while pos < len(buf) and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos == start and fields:
            raise PnmError("expected whitespace between header fields", pos)
        if pos == start and not fields:
            raise PnmError("expected whitespace after magic number", pos)
        m = re.match(rb"[0-9]+", buf[pos:pos + 20])
        if not m:
            raise PnmError("expected a decimal header field", pos)
        fields.append((int(m.group()), pos))
        pos += len(m.group())
    if pos >= len(buf) or buf[pos] not in _WS:
        raise PnmError("header must end with a single whitespace byte", pos)
    pos += 1
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width <= 0:
        raise PnmError("width must be positive", wpos)
    if height <= 0:
        raise PnmError("height must be positive", hpos)
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval} (only 255)", mpos)
    need = width * height * channels
    if len(buf) - pos < need:
        raise PnmError(f"truncated body: need {need} bytes, have {len(buf) - pos}", len(buf))
    body = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return body.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into a C×H×W float array in [0, 1]."""
    with open(path, "rb") as fh:
        return parse_pnm(fh.read())


# ---------------------------------------------------------------- directories


_IMG_RE = re.compile(r"img_(.+)\.ppm$")
_MSK_RE = re.compile(r"msk_(.+)\.pgm$")


def write_scenes(out_dir, scenes: Sequence[SyntheticScene]) -> Path:
    """Write ``img_%04d.ppm`` / ``msk_%04d.pgm`` pairs plus ``manifest.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "seed", "objects"])
        for i, scene in enumerate(scenes):
            ident = f"{i:04d}"
            write_pnm(out / f"img_{ident}.ppm", scene.image)
            write_pnm(out / f"msk_{ident}.pgm", scene.mask)
            writer.writerow([ident, scene.seed, scene.n_objects])
    return out / "manifest.csv"


@dataclass
class Sample:
    ident: str
    image: np.ndarray
    mask: np.ndarray


def load_dir(data_dir) -> list[Sample]:
    """Load matched image/mask pairs; masks are binarised at 0.5."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    images, masks = {}, {}
    for name in os.listdir(root):
        if m := _IMG_RE.match(name):
            images[m.group(1)] = root / name
        elif m := _MSK_RE.match(name):
            masks[m.group(1)] = root / name
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise DataError(f"unmatched image/mask ids in {root}: {', '.join(unmatched)}")
    samples = []
    for ident in sorted(images):
        img = read_pnm(images[ident])
        msk = read_pnm(masks[ident])
        if img.shape[0] != 3 or msk.shape[0] != 1 or img.shape[1:] != msk.shape[1:]:
            raise DataError(f"{ident}: image {img.shape} and mask {msk.shape} do not pair up")
        samples.append(Sample(ident, img, (msk >= 0.5).astype(np.float64)))
    return samples
