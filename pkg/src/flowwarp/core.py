"""Dense-grid value types, error classes, seeding and file I/O.

Arrays are channel-last everywhere: images and feature volumes are
``(H, W, C)``, flows are ``(H, W, 2)`` holding ``(dx, dy)`` in pixels and
layouts are ``(H, W)`` integer class maps. x grows to the right, y grows
downward and pixel centres sit on integer coordinates.

Flows are *backward*: the vector stored at ``(x, y)`` says where to read
from, i.e. the source is sampled at ``(x + dx, y + dy)``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"


class ContractError(ValueError):
    """Inputs violate an operation's shape or domain precondition."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk format."""


class NumericalError(FloatingPointError):
    """A computation produced or received a non-finite value."""


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer derived from one root seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """H x W x C floating point grid (image in [0,1] or a feature volume)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"ImageTensor needs (H, W, C), got shape {self.data.shape}")
        object.__setattr__(self, "data", _frozen(self.data))

    @classmethod
    def from_buffer(cls, height: int, width: int, channels: int, buf) -> "ImageTensor":
        buf = np.asarray(buf, dtype=np.float64).ravel()
        if buf.size != height * width * channels:
            raise ContractError(
                f"buffer holds {buf.size} values, expected {height}*{width}*{channels}"
            )
        return cls(buf.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def is_image(self) -> bool:
        return bool(np.all((self.data >= 0.0) & (self.data <= 1.0)))

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense backward flow, ``vectors[y, x] = (dx, dy)`` in pixel units."""

    vectors: np.ndarray

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 3 or v.shape[2] != 2:
            raise ContractError(f"FlowField needs (H, W, 2), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericalError("FlowField holds non-finite vectors")
        object.__setattr__(self, "vectors", _frozen(v))

    @classmethod
    def from_buffer(cls, height: int, width: int, buf) -> "FlowField":
        buf = np.asarray(buf, dtype=np.float64).ravel()
        if buf.size != height * width * 2:
            raise ContractError(f"buffer holds {buf.size} values, expected {height}*{width}*2")
        return cls(buf.reshape(height, width, 2))

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.vectors if dtype is None else self.vectors.astype(dtype)


@dataclass(frozen=True, eq=False)
class SemanticLayout:
    """Per-pixel class IDs; class 0 is background."""

    classes: np.ndarray
    num_classes: int = 3

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.ndim != 2:
            raise ContractError(f"SemanticLayout needs (H, W), got shape {c.shape}")
        if c.size and (c.min() < 0 or c.max() >= self.num_classes):
            raise ContractError(f"class IDs must lie in [0, {self.num_classes})")
        c = np.array(c, dtype=np.int64, copy=True)
        c.setflags(write=False)
        object.__setattr__(self, "classes", c)

    @classmethod
    def from_buffer(cls, height: int, width: int, buf, num_classes: int = 3) -> "SemanticLayout":
        buf = np.asarray(buf).ravel()
        if buf.size != height * width:
            raise ContractError(f"buffer holds {buf.size} values, expected {height}*{width}")
        return cls(buf.reshape(height, width), num_classes)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.classes]

    def __array__(self, dtype=None, copy=None):
        return self.classes if dtype is None else self.classes.astype(dtype)


def as_image(x, name="image") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ContractError(f"{name} must be (H, W, C), got shape {a.shape}")
    return a


def as_flow(x, name="flow") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 2:
        raise ContractError(f"{name} must be (H, W, 2), got shape {a.shape}")
    return a


def same_hw(*arrays, names=None):
    shapes = [np.shape(a)[:2] for a in arrays]
    if len(set(shapes)) != 1:
        label = ", ".join(names) if names else "inputs"
        raise ContractError(f"spatial size mismatch between {label}: {shapes}")


# --------------------------------------------------------------------------
# Middlebury .flo

def write_flo(flow, path) -> None:
    v = as_flow(flow)
    if not np.all(np.isfinite(v)):
        raise NumericalError("refusing to write non-finite flow")
    h, w = v.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_TAG)
        f.write(struct.pack("<ii", w, h))
        f.write(v.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise OSError(f"{path}: truncated .flo header")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative dimensions {w}x{h}")
    n = w * h * 2 * 4
    if len(raw) - 12 < n:
        raise OSError(f"{path}: truncated payload ({len(raw) - 12} of {n} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=w * h * 2, offset=12)
    return FlowField(data.astype(np.float64).reshape(h, w, 2))


# --------------------------------------------------------------------------
# 8-bit images and layouts

def quantize(img) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-up."""
    a = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _open_8bit(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "P"):
            raise FormatError(f"{path}: unsupported image mode {im.mode!r} (8-bit L/RGB only)")
        if im.mode == "P":
            im = im.convert("RGB")
        return np.asarray(im)


def write_image(img, path) -> None:
    a = as_image(img)
    if a.shape[2] not in (1, 3):
        raise ContractError(f"can only write 1 or 3 channel images, got {a.shape[2]}")
    q = quantize(a)
    Image.fromarray(q[:, :, 0] if q.shape[2] == 1 else q).save(path)


def read_image(path) -> ImageTensor:
    q = _open_8bit(path)
    if q.ndim == 2:
        q = q[:, :, None]
    return ImageTensor(q.astype(np.float64) / 255.0)


def write_layout(layout, path) -> None:
    c = np.asarray(layout)
    if c.ndim != 2 or c.min(initial=0) < 0 or c.max(initial=0) > 255:
        raise ContractError("layout must be (H, W) with class IDs in [0, 255]")
    Image.fromarray(c.astype(np.uint8), mode="L").save(path)


def read_layout(path, num_classes: int = 3) -> SemanticLayout:
    q = _open_8bit(path)
    if q.ndim != 2:
        raise FormatError(f"{path}: layout must be single-channel")
    return SemanticLayout(q.astype(np.int64), num_classes)
