"""Synthetic "clothed sprite" sequences with exact ground-truth flows.

A sprite made of a *tops* part stacked on a *bottoms* part is drawn once in
exemplar coordinates (frame 0) and then animated by a motion script. The
script is stored as backward maps ``B_t`` from frame-t pixel coordinates to
exemplar coordinates, with ``B_0`` the identity. From it:

* the transformation flow of frame t is ``B_t(x) - x``;
* the optical flow from t to t-l is ``B_{t-l}^{-1}(B_t(x)) - x``;
* the frame-t layout is the exemplar layout transported by nearest pixel;
* the frame-t image is the procedural texture evaluated at ``B_t(x)``.

Images are quantised to 8 bits and flows to float32 at generation time so
that exporting and re-reading a dataset is lossless.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import core, tps
from .core import ContractError, rng_for

BACKGROUND, TOPS, BOTTOMS = 0, 1, 2
NUM_CLASSES = 3
LAGS = (1, 3, 9)
MARGIN = 2
MOTIONS = ("static", "translate", "affine", "tps")


class GenerationError(RuntimeError):
    """The motion script pushes the sprite out of the canvas."""


@dataclass
class SpriteScene:
    seed: int
    size: int = 64
    motion: str = "affine"
    # per-frame backward offset, used by the "translate" script
    velocity: tuple = (1.0, 0.0)
    amplitude: float = 1.0


@dataclass
class Sequence:
    scene: SpriteScene
    frames: np.ndarray          # (T, H, W, 3) in [0, 1], multiples of 1/255
    layouts: np.ndarray         # (T, H, W) int
    exemplar_flows: np.ndarray  # (T, H, W, 2) backward flow frame t -> exemplar
    lag_flows: dict = field(default_factory=dict)  # {lag: {t: (H, W, 2)}}

    def __len__(self):
        return len(self.frames)

    @property
    def exemplar(self) -> np.ndarray:
        return self.frames[0]

    @property
    def exemplar_layout(self) -> np.ndarray:
        return self.layouts[0]

    def optical_flows(self, t: int) -> dict:
        """``{lag: U}`` for every lag with history at frame t."""
        return {l: fl[t] for l, fl in self.lag_flows.items() if t in fl}


# --------------------------------------------------------------------------
# sprite appearance

class Sprite:
    def __init__(self, rng: np.random.Generator, size: int):
        s = size / 64.0
        self.cx = size / 2 + rng.uniform(-3, 3) * s
        top_h = rng.uniform(12, 16) * s
        bot_h = rng.uniform(12, 16) * s
        self.top = (rng.uniform(9, 12) * s, top_h / 2)          # half extents
        self.bot = (rng.uniform(6, 9) * s, bot_h / 2)
        y0 = size / 2 - (top_h + bot_h) / 2 + rng.uniform(-2, 2) * s
        self.top_cy = y0 + top_h / 2
        self.bot_cy = y0 + top_h + bot_h / 2 - 1.0 * s
        self.top_ellipse = bool(rng.integers(2))
        self.textures = {c: _Texture(rng, size) for c in (TOPS, BOTTOMS)}

    def classify(self, pts: np.ndarray) -> np.ndarray:
        x, y = pts[..., 0], pts[..., 1]
        tx = (x - self.cx) / self.top[0]
        ty = (y - self.top_cy) / self.top[1]
        in_top = (tx ** 2 + ty ** 2 <= 1) if self.top_ellipse else (np.abs(tx) <= 1) & (np.abs(ty) <= 1)
        in_bot = (np.abs(x - self.cx) <= self.bot[0]) & (np.abs(y - self.bot_cy) <= self.bot[1])
        return np.where(in_top, TOPS, np.where(in_bot, BOTTOMS, BACKGROUND))

    def color(self, pts: np.ndarray, classes: np.ndarray) -> np.ndarray:
        out = np.zeros(pts.shape[:-1] + (3,))
        for c, tex in self.textures.items():
            m = classes == c
            out[m] = tex(pts[m])
        return out


class _Texture:
    """Smooth value noise plus oriented stripes around a base colour."""

    def __init__(self, rng, size, cell=8.0):
        self.base = rng.uniform(0.3, 0.7, size=3)
        self.cell = cell * size / 64.0
        n = int(np.ceil(size / self.cell)) + 4
        self.noise = rng.uniform(-1, 1, size=(n, n, 3))
        ang = rng.uniform(0, np.pi)
        self.k = np.array([np.cos(ang), np.sin(ang)]) * 2 * np.pi / rng.uniform(10, 16) / (size / 64.0)
        self.phase = rng.uniform(0, 2 * np.pi)
        self.stripe = rng.uniform(0.1, 0.18, size=3)

    def _value_noise(self, p):
        g = p / self.cell + 2.0
        g = np.clip(g, 0, self.noise.shape[0] - 1.001)
        i = np.floor(g).astype(int)
        f = g - i
        f = f * f * (3 - 2 * f)
        fx, fy = f[:, 0:1], f[:, 1:2]
        n = self.noise
        ix, iy = i[:, 0], i[:, 1]
        a = n[iy, ix] * (1 - fx) + n[iy, ix + 1] * fx
        b = n[iy + 1, ix] * (1 - fx) + n[iy + 1, ix + 1] * fx
        return a * (1 - fy) + b * fy

    def __call__(self, p):
        stripes = np.sin(p @ self.k + self.phase)[:, None] * self.stripe
        return np.clip(self.base + 0.12 * self._value_noise(p) + stripes, 0.0, 1.0)


# --------------------------------------------------------------------------
# motion scripts (backward maps in pixel coordinates)

class _Motion:
    def backward(self, t: int, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, t: int, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _Static(_Motion):
    def backward(self, t, pts):
        return pts.copy()

    inverse = backward


class _Translate(_Motion):
    def __init__(self, velocity):
        self.v = np.asarray(velocity, dtype=np.float64)

    def backward(self, t, pts):
        return pts + t * self.v

    def inverse(self, t, pts):
        return pts - t * self.v


class _Affine(_Motion):
    def __init__(self, rng, size, amp):
        self.c = np.array([size / 2.0, size / 2.0])
        self.rot = rng.uniform(0.05, 0.12) * amp * rng.choice([-1, 1])
        self.scale = rng.uniform(0.03, 0.07) * amp
        self.shift = rng.uniform(1.5, 3.0, size=2) * amp * (size / 64.0) * rng.choice([-1, 1], size=2)
        self.w = rng.uniform(0.15, 0.3, size=4)

    def _params(self, t):
        a = self.rot * np.sin(self.w[0] * t)
        s = 1.0 + self.scale * np.sin(self.w[1] * t)
        A = s * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        b = self.shift * np.array([np.sin(self.w[2] * t), 1 - np.cos(self.w[3] * t)])
        return A, b

    def backward(self, t, pts):
        A, b = self._params(t)
        return (pts - self.c) @ A.T + self.c + b

    def inverse(self, t, pts):
        A, b = self._params(t)
        return (pts - self.c - b) @ np.linalg.inv(A).T + self.c


class _Tps(_Motion):
    def __init__(self, rng, size, amp):
        self.size = size
        self.grid = tps.lattice()
        self.disp = rng.uniform(-1, 1, size=(tps.K, 2)) * 0.09 * amp
        self.w = rng.uniform(0.15, 0.3, size=tps.K)
        self.shift = rng.uniform(-0.06, 0.06, size=2) * amp
        self._cache = {}

    def _transform(self, t):
        if t not in self._cache:
            d = self.disp * np.sin(self.w * t)[:, None] + self.shift * np.sin(0.2 * t)
            self._cache[t] = tps.fit_tps(self.grid, self.grid + d)
        return self._cache[t]

    def _to_norm(self, pts):
        return pts * (2.0 / (self.size - 1)) - 1.0

    def _to_pix(self, pts):
        return (pts + 1.0) * ((self.size - 1) / 2.0)

    def backward(self, t, pts):
        return self._to_pix(self._transform(t).map(self._to_norm(pts)))

    def inverse(self, t, pts, iters=30):
        tr = self._transform(t)
        z = self._to_norm(pts).reshape(-1, 2)
        y = z - (tr.map(z) - z)
        for _ in range(iters):
            r = tr.map(y) - z
            if np.max(np.abs(r)) < 1e-14:
                break
            y = y - np.linalg.solve(tr.jacobian(y), r[..., None])[..., 0]
        return self._to_pix(y.reshape(pts.shape))


def _motion(scene: SpriteScene, rng) -> _Motion:
    if scene.motion == "static":
        return _Static()
    if scene.motion == "translate":
        return _Translate(scene.velocity)
    if scene.motion == "affine":
        return _Affine(rng, scene.size, scene.amplitude)
    if scene.motion == "tps":
        return _Tps(rng, scene.size, scene.amplitude)
    raise ContractError(f"unknown motion {scene.motion!r}; expected one of {MOTIONS}")


# --------------------------------------------------------------------------

def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _transport_layout(layout0: np.ndarray, src: np.ndarray) -> np.ndarray:
    h, w = layout0.shape
    rx = np.floor(src[..., 0] + 0.5).astype(int)
    ry = np.floor(src[..., 1] + 0.5).astype(int)
    inside = (rx >= 0) & (rx < w) & (ry >= 0) & (ry < h)
    return np.where(inside, layout0[np.where(inside, ry, 0), np.where(inside, rx, 0)], BACKGROUND)


def _check_margin(layout: np.ndarray, t: int):
    inner = np.zeros_like(layout, dtype=bool)
    inner[MARGIN:-MARGIN, MARGIN:-MARGIN] = True
    if np.any((layout != BACKGROUND) & ~inner):
        raise GenerationError(f"sprite comes within {MARGIN}px of the canvas edge at frame {t}")


def generate(scene: SpriteScene, frames: int) -> Sequence:
    if frames < 1:
        raise ContractError("need at least one frame")
    n = scene.size
    sprite = Sprite(rng_for(scene.seed, "sprite"), n)
    motion = _motion(scene, rng_for(scene.seed, "motion"))
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    grid = np.stack([xs, ys], axis=-1)

    layout0 = sprite.classify(grid)
    imgs, lays, flows, srcs = [], [], [], []
    for t in range(frames):
        src = motion.backward(t, grid)
        lay = _transport_layout(layout0, src)
        _check_margin(lay, t)
        img = sprite.color(src, lay)
        imgs.append(core.quantize(img).astype(np.float64) / 255.0)
        lays.append(lay)
        flows.append(_f32(src - grid))
        srcs.append(src)

    lag_flows = {}
    for l in LAGS:
        lag_flows[l] = {t: _f32(motion.inverse(t - l, srcs[t]) - grid) for t in range(l, frames)}
    return Sequence(scene, np.stack(imgs), np.stack(lays), np.stack(flows), lag_flows)


def interior_mask(layout: np.ndarray, erode: int = 2) -> np.ndarray:
    """Sprite pixels at least ``erode`` pixels from any class boundary."""
    m = np.ones(layout.shape, dtype=bool)
    pad = np.pad(layout, erode, mode="edge")
    h, w = layout.shape
    for dy in range(-erode, erode + 1):
        for dx in range(-erode, erode + 1):
            m &= pad[erode + dy:erode + dy + h, erode + dx:erode + dx + w] == layout
    return m & (layout != BACKGROUND)


# --------------------------------------------------------------------------
# export / import

def _manifest(seq: Sequence) -> dict:
    T = len(seq)
    return {
        "scene": asdict(seq.scene),
        "frames": T,
        "size": [int(seq.frames.shape[1]), int(seq.frames.shape[2])],
        "num_classes": NUM_CLASSES,
        "lags": list(LAGS),
        "files": {
            "frames": [f"frames/{t:04d}.png" for t in range(T)],
            "layouts": [f"layouts/{t:04d}.pgm" for t in range(T)],
            "exemplar_flows": [f"flows/exemplar_{t:04d}.flo" for t in range(T)],
            "lag_flows": {
                str(l): [f"flows/lag{l}_{t:04d}.flo" for t in sorted(seq.lag_flows[l])]
                for l in LAGS
            },
        },
    }


def export(seq: Sequence, directory) -> Path:
    """Write one sequence; returns the manifest path."""
    d = Path(directory)
    for sub in ("frames", "layouts", "flows"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    man = _manifest(seq)
    files = man["files"]
    for t in range(len(seq)):
        core.write_image(seq.frames[t], d / files["frames"][t])
        core.write_layout(seq.layouts[t], d / files["layouts"][t])
        core.write_flo(seq.exemplar_flows[t], d / files["exemplar_flows"][t])
    for l in LAGS:
        for t in sorted(seq.lag_flows[l]):
            core.write_flo(seq.lag_flows[l][t], d / f"flows/lag{l}_{t:04d}.flo")
    path = d / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def load(directory) -> Sequence:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    files = man["files"]
    frames = np.stack([np.asarray(core.read_image(d / f)) for f in files["frames"]])
    layouts = np.stack([np.asarray(core.read_layout(d / f, man["num_classes"])) for f in files["layouts"]])
    flows = np.stack([np.asarray(core.read_flo(d / f)) for f in files["exemplar_flows"]])
    lag_flows = {}
    for l, names in files["lag_flows"].items():
        l = int(l)
        lag_flows[l] = {int(name[-8:-4]): np.asarray(core.read_flo(d / name)) for name in names}
    scene = SpriteScene(**{**man["scene"], "velocity": tuple(man["scene"]["velocity"])})
    return Sequence(scene, frames, layouts, flows, lag_flows)


def generate_dataset(seed: int, sequences: int, frames: int, motion: str = "affine",
                     size: int = 64, amplitude: float = 1.0) -> list[Sequence]:
    """Several sequences whose scene seeds derive from ``seed``.

    Mixed motion ("mixed") alternates affine and TPS scripts.
    """
    out = []
    for i in range(sequences):
        m = motion if motion != "mixed" else ("affine", "tps")[i % 2]
        scene_seed = int(rng_for(seed, f"sequence/{i}").integers(2 ** 31))
        out.append(generate(SpriteScene(scene_seed, size, m, amplitude=amplitude), frames))
    return out


def export_dataset(seqs: list[Sequence], directory) -> Path:
    """One sequence is written at the top level, several go to ``seq_XXX/``."""
    d = Path(directory)
    if len(seqs) == 1:
        return export(seqs[0], d)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(seqs):
        name = f"seq_{i:03d}"
        export(s, d / name)
        names.append(name)
    path = d / "manifest.json"
    path.write_text(json.dumps({"sequences": names}, indent=2) + "\n")
    return path


def load_dataset(directory) -> list[Sequence]:
    d = Path(directory)
    man_path = d / "manifest.json"
    if not man_path.exists():
        raise ContractError(f"{d} has no manifest.json")
    man = json.loads(man_path.read_text())
    if "sequences" in man:
        return [load(d / name) for name in man["sequences"]]
    return [load(d)]
