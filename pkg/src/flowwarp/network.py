"""Toy-scale coarse-to-fine flow warping network.

Three feature pyramids encode the appearance input (exemplar layout one-hot
plus clothing image), the motion input (target layout one-hot) and the
previous transformation flow. Bottom-up layers of the appearance and motion
pyramids are layout-constrained deformable convolutions; the flow pyramid
uses plain convolutions.

A forward pass:

1. runs the three bottom-up pathways;
2. correlates the smallest appearance and motion features;
3. regresses 9 control points from the pooled correlation and turns the
   resulting TPS into a dense coarse flow;
4. warps every appearance bottom-up level by the (downsampled) coarse flow
   and rebuilds the appearance top-down pathway from the warped levels;
5. predicts a refinement flow from the concatenated finest top-down
   features of all three pyramids and adds it to the coarse flow.

Flows enter the flow pyramid and leave the fine head in units of the image
width, so a unit change of any parameter moves pixels by a comparable
amount whichever path it sits on.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tps
from .core import ContractError, NumericalError, as_flow, as_image, rng_for
from .graph import Tape, Var
from .losses import FTC_LAGS, LAMBDA_FTC, LAMBDA_TVL1, LossReport, full_objective

NUM_CLASSES = 3
THETA_SCALE = 0.5
HIDDEN = 64
SLOPE = 0.1


@dataclass(frozen=True)
class FpnConfig:
    levels: int = 3
    base_channels: int = 8
    size: int = 64
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.levels < 2 or self.base_channels < 1:
            raise ContractError("need levels >= 2 and base_channels >= 1")
        if self.size % (2 ** (self.levels - 1)):
            raise ContractError(f"size {self.size} not divisible by 2^{self.levels - 1}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def smallest(self) -> int:
        return self.size // 2 ** (self.levels - 1)

    def input_channels(self, pyramid: str) -> int:
        return {"a": self.num_classes + 3, "m": self.num_classes, "f": 2}[pyramid]


@dataclass
class C2fState:
    config: FpnConfig
    params: "OrderedDict[str, np.ndarray]"

    def copy(self) -> "C2fState":
        return C2fState(self.config, OrderedDict((k, v.copy()) for k, v in self.params.items()))

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class C2fOutput:
    flow_coarse: np.ndarray
    flow_fine: np.ndarray
    flow_final: np.ndarray
    warped_coarse: np.ndarray
    warped_fine: np.ndarray
    theta: np.ndarray


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / ((1 + SLOPE ** 2) * fan_in)), size=shape)


def init_state(seed: int, config: FpnConfig | None = None) -> C2fState:
    """Random pyramids; offset predictors, the last regressor layer and the
    last fine-flow layer start at zero, so the initial flow is the identity."""
    cfg = config or FpnConfig()
    rng = rng_for(seed, "init")
    p = OrderedDict()
    c0 = cfg.base_channels
    for name in ("a", "m", "f"):
        cin = cfg.input_channels(name)
        for l in range(cfg.levels):
            cout = cfg.channels(l)
            p[f"fpn_{name}.bu{l}.w"] = _he(rng, (cout, cin, 3, 3), cin * 9)
            p[f"fpn_{name}.bu{l}.b"] = np.zeros(cout)
            if name != "f":
                p[f"fpn_{name}.off{l}.w"] = np.zeros((18, cin, 3, 3))
                p[f"fpn_{name}.off{l}.b"] = np.zeros(18)
            p[f"fpn_{name}.lat{l}.w"] = _he(rng, (c0, cout), cout)
            p[f"fpn_{name}.lat{l}.b"] = np.zeros(c0)
            cin = cout
    n_corr = cfg.smallest ** 2
    p["theta.fc1.w"] = rng.normal(0.0, 1.0 / np.sqrt(n_corr), size=(HIDDEN, n_corr)) * 4.0
    p["theta.fc1.b"] = np.zeros(HIDDEN)
    p["theta.fc2.w"] = np.zeros((2 * tps.K, HIDDEN))
    p["theta.fc2.b"] = np.zeros(2 * tps.K)
    p["fine.conv1.w"] = _he(rng, (2 * c0, 3 * c0, 3, 3), 3 * c0 * 9)
    p["fine.conv1.b"] = np.zeros(2 * c0)
    p["fine.conv2.w"] = np.zeros((2, 2 * c0, 3, 3))
    p["fine.conv2.b"] = np.zeros(2)
    return C2fState(cfg, p)


def perturb_state(state: C2fState, seed: int, scale: float = 1e-2) -> C2fState:
    """Give the zero-initialised layers small random values (used by
    gradient checks so that no sample sits on an integer grid position)."""
    out = state.copy()
    rng = rng_for(seed, "perturb")
    for k, v in out.params.items():
        if not np.any(v):
            out.params[k] = rng.normal(0.0, scale, size=v.shape)
    return out


# --------------------------------------------------------------------------
# forward

def _downsample_layout(layout: np.ndarray, level: int) -> np.ndarray:
    s = 2 ** level
    return layout[::s, ::s]


def _bottom_up(tape: Tape, P, name: str, x: Var, layout, cfg: FpnConfig):
    feats = []
    h = x
    for l in range(cfg.levels):
        if l:
            h = tape.avgpool2(h)
        pre = f"fpn_{name}"
        if layout is not None:
            off = tape.conv3x3(h, P[f"{pre}.off{l}.w"], P[f"{pre}.off{l}.b"])
            h = tape.lc_dconv(h, P[f"{pre}.bu{l}.w"], P[f"{pre}.bu{l}.b"], off,
                              _downsample_layout(layout, l))
        else:
            h = tape.conv3x3(h, P[f"{pre}.bu{l}.w"], P[f"{pre}.bu{l}.b"])
        h = tape.leaky_relu(h, SLOPE)
        feats.append(h)
    return feats


def _top_down(tape: Tape, P, name: str, feats):
    pre = f"fpn_{name}"
    top = None
    for l in reversed(range(len(feats))):
        lat = tape.conv1x1(feats[l], P[f"{pre}.lat{l}.w"], P[f"{pre}.lat{l}.b"])
        top = lat if top is None else tape.add(lat, tape.upsample2(top))
    return top


def _check_inputs(cfg, lo_c, fg_c, lo_t, prev_flow):
    fg = as_image(fg_c, "FG_C")
    lo_c = np.asarray(lo_c)
    lo_t = np.asarray(lo_t)
    fl = as_flow(prev_flow, "prev_flow")
    n = cfg.size
    for name, shape in (("LO_C", lo_c.shape), ("target layout", lo_t.shape),
                        ("FG_C", fg.shape[:2]), ("prev_flow", fl.shape[:2])):
        if tuple(shape[:2]) != (n, n):
            raise ContractError(f"{name} is {shape[:2]}, network expects {n}x{n}")
    if fg.shape[2] != 3:
        raise ContractError("FG_C must have 3 channels")
    return lo_c.astype(np.int64), fg, lo_t.astype(np.int64), fl


def build(tape: Tape, state: C2fState, lo_c, fg_c, lo_t, prev_flow):
    """Run the network on ``tape``; returns ``(params, vars)`` where ``vars``
    holds the graph nodes of every output."""
    cfg = state.config
    lo_c, fg, lo_t, fl = _check_inputs(cfg, lo_c, fg_c, lo_t, prev_flow)
    P = {k: tape.leaf(v) for k, v in state.params.items()}
    eye = np.eye(cfg.num_classes)
    x_a = tape.const(np.concatenate([eye[lo_c], fg], axis=-1))
    x_m = tape.const(eye[lo_t])
    x_f = tape.const(fl / cfg.size)
    src = tape.const(fg)

    bu_a = _bottom_up(tape, P, "a", x_a, lo_c, cfg)
    bu_m = _bottom_up(tape, P, "m", x_m, lo_t, cfg)
    bu_f = _bottom_up(tape, P, "f", x_f, None, cfg)

    corr = tape.correlation(bu_a[-1], bu_m[-1])
    pooled = tape.spatial_mean(corr)
    hidden = tape.tanh(tape.dense(pooled, P["theta.fc1.w"], P["theta.fc1.b"]))
    disp = tape.scale(tape.dense(hidden, P["theta.fc2.w"], P["theta.fc2.b"]), THETA_SCALE)
    theta = tape.add(disp, tape.const(tps.lattice().ravel()))
    coarse = tape.tps_flow(theta, cfg.size, cfg.size)

    warped_a = [tape.warp(f, tape.downsample_flow(coarse, 2 ** l)) for l, f in enumerate(bu_a)]
    td_a = _top_down(tape, P, "a", warped_a)
    td_m = _top_down(tape, P, "m", bu_m)
    td_f = _top_down(tape, P, "f", bu_f)

    h = tape.leaky_relu(tape.conv3x3(tape.concat([td_a, td_m, td_f]),
                                     P["fine.conv1.w"], P["fine.conv1.b"]), SLOPE)
    fine = tape.scale(tape.conv3x3(h, P["fine.conv2.w"], P["fine.conv2.b"]), float(cfg.size))
    final = tape.add(coarse, fine)
    nodes = {
        "correlation": corr, "theta": theta, "flow_coarse": coarse, "flow_fine": fine, "flow_final": final,
        "warped_coarse": tape.warp(src, coarse), "warped_fine": tape.warp(src, final),
    }
    return P, nodes


def _output(nodes) -> C2fOutput:
    return C2fOutput(
        flow_coarse=nodes["flow_coarse"].value,
        flow_fine=nodes["flow_fine"].value,
        flow_final=nodes["flow_final"].value,
        warped_coarse=nodes["warped_coarse"].value,
        warped_fine=nodes["warped_fine"].value,
        theta=nodes["theta"].value.reshape(tps.K, 2),
    )


def forward(state: C2fState, appearance, motion, prev_flow=None) -> C2fOutput:
    """``appearance`` is ``(LO_C, FG_C)``, ``motion`` the target clothing layout."""
    lo_c, fg_c = appearance
    if prev_flow is None:
        prev_flow = np.zeros(np.shape(lo_c) + (2,))
    _, nodes = build(Tape(record=False), state, lo_c, fg_c, motion, prev_flow)
    return _output(nodes)


# --------------------------------------------------------------------------
# objective

@dataclass
class Sample:
    """One training example for frame ``t`` of a sequence."""

    fg_c: np.ndarray
    lo_c: np.ndarray
    lo_t: np.ndarray
    target: np.ndarray
    prev_flow: np.ndarray                            # chi_3, flow predicted for t-1
    history: dict = field(default_factory=dict)     # {lag: predicted flow at t-lag}
    optical: dict = field(default_factory=dict)     # {lag: U from t to t-lag}


def objective(state: C2fState, sample: Sample, lambda1=LAMBDA_FTC, lambda2=LAMBDA_TVL1,
              record=True):
    """Returns ``(report, grads, output)``; grads is None when not recording."""
    tape = Tape(record=record)
    P, nodes = build(tape, state, sample.lo_c, sample.fg_c, sample.lo_t, sample.prev_flow)
    l_fine = tape.rec_loss(nodes["warped_fine"], sample.target)
    l_coarse = tape.rec_loss(nodes["warped_coarse"], sample.target)
    unit = 1.0 / state.config.size
    flow = tape.scale(nodes["flow_final"], unit)
    lags = [l for l in FTC_LAGS if l in sample.history and l in sample.optical]
    if lags:
        ftc_terms = [tape.ftc(flow, tape.const(sample.history[l] * unit), sample.optical[l] * unit)
                     for l in lags]
        l_ftc = tape.weighted_sum(ftc_terms, [1.0] * len(ftc_terms))
    else:
        l_ftc = tape.const(0.0)
    l_tv = tape.tvl1(flow)
    total = tape.weighted_sum([l_fine, l_coarse, l_ftc, l_tv], [1.0, 1.0, lambda1, lambda2])
    report = full_objective(l_fine.value, l_coarse.value, float(l_ftc.value), l_tv.value,
                            lambda1, lambda2)
    grads = None
    if record:
        tape.backward(total)
        grads = OrderedDict(
            (k, v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in P.items()
        )
    return report, grads, _output(nodes)


# --------------------------------------------------------------------------
# optimisation

@dataclass
class Adam:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params, grads):
        self.step_count += 1
        t = self.step_count
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            if self.lr:
                params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class TrainingError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


def train_step(state: C2fState, sample: Sample, optimizer: Adam, lambda1=LAMBDA_FTC,
               lambda2=LAMBDA_TVL1):
    """One optimiser step on the full objective; returns ``(state, report, output)``."""
    try:
        with np.errstate(invalid="ignore"):
            report, grads, out = objective(state, sample, lambda1, lambda2)
    except NumericalError as exc:
        raise TrainingError(f"aborting step: {exc}") from exc
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if not np.isfinite(report.l_full) or bad:
        raise TrainingError(f"non-finite loss or gradient ({report}; bad grads: {bad[:5]})", report)
    new = state.copy()
    optimizer.update(new.params, grads)
    return new, report, out


def make_sample(seq, t: int, cache: dict | None = None) -> Sample:
    """Training sample for frame ``t``; ``cache`` maps frame index to the most
    recent flow predicted for that frame (missing frames get no FTC term and
    a zero previous-flow input)."""
    cache = cache or {}
    h, w = seq.frames.shape[1:3]
    prev = cache.get(t - 1, np.zeros((h, w, 2))) if t > 0 else np.zeros((h, w, 2))
    history = {l: cache[t - l] for l in FTC_LAGS if t - l >= 0 and (t - l) in cache}
    optical = {l: u for l, u in seq.optical_flows(t).items() if l in history}
    return Sample(seq.exemplar, seq.exemplar_layout, seq.layouts[t], seq.frames[t], prev,
                  history, optical)


def training_order(seqs, steps: int):
    """Round-robin over sequences, frames in temporal order within each."""
    n = max(len(s) for s in seqs)
    order = [(i, t) for t in range(n) for i, s in enumerate(seqs) if t < len(s)]
    return [order[k % len(order)] for k in range(steps)]


def refresh_history(state: C2fState, seq, t: int, cache: dict, lags=FTC_LAGS) -> None:
    """Re-predict the flows of frames ``t - l`` with the current parameters.

    Each refreshed frame takes the cached flow of its own predecessor as the
    previous-flow input. Without this the consistency term would compare the
    current prediction with flows produced by older parameters.
    """
    h, w = seq.frames.shape[1:3]
    for l in sorted(lags, reverse=True):
        s = t - l
        if s < 0:
            continue
        prev = cache.get(s - 1, np.zeros((h, w, 2))) if s > 0 else np.zeros((h, w, 2))
        cache[s] = forward(state, (seq.exemplar_layout, seq.exemplar), seq.layouts[s], prev).flow_final


def train(state: C2fState, seqs, steps: int, optimizer: Adam | None = None,
          lambda1=LAMBDA_FTC, lambda2=LAMBDA_TVL1, callback=None, refresh=False):
    """Run ``steps`` training steps; returns ``(state, reports)``.

    By default the consistency history is whatever each frame's flow was the
    last time that frame was trained on. With ``refresh`` the history is
    re-predicted by the current model before every step (see
    :func:`refresh_history`); on the toy data this trains markedly worse.
    ``callback(step, report, state)`` is invoked after every step.
    """
    opt = optimizer or Adam()
    caches = [dict() for _ in seqs]
    reports = []
    for k, (i, t) in enumerate(training_order(seqs, steps)):
        if refresh:
            refresh_history(state, seqs[i], t, caches[i])
        sample = make_sample(seqs[i], t, caches[i])
        state, report, out = train_step(state, sample, opt, lambda1, lambda2)
        caches[i][t] = out.flow_final
        reports.append(report)
        if callback:
            callback(k, report, state)
    return state, reports


def run_sequence(state: C2fState, exemplar, motion_layouts) -> list[C2fOutput]:
    """``exemplar`` is ``(LO_C, FG_C)``; each frame's final flow feeds the next."""
    if len(motion_layouts) < 1:
        raise ContractError("need at least one motion layout")
    prev = None
    outs = []
    for lo_t in motion_layouts:
        out = forward(state, exemplar, lo_t, prev)
        outs.append(out)
        prev = out.flow_final
    return outs


# --------------------------------------------------------------------------
# model files: magic, version, then a table of named float64 tensors

MODEL_MAGIC = b"C2FW"
MODEL_VERSION = 1


def save_state(state: C2fState, path) -> None:
    cfg = asdict(state.config)
    tensors = [("config." + k, np.array([v], dtype=np.float64)) for k, v in cfg.items()]
    tensors += list(state.params.items())
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_VERSION, len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_state(path) -> C2fState:
    from .core import FormatError

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    pos = 12
    cfg, params = {}, OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            if pos + 8 * size > len(raw):
                raise OSError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            if name.startswith("config."):
                cfg[name[7:]] = int(arr[0])
            else:
                params[name] = arr.reshape(dims)
    except struct.error as exc:
        raise OSError(f"{path}: truncated model file") from exc
    return C2fState(FpnConfig(**cfg), params)
