"""Score models: the analytic kernel score and a small trainable conv net.

A score model maps (x_t, y, t) to an estimate of the gradient of the log
perturbation density at x_t.  Two implementations:

``OracleScore`` knows the clean target x_0 and returns the exact kernel score
-(x_t - mean) / std**2, available in two conventions that differ by a factor
of 2 (the complex-derivative form vs the stacked real/imaginary form).  It is
test scaffolding: correct by construction, usable only when x_0 is known.

``NeuralScorer`` is a time-conditioned convolutional network over the real
and imaginary planes of x_t and y plus sinusoidal time-embedding maps, sized
for CPU experiments.  The final layer starts at zero so an untrained model
is the zero score.  Internally the net predicts std(t) * score (a target
with unit scale); ``evaluate`` divides by std(t).  Forward/backward are
written directly in numpy against a flat float64 parameter vector, and
``gradient_check`` verifies the backward pass against central finite
differences.

Gradients use the stacked-real convention throughout: a complex upstream
gradient c means dL/dRe + i*dL/dIm of a real-valued loss.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .sde import SdeParams, kernel_mean, kernel_std
from .spectral import ComplexSpectrogram

SCORE_CONVENTIONS = ("conjugate", "real-view")
MIN_SCORE_STD = 1e-9  # below this the 1/std**2 kernel score is numerically meaningless

CHECKPOINT_MAGIC = b"SCSE"
CHECKPOINT_VERSION = 1


class ScoreModel(Protocol):
    def evaluate(
        self, x_t: ComplexSpectrogram, y: ComplexSpectrogram, t: float
    ) -> ComplexSpectrogram: ...


@dataclass(frozen=True)
class OracleScore:
    """Exact kernel score for a known clean target; verification scaffolding."""

    x0: ComplexSpectrogram
    params: SdeParams
    convention: str = "conjugate"

    def __post_init__(self):
        if self.convention not in SCORE_CONVENTIONS:
            raise ValueError(
                f"unknown score convention {self.convention!r}, expected one of {SCORE_CONVENTIONS}"
            )

    def evaluate(
        self, x_t: ComplexSpectrogram, y: ComplexSpectrogram, t: float
    ) -> ComplexSpectrogram:
        return oracle_score(x_t, y, t, self)


def oracle_score(
    x_t: ComplexSpectrogram, y: ComplexSpectrogram, t: float, oracle: OracleScore
) -> ComplexSpectrogram:
    """Kernel score -(x_t - mean)/std**2; doubled under the real-view convention."""
    p = oracle.params
    if not (p.t_eps - 1e-12 <= t <= p.t_max + 1e-12):
        raise ValueError(f"oracle_score requires t in [{p.t_eps}, {p.t_max}], got {t}")
    std = kernel_std(t, p)
    if std < MIN_SCORE_STD:
        raise ValueError(f"noise scale {std} at t={t} too small for a kernel score")
    if x_t.bins.shape != oracle.x0.bins.shape:
        raise ValueError(
            f"shape mismatch: x_t {x_t.bins.shape} vs clean target {oracle.x0.bins.shape}"
        )
    mu = kernel_mean(oracle.x0, y, t, p)
    s = -(x_t.bins - mu.bins) / std**2
    if oracle.convention == "real-view":
        s = 2.0 * s
    return ComplexSpectrogram(s, x_t.n_samples)


def time_embedding(t: float, n_channels: int) -> np.ndarray:
    """Sinusoidal features (sin, cos) at octave-spaced rates over the unit span."""
    feats = np.empty(n_channels)
    for k in range(n_channels // 2):
        w = 2.0 * math.pi * 2.0**k
        feats[2 * k] = math.sin(w * t)
        feats[2 * k + 1] = math.cos(w * t)
    return feats


@dataclass(frozen=True)
class ScorerConfig:
    """Conv-net shape: 3x3 kernels throughout, ``hidden_layers + 2`` layers total."""

    width: int = 16
    hidden_layers: int = 3
    time_channels: int = 8

    def __post_init__(self):
        if self.width < 2:
            raise ValueError(f"width must be >= 2, got {self.width}")
        if not (1 <= self.hidden_layers <= 3):
            raise ValueError(f"hidden_layers must be in [1, 3], got {self.hidden_layers}")
        if self.time_channels < 2 or self.time_channels % 2 != 0:
            raise ValueError(f"time_channels must be even and >= 2, got {self.time_channels}")

    @property
    def in_channels(self) -> int:
        # real/imag planes of x_t and y, then the time-embedding maps
        return 4 + self.time_channels

    @property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        dims = [(self.in_channels, self.width)]
        dims += [(self.width, self.width)] * self.hidden_layers
        dims.append((self.width, 2))
        return tuple(dims)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, F, K) -> (F*K, C*9) patch matrix for a 3x3 same-padded convolution."""
    c, f, k = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, F, K, 3, 3)
    return win.transpose(1, 2, 0, 3, 4).reshape(f * k, c * 9)


def _col2im(d_cols: np.ndarray, c: int, f: int, k: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patch gradients back onto the plane."""
    d = d_cols.reshape(f, k, c, 3, 3)
    out = np.zeros((c, f + 2, k + 2))
    for i in range(3):
        for j in range(3):
            out[:, i : i + f, j : j + k] += d[:, :, :, i, j].transpose(2, 0, 1)
    return out[:, 1 : f + 1, 1 : k + 1]


@dataclass
class _Tape:
    inputs: list  # per-layer input planes (C, F, K)
    acts: list  # post-tanh activations per hidden layer, None for the final layer
    sigma: float  # output scale divisor applied after the net (1.0 in raw mode)
    shape: tuple


class NeuralScorer:
    """Trainable conv-net score model over a flat float64 parameter vector.

    Hidden layers use tanh and fan-in-scaled uniform init; the final linear
    layer starts at zero.  ``evaluate`` is pure and safe to call concurrently;
    ``neural_forward``/``neural_backward`` cache a tape on the model and are
    single-writer, like the parameter updates themselves.
    """

    def __init__(
        self,
        config: ScorerConfig = ScorerConfig(),
        sde: SdeParams = SdeParams(),
        rng: np.random.Generator | None = None,
    ):
        self.config = config
        self.sde = sde
        self.layer_param_slices: list[tuple[slice, slice]] = []
        total = 0
        for c_in, c_out in config.layer_dims:
            w_size = c_out * c_in * 9
            self.layer_param_slices.append(
                (slice(total, total + w_size), slice(total + w_size, total + w_size + c_out))
            )
            total += w_size + c_out
        self.theta = np.zeros(total)
        if rng is not None:
            dims = config.layer_dims
            for li, ((c_in, c_out), (wsl, _)) in enumerate(zip(dims, self.layer_param_slices)):
                if li == len(dims) - 1:
                    continue  # final layer stays zero so training starts at score = 0
                limit = 1.0 / math.sqrt(c_in * 9)
                self.theta[wsl] = rng.uniform(-limit, limit, size=c_out * c_in * 9)
        self._tape: _Tape | None = None

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]

    def _views(self):
        for (c_in, c_out), (wsl, bsl) in zip(self.config.layer_dims, self.layer_param_slices):
            yield self.theta[wsl].reshape(c_out, c_in * 9), self.theta[bsl]

    def _assemble(self, x_t_bins: np.ndarray, y_bins: np.ndarray, t: float) -> np.ndarray:
        if x_t_bins.shape != y_bins.shape:
            raise ValueError(f"shape mismatch: {x_t_bins.shape} vs {y_bins.shape}")
        f, k = x_t_bins.shape
        emb = time_embedding(t, self.config.time_channels)
        planes = np.empty((self.config.in_channels, f, k))
        planes[0] = x_t_bins.real
        planes[1] = x_t_bins.imag
        planes[2] = y_bins.real
        planes[3] = y_bins.imag
        planes[4:] = emb[:, None, None]
        return planes

    def _forward_core(self, x_t_bins, y_bins, t: float) -> tuple[np.ndarray, _Tape]:
        x = self._assemble(x_t_bins, y_bins, t)
        f, k = x_t_bins.shape
        n_layers = len(self.config.layer_dims)
        inputs, acts = [], []
        for li, (w, b) in enumerate(self._views()):
            inputs.append(x)
            out = (_im2col(x) @ w.T + b).T.reshape(-1, f, k)
            if li < n_layers - 1:
                x = np.tanh(out)
                acts.append(x)
            else:
                x = out
                acts.append(None)
        p = x[0] + 1j * x[1]
        return p, _Tape(inputs=inputs, acts=acts, sigma=1.0, shape=(f, k))

    def _checked_std(self, t: float) -> float:
        p = self.sde
        if not (p.t_eps - 1e-12 <= t <= p.t_max + 1e-12):
            raise ValueError(f"score evaluation requires t in [{p.t_eps}, {p.t_max}], got {t}")
        std = kernel_std(t, p)
        if std < MIN_SCORE_STD:
            raise ValueError(f"noise scale {std} at t={t} too small for a score")
        return std

    def evaluate(
        self, x_t: ComplexSpectrogram, y: ComplexSpectrogram, t: float
    ) -> ComplexSpectrogram:
        """Score estimate; pure function of (theta, inputs), no tape retained."""
        std = self._checked_std(t)
        p, _ = self._forward_core(x_t.bins, y.bins, t)
        return ComplexSpectrogram(p / std, x_t.n_samples)

    def predict_raw(
        self, x_t: ComplexSpectrogram, y: ComplexSpectrogram, t: float
    ) -> ComplexSpectrogram:
        """Raw complex net output with no 1/std factor; pure, any finite t."""
        p, _ = self._forward_core(x_t.bins, y.bins, t)
        return ComplexSpectrogram(p, x_t.n_samples)


def neural_forward(
    m: NeuralScorer,
    x_t: ComplexSpectrogram,
    y: ComplexSpectrogram,
    t: float,
    scale_by_std: bool = True,
) -> ComplexSpectrogram:
    """Training-time forward pass; caches the tape for ``neural_backward``.

    With ``scale_by_std=False`` the raw complex net output is returned with no
    1/std factor, the form used when the net is trained as a direct clean-
    spectrogram predictor rather than a score.
    """
    sigma = m._checked_std(t) if scale_by_std else 1.0
    p, tape = m._forward_core(x_t.bins, y.bins, t)
    tape.sigma = sigma
    m._tape = tape
    return ComplexSpectrogram(p / sigma, x_t.n_samples)


def neural_backward(m: NeuralScorer, upstream: np.ndarray) -> np.ndarray:
    """Parameter gradient of a scalar loss, given dL/d(output) as a complex array.

    Consumes the tape cached by the last ``neural_forward``.
    """
    tape = m._tape
    if tape is None:
        raise RuntimeError("neural_backward called without a cached forward pass")
    m._tape = None
    f, k = tape.shape
    upstream = np.asarray(upstream)
    if upstream.shape != (f, k):
        raise ValueError(f"upstream gradient shape {upstream.shape} != output shape {(f, k)}")
    d_p = upstream / tape.sigma
    d_out = np.stack([d_p.real, d_p.imag])

    grad = np.zeros_like(m.theta)
    dims = m.config.layer_dims
    views = list(m._views())
    for li in range(len(dims) - 1, -1, -1):
        w, _ = views[li]
        wsl, bsl = m.layer_param_slices[li]
        act = tape.acts[li]
        d_pre = d_out if act is None else d_out * (1.0 - act * act)
        d_pre_mat = d_pre.reshape(d_pre.shape[0], f * k).T
        cols = _im2col(tape.inputs[li])
        grad[wsl] = (d_pre_mat.T @ cols).reshape(-1)
        grad[bsl] = d_pre.sum(axis=(1, 2))
        if li > 0:
            c_in = dims[li][0]
            d_out = _col2im(d_pre_mat @ w, c_in, f, k)
    return grad


def gradient_check(
    m: NeuralScorer,
    objective,
    eps: float = 1e-4,
    n_check: int = 256,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``objective(model) -> (loss, grad)`` must evaluate the scalar loss and its
    analytic parameter gradient at the model's current theta.  A random subset
    of ``n_check`` parameters is probed; each error is |fd - analytic| over
    max(|fd|, |analytic|, 1e-8) so that jointly vanishing entries agree.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-6, 1e-3], got {eps}")
    if rng is None:
        rng = np.random.default_rng(0)
    _, grad = objective(m)
    n = min(n_check, m.n_params)
    idx = rng.choice(m.n_params, size=n, replace=False)
    worst = 0.0
    for i in idx:
        saved = m.theta[i]
        m.theta[i] = saved + eps
        plus, _ = objective(m)
        m.theta[i] = saved - eps
        minus, _ = objective(m)
        m.theta[i] = saved
        fd = (plus - minus) / (2.0 * eps)
        err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8)
        worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class Checkpoint:
    """A deserialized model snapshot."""

    model: NeuralScorer
    step: int
    ema_params: np.ndarray | None
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    model: NeuralScorer,
    step: int,
    ema_params: np.ndarray | None = None,
    extra: dict | None = None,
):
    """Versioned binary snapshot: magic, version, JSON header, then parameters.

    Layout (little-endian): 4-byte magic, u32 version, u32 header length, the
    UTF-8 JSON header (architecture, process params, caller extras), u64 step,
    u64 parameter count, float64 parameters, u8 EMA flag, float64 EMA
    parameters when the flag is 1.
    """
    header = {
        "scorer": asdict(model.config),
        "sde": asdict(model.sde),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    if ema_params is not None and ema_params.shape != model.theta.shape:
        raise ValueError("EMA parameter vector shape differs from model parameters")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<QQ", step, model.n_params))
        fh.write(model.theta.astype("<f8").tobytes())
        if ema_params is None:
            fh.write(b"\x00")
        else:
            fh.write(b"\x01")
            fh.write(ema_params.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a ``save_checkpoint`` file; rebuilds the model."""
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n, what):
        nonlocal raw
        if len(raw) < n:
            raise ValueError(f"checkpoint truncated while reading {what}")
        out, raw = raw[:n], raw[n:]
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise ValueError("not a score-model checkpoint (bad magic bytes)")
    version, header_len = struct.unpack("<II", take(8, "version"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(take(header_len, "header").decode())
    step, n_params = struct.unpack("<QQ", take(16, "counters"))
    model = NeuralScorer(ScorerConfig(**header["scorer"]), SdeParams(**header["sde"]))
    if n_params != model.n_params:
        raise ValueError(
            f"checkpoint holds {n_params} parameters, architecture expects {model.n_params}"
        )
    theta = np.frombuffer(take(8 * n_params, "parameters"), dtype="<f8")
    model.theta[:] = theta
    ema = None
    if take(1, "EMA flag") == b"\x01":
        ema = np.frombuffer(take(8 * n_params, "EMA parameters"), dtype="<f8").copy()
    return Checkpoint(model=model, step=step, ema_params=ema, extra=header.get("extra", {}))
