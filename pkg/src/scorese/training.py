"""Training objectives and the optimization loop.

Three training modes share one network backbone:

``score_only``
    Denoising score matching: the model output s is regressed onto -z/std(t)
    with loss ||s + z/std||^2 summed over real and imaginary parts.

``weighted``
    Per sample, a convex combination (1 - alpha_t) * score_loss +
    alpha_t * supervised_loss, where the supervised term measures how well
    the posterior-corrected state x_t + c*std^2*s matches the closed-form
    kernel mean (equivalently, the clean-estimate error scaled by
    exp(-2*gamma*t)), and alpha_t ramps from 1 at t_eps down to 0 at t_max
    so short-time draws emphasize clean-speech recovery.

``supervised_direct``
    No diffusion: the backbone reads (y, y, t=0) and its raw complex output
    is trained as a clean-spectrogram predictor under mean-squared error.

The correction factor c is 1/2 (``half``) or 1 (``full``).  Only matched
pairs recover the clean target exactly from an analytic kernel score:
(real-view score, half) and (conjugate score, full); the mismatched pairing
lands halfway between x_t and the kernel mean.  Both factors are provided
and recorded in checkpoints.

t is drawn Uniform(t_eps, t_max] independently per sample, and every draw
(batch indices, then t and z per sample) comes sequentially from the single
master generator, so a run is reproducible from its seed alone.

Optimization is plain Adam with global-norm gradient clipping and an
exponential moving average of the parameters kept for inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .score import NeuralScorer, neural_backward, neural_forward, save_checkpoint
from .sde import SdeParams, kernel_mean, kernel_std, sample_perturbed
from .spectral import ComplexSpectrogram

TRAIN_MODES = ("score_only", "weighted", "supervised_direct")
TWEEDIE_FACTORS = ("half", "full")
ALPHA_SCHEDULES = ("ramp", "constant")

LOG_HEADER = "step\tscore_loss\tsup_loss\talpha_mean\ttotal\tweighted_score\tweighted_sup\tt_mean"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class LossConfig:
    mode: str = "weighted"
    tweedie_factor: str = "half"
    alpha_schedule: str = "ramp"
    alpha_constant: float = 0.0
    batch_size: int = 1
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    total_steps: int = 1000
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {TRAIN_MODES}")
        if self.tweedie_factor not in TWEEDIE_FACTORS:
            raise ValueError(
                f"unknown tweedie_factor {self.tweedie_factor!r}, expected one of {TWEEDIE_FACTORS}"
            )
        if self.alpha_schedule not in ALPHA_SCHEDULES:
            raise ValueError(
                f"unknown alpha_schedule {self.alpha_schedule!r}, expected one of {ALPHA_SCHEDULES}"
            )
        if not (0.0 <= self.alpha_constant <= 1.0):
            raise ValueError(f"alpha_constant must be in [0, 1], got {self.alpha_constant}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.grad_clip <= 0.0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")


@dataclass(frozen=True)
class TrainRecord:
    """Telemetry for one optimizer step; all loss fields are batch means."""

    step: int
    t_values: tuple[float, ...]
    score_loss: float
    supervised_loss: float
    alpha: float
    total: float
    weighted_score_term: float
    weighted_supervised_term: float

    def __post_init__(self):
        vals = (self.score_loss, self.supervised_loss, self.alpha, self.total)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite training record at step {self.step}: {vals}")

    def log_line(self) -> str:
        t_mean = sum(self.t_values) / len(self.t_values) if self.t_values else 0.0
        return (
            f"{self.step}\t{self.score_loss:.8e}\t{self.supervised_loss:.8e}"
            f"\t{self.alpha:.6f}\t{self.total:.8e}"
            f"\t{self.weighted_score_term:.8e}\t{self.weighted_supervised_term:.8e}"
            f"\t{t_mean:.6f}"
        )


def _require_same_shape(a: ComplexSpectrogram, b: ComplexSpectrogram, what: str):
    if a.bins.shape != b.bins.shape:
        raise ValueError(f"{what}: shape mismatch {a.bins.shape} vs {b.bins.shape}")


def _squared_norm(arr: np.ndarray) -> float:
    # overflow to inf is deliberate here: divergence checks test the result
    with np.errstate(over="ignore"):
        return float(np.sum(arr.real**2 + arr.imag**2))


def score_matching_loss(s: ComplexSpectrogram, z: ComplexSpectrogram, sigma_t: float) -> float:
    """||s + z/sigma||^2 over all bins, real and imaginary parts summed."""
    _require_same_shape(s, z, "score_matching_loss")
    if sigma_t <= 0.0:
        raise ValueError(f"sigma_t must be positive, got {sigma_t}")
    return _squared_norm(s.bins + z.bins / sigma_t)


def _tweedie_weight(t: float, p: SdeParams) -> float:
    if not (p.t_eps - 1e-12 <= t <= p.t_max + 1e-12):
        raise ValueError(f"clean-estimate ops require t in [{p.t_eps}, {p.t_max}], got {t}")
    w = math.exp(-p.gamma * t)
    if w <= 1e-12:
        raise ValueError(f"exp(gamma*t) amplification at t={t} is numerically unstable")
    return w


def _factor_value(factor: str) -> float:
    if factor not in TWEEDIE_FACTORS:
        raise ValueError(f"unknown tweedie factor {factor!r}, expected one of {TWEEDIE_FACTORS}")
    return 0.5 if factor == "half" else 1.0


def tweedie_estimate(
    x_t: ComplexSpectrogram,
    y: ComplexSpectrogram,
    t: float,
    s: ComplexSpectrogram,
    p: SdeParams,
    factor: str = "half",
) -> ComplexSpectrogram:
    """Posterior clean estimate exp(gamma*t) * (x_t + c*std^2*s - (1-w)*y).

    With w = exp(-gamma*t) and c = 1/2 or 1 per ``factor``.  Exact recovery
    of x_0 from an analytic kernel score requires the matched pairing
    (real-view, half) or (conjugate, full).
    """
    c = _factor_value(factor)
    _require_same_shape(x_t, y, "tweedie_estimate")
    _require_same_shape(x_t, s, "tweedie_estimate")
    w = _tweedie_weight(t, p)
    var = kernel_std(t, p) ** 2
    est = (x_t.bins + c * var * s.bins - (1.0 - w) * y.bins) / w
    return ComplexSpectrogram(est, x_t.n_samples)


def supervised_loss(
    x_t: ComplexSpectrogram,
    y: ComplexSpectrogram,
    t: float,
    s: ComplexSpectrogram,
    x0: ComplexSpectrogram,
    p: SdeParams,
    factor: str = "half",
) -> float:
    """||x_t + c*std^2*s - kernel_mean(x0, y, t)||^2.

    Equals exp(-2*gamma*t) * ||tweedie_estimate - x0||^2.
    """
    c = _factor_value(factor)
    _require_same_shape(x_t, y, "supervised_loss")
    _require_same_shape(x_t, s, "supervised_loss")
    _require_same_shape(x_t, x0, "supervised_loss")
    _tweedie_weight(t, p)  # same domain guards as the clean estimate
    var = kernel_std(t, p) ** 2
    mu = kernel_mean(x0, y, t, p)
    return _squared_norm(x_t.bins + c * var * s.bins - mu.bins)


def alpha_weight(t: float, p: SdeParams) -> float:
    """Supervised-term weight (std(T) - std(t)) / (std(T) - std(t_eps)).

    1 at t_eps, 0 at t_max, decreasing in t whenever std is increasing
    (clipped into [0, 1] otherwise).
    """
    if not (p.t_eps - 1e-12 <= t <= p.t_max + 1e-12):
        raise ValueError(f"alpha_weight requires t in [{p.t_eps}, {p.t_max}], got {t}")
    top = kernel_std(p.t_max, p)
    den = top - kernel_std(p.t_eps, p)
    if den < 1e-12:
        raise ValueError("degenerate schedule: std(t_max) == std(t_eps)")
    return min(max((top - kernel_std(t, p)) / den, 0.0), 1.0)


def supervised_direct_loss(model_output: ComplexSpectrogram, x0: ComplexSpectrogram) -> float:
    """Per-bin mean squared error between a direct prediction and the target."""
    _require_same_shape(model_output, x0, "supervised_direct_loss")
    diff = model_output.bins - x0.bins
    return float(np.mean(diff.real**2 + diff.imag**2))


def draw_uniform_time(rng: np.random.Generator, p: SdeParams) -> float:
    # 1 - random() lies in (0, 1], so t_max is reachable and t_eps is not undershot
    return p.t_eps + (p.t_max - p.t_eps) * (1.0 - rng.random())


def _sample_alpha(t: float, cfg: LossConfig, p: SdeParams) -> float:
    if cfg.mode == "score_only":
        return 0.0
    if cfg.alpha_schedule == "constant":
        return cfg.alpha_constant
    return alpha_weight(t, p)


def weighted_loss(
    batch,
    rng: np.random.Generator,
    model,
    cfg: LossConfig,
    p: SdeParams,
    step: int = 0,
    with_grad: bool = False,
):
    """One diffusion-training objective evaluation over a batch of (x0, y).

    Per sample: draw t ~ Uniform(t_eps, t_max], perturb x0 through the kernel,
    evaluate the model, and combine (1 - alpha)*score_loss + alpha*sup_loss.
    The batch total is the mean of the weighted score terms plus the mean of
    the weighted supervised terms, so constant alpha = 0 or 1 reduces to the
    plain batch-mean of the corresponding loss bit for bit.

    Returns (total, TrainRecord), plus the mean parameter gradient when
    ``with_grad`` is set (model must then be a NeuralScorer).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if cfg.mode == "supervised_direct":
        raise ValueError("weighted_loss handles the diffusion modes; use direct_loss_batch")
    if with_grad and not isinstance(model, NeuralScorer):
        raise ValueError("gradient evaluation requires a NeuralScorer")
    c = _factor_value(cfg.tweedie_factor)

    ts, score_vals, sup_vals, alphas = [], [], [], []
    w_score, w_sup = [], []
    grad = np.zeros(model.n_params) if with_grad else None
    for x0, y in batch:
        t = draw_uniform_time(rng, p)
        x_t, z = sample_perturbed(x0, y, t, p, rng)
        sigma = kernel_std(t, p)
        if with_grad:
            s = neural_forward(model, x_t, y, t)
        else:
            s = model.evaluate(x_t, y, t)
        resid_score = s.bins + z.bins / sigma
        mu = kernel_mean(x0, y, t, p)
        resid_sup = x_t.bins + c * sigma**2 * s.bins - mu.bins
        l_score = _squared_norm(resid_score)
        l_sup = _squared_norm(resid_sup)
        if not (math.isfinite(l_score) and math.isfinite(l_sup)):
            raise TrainingDiverged(
                f"non-finite loss terms at step {step}: score={l_score}, supervised={l_sup}"
            )
        a = _sample_alpha(t, cfg, p)
        ts.append(t)
        score_vals.append(l_score)
        sup_vals.append(l_sup)
        alphas.append(a)
        w_score.append((1.0 - a) * l_score)
        w_sup.append(a * l_sup)
        if with_grad:
            upstream = (1.0 - a) * 2.0 * resid_score + a * 2.0 * c * sigma**2 * resid_sup
            grad += neural_backward(model, upstream)

    total = float(np.mean(w_score)) + float(np.mean(w_sup))
    if not math.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total} at step {step}")
    record = TrainRecord(
        step=step,
        t_values=tuple(ts),
        score_loss=float(np.mean(score_vals)),
        supervised_loss=float(np.mean(sup_vals)),
        alpha=float(np.mean(alphas)),
        total=total,
        weighted_score_term=float(np.mean(w_score)),
        weighted_supervised_term=float(np.mean(w_sup)),
    )
    if with_grad:
        return total, record, grad / len(batch)
    return total, record


def direct_loss_batch(batch, model: NeuralScorer, step: int = 0, with_grad: bool = False):
    """Direct-prediction objective: backbone at t = 0 with the noisy input in
    both spectrogram slots, raw output regressed onto x0 under per-bin MSE."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    losses = []
    grad = np.zeros(model.n_params) if with_grad else None
    for x0, y in batch:
        if with_grad:
            pred = neural_forward(model, y, y, 0.0, scale_by_std=False)
        else:
            pred = model.predict_raw(y, y, 0.0)
        diff = pred.bins - x0.bins
        with np.errstate(over="ignore"):
            loss = float(np.mean(diff.real**2 + diff.imag**2))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
        losses.append(loss)
        if with_grad:
            grad += neural_backward(model, 2.0 * diff / diff.size)
    total = float(np.mean(losses))
    if not math.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total} at step {step}")
    record = TrainRecord(
        step=step,
        t_values=(0.0,) * len(batch),
        score_loss=0.0,
        supervised_loss=total,
        alpha=1.0,
        total=total,
        weighted_score_term=0.0,
        weighted_supervised_term=total,
    )
    if with_grad:
        return total, record, grad / len(batch)
    return total, record


class Adam:
    """Standard Adam with bias correction; updates theta in place."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def update(self, theta: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradient(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale the gradient down to the given global L2 norm when it exceeds it."""
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad


@dataclass
class TrainResult:
    model: NeuralScorer
    ema_params: np.ndarray
    records: list


def train(
    dataset,
    model: NeuralScorer,
    cfg: LossConfig,
    rng: np.random.Generator,
    p: SdeParams | None = None,
    log_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Run ``cfg.total_steps`` Adam updates on batches sampled with replacement.

    Keeps an exponential moving average of the parameters for inference,
    streams one TrainRecord line per step to ``log_path`` when given, and
    writes a final checkpoint (EMA included, mode and factor recorded) to
    ``checkpoint_path`` when given.  Raises TrainingDiverged on a non-finite
    loss.  Fully deterministic given the generator: all sampling (batch
    indices, t, z) reads from it in a fixed order.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if p is None:
        p = model.sde
    opt = Adam(model.n_params, cfg.learning_rate)
    ema = model.theta.copy()
    records = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        if log_file:
            log_file.write(LOG_HEADER + "\n")
        for step in range(cfg.total_steps):
            idx = rng.integers(0, len(dataset), size=cfg.batch_size)
            batch = [dataset[i] for i in idx]
            if cfg.mode == "supervised_direct":
                _, record, grad = direct_loss_batch(batch, model, step=step, with_grad=True)
            else:
                _, record, grad = weighted_loss(
                    batch, rng, model, cfg, p, step=step, with_grad=True
                )
            grad = clip_gradient(grad, cfg.grad_clip)
            opt.update(model.theta, grad)
            if not np.all(np.isfinite(model.theta)):
                raise TrainingDiverged(f"parameters became non-finite after step {step}")
            ema = cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * model.theta
            records.append(record)
            if log_file:
                log_file.write(record.log_line() + "\n")
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            model,
            step=cfg.total_steps,
            ema_params=ema,
            extra={
                "mode": cfg.mode,
                "tweedie_factor": cfg.tweedie_factor,
                "score_convention": "conjugate",
            },
        )
    return TrainResult(model=model, ema_params=ema, records=records)
