"""Conditional mean-reverting diffusion process on complex spectrograms.

The forward process pulls clean speech x toward the observed noisy
spectrogram y while injecting circularly-symmetric complex Gaussian noise
whose scale grows exponentially in time:

    dx_t = gamma * (y - x_t) dt + g(t) dw,
    g(t) = sigma_min * (sigma_max / sigma_min)**t * sqrt(2 * log(sigma_max / sigma_min)).

Because the drift is linear, the time-t marginal given (x_0, y) is Gaussian
with closed-form mean and variance (``kernel_mean`` / ``kernel_std``); the
variance expression is the exact solution of d(var)/dt = -2*gamma*var + g(t)**2
with var(0) = 0.  ``sample_perturbed`` draws from that kernel directly, and
``simulate_forward`` integrates the process with Euler-Maruyama as an
independent Monte-Carlo check of the closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectral import ComplexSpectrogram

_T_SLACK = 1e-12  # tolerance for t-range checks on floating-point time grids


@dataclass(frozen=True)
class SdeParams:
    """Forward-process coefficients and the usable time interval."""

    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    t_eps: float = 0.03
    t_max: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not (self.sigma_max > self.sigma_min > 0.0):
            raise ValueError(
                f"need sigma_max > sigma_min > 0, got {self.sigma_max}, {self.sigma_min}"
            )
        if not (0.0 < self.t_eps < self.t_max):
            raise ValueError(f"t_eps must lie in (0, t_max), got {self.t_eps}")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)


@dataclass(frozen=True)
class ProcessState:
    """A point on a diffusion trajectory: spectrogram x at process time t."""

    x: ComplexSpectrogram
    t: float

    def __post_init__(self):
        t = float(self.t)
        if not math.isfinite(t) or t < 0.0:
            raise ValueError(f"process time must be finite and >= 0, got {self.t}")
        object.__setattr__(self, "t", t)

    def check_bounds(self, p: SdeParams):
        if not (p.t_eps - _T_SLACK <= self.t <= p.t_max + _T_SLACK):
            raise ValueError(f"t={self.t} outside process interval [{p.t_eps}, {p.t_max}]")


def _require_matching(a: ComplexSpectrogram, b: ComplexSpectrogram):
    if a.bins.shape != b.bins.shape:
        raise ValueError(f"spectrogram shapes differ: {a.bins.shape} vs {b.bins.shape}")
    if a.n_samples != b.n_samples:
        raise ValueError(f"spectrogram lengths differ: {a.n_samples} vs {b.n_samples}")


def _check_t(t: float, lo: float, hi: float, what: str):
    if not (lo - _T_SLACK <= t <= hi + _T_SLACK):
        raise ValueError(f"{what} requires t in [{lo}, {hi}], got {t}")


def sample_complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric unit complex Gaussian: Re and Im each N(0, 1/2)."""
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return z * math.sqrt(0.5)


def drift(x: ComplexSpectrogram, y: ComplexSpectrogram, p: SdeParams) -> ComplexSpectrogram:
    """Mean-reverting drift gamma * (y - x), elementwise."""
    _require_matching(x, y)
    return ComplexSpectrogram(p.gamma * (y.bins - x.bins), x.n_samples)


def diffusion_coeff(t: float, p: SdeParams) -> float:
    """Noise injection scale g(t); strictly positive and increasing in t."""
    _check_t(t, 0.0, p.t_max, "diffusion_coeff")
    ratio = p.sigma_max / p.sigma_min
    return p.sigma_min * ratio**t * math.sqrt(2.0 * p.log_ratio)


def kernel_mean(
    x0: ComplexSpectrogram, y: ComplexSpectrogram, t: float, p: SdeParams
) -> ComplexSpectrogram:
    """Closed-form marginal mean: exp(-gamma*t)*x0 + (1 - exp(-gamma*t))*y."""
    _require_matching(x0, y)
    if t < 0.0:
        raise ValueError(f"kernel_mean requires t >= 0, got {t}")
    w = math.exp(-p.gamma * t)
    return ComplexSpectrogram(w * x0.bins + (1.0 - w) * y.bins, x0.n_samples)


def kernel_var(t: float, p: SdeParams) -> float:
    """Closed-form marginal variance per complex bin at time t."""
    _check_t(t, 0.0, p.t_max, "kernel_var")
    ratio = p.sigma_max / p.sigma_min
    lr = p.log_ratio
    return p.sigma_min**2 * (ratio ** (2.0 * t) - math.exp(-2.0 * p.gamma * t)) * lr / (p.gamma + lr)


def kernel_std(t: float, p: SdeParams) -> float:
    """sqrt of ``kernel_var``; 0 exactly at t = 0."""
    return math.sqrt(max(kernel_var(t, p), 0.0))


def sample_perturbed(
    x0: ComplexSpectrogram,
    y: ComplexSpectrogram,
    t: float,
    p: SdeParams,
    rng: np.random.Generator,
) -> tuple[ComplexSpectrogram, ComplexSpectrogram]:
    """Draw x_t = mean + std*z from the marginal kernel; returns (x_t, z).

    The raw draw z is returned alongside x_t because the score regression
    target is -z / std(t).
    """
    _require_matching(x0, y)
    _check_t(t, p.t_eps, p.t_max, "sample_perturbed")
    mu = kernel_mean(x0, y, t, p)
    z = sample_complex_normal(rng, x0.bins.shape)
    x_t = mu.bins + kernel_std(t, p) * z
    return ComplexSpectrogram(x_t, x0.n_samples), ComplexSpectrogram(z, x0.n_samples)


@dataclass(frozen=True)
class MomentRecord:
    """Empirical vs closed-form moments of the forward process at one time."""

    t: float
    empirical_mean: np.ndarray
    empirical_var: np.ndarray
    model_mean: np.ndarray
    model_var: float

    @property
    def pooled_var_error(self) -> float:
        """Relative error of the bin-averaged empirical variance."""
        return abs(float(np.mean(self.empirical_var)) - self.model_var) / self.model_var

    @property
    def max_mean_deviation(self) -> float:
        return float(np.max(np.abs(self.empirical_mean - self.model_mean)))


@dataclass(frozen=True)
class ForwardMoments:
    """Moment records from ``simulate_forward``, ascending in t."""

    records: tuple[MomentRecord, ...]
    n_paths: int

    @property
    def final(self) -> MomentRecord:
        return self.records[-1]

    @property
    def mean(self) -> np.ndarray:
        return self.final.empirical_mean

    @property
    def var(self) -> np.ndarray:
        return self.final.empirical_var

    def mean_error_bound(self, record: MomentRecord, n_std: float = 3.0) -> float:
        """n_std standard errors of the per-bin complex sample mean."""
        return n_std * math.sqrt(record.model_var / self.n_paths)

    def write_report(self, path):
        """Tab-separated validation report: one row per recorded time."""
        lines = ["t\tmodel_var\tempirical_var\trel_error\tmax_mean_dev\tmean_bound_3se"]
        for r in self.records:
            lines.append(
                f"{r.t:.6f}\t{r.model_var:.8e}\t{float(np.mean(r.empirical_var)):.8e}"
                f"\t{r.pooled_var_error:.4e}\t{r.max_mean_deviation:.4e}"
                f"\t{self.mean_error_bound(r):.4e}"
            )
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def simulate_forward(
    x0: ComplexSpectrogram,
    y: ComplexSpectrogram,
    p: SdeParams,
    n_steps: int,
    n_paths: int,
    rng: np.random.Generator,
    checkpoints: tuple[float, ...] = (),
    block_size: int = 1000,
) -> ForwardMoments:
    """Euler-Maruyama integration of the forward process from t = 0.

    Integrates ``n_paths`` independent trajectories with uniform step
    t_max / n_steps and records empirical mean and per-bin variance at each
    checkpoint time (which must sit on the step grid) and at t_max.  Paths
    are simulated in blocks; every block draws from its own child generator
    spawned up front from ``rng``, and block partials are reduced in block
    order afterwards, so the result depends only on the generator state and
    the block layout, not on execution order.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be positive, got {n_steps}")
    if n_paths < 1:
        raise ValueError(f"n_paths must be positive, got {n_paths}")
    _require_matching(x0, y)

    dt = p.t_max / n_steps
    record_steps = {n_steps: p.t_max}
    for t in checkpoints:
        i = round(t / dt)
        if i < 1 or abs(i * dt - t) > _T_SLACK:
            raise ValueError(f"checkpoint t={t} not on the step grid (dt={dt})")
        record_steps[i] = t
    order = sorted(record_steps)

    shape = x0.bins.shape
    n_blocks = -(-n_paths // block_size)
    streams = rng.spawn(n_blocks)
    # per-block partial sums, reduced in block order after the loop
    part_sum = {i: np.zeros((n_blocks,) + shape, dtype=np.complex128) for i in order}
    part_sq = {i: np.zeros((n_blocks,) + shape) for i in order}

    assigned = 0
    for b in range(n_blocks):
        bs = min(block_size, n_paths - assigned)
        assigned += bs
        x = np.broadcast_to(x0.bins, (bs,) + shape).astype(np.complex128)
        for i in range(1, n_steps + 1):
            g = diffusion_coeff((i - 1) * dt, p)
            z = sample_complex_normal(streams[b], (bs,) + shape)
            x = x + p.gamma * (y.bins - x) * dt + g * math.sqrt(dt) * z
            if i in record_steps:
                part_sum[i][b] = x.sum(axis=0)
                part_sq[i][b] = (x.real**2 + x.imag**2).sum(axis=0)

    records = []
    for i in order:
        t = record_steps[i]
        s1 = part_sum[i].sum(axis=0)
        s2 = part_sq[i].sum(axis=0)
        mean = s1 / n_paths
        # unbiased: (sum|x|^2 - n*|mean|^2) / (n - 1), clipped against rounding
        denom = max(n_paths - 1, 1)
        var = np.maximum(s2 - n_paths * (mean.real**2 + mean.imag**2), 0.0) / denom
        records.append(
            MomentRecord(
                t=t,
                empirical_mean=mean,
                empirical_var=var,
                model_mean=kernel_mean(x0, y, t, p).bins,
                model_var=kernel_var(t, p),
            )
        )
    return ForwardMoments(tuple(records), n_paths)
