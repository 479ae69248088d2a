"""Reverse-time inference: predictor-corrector sampling of enhanced speech.

The reverse process starts from Gaussian noise centered on the noisy
spectrogram at t = T and integrates the reverse stochastic process down to
t_eps on a uniform time grid.  Each sweep runs the configured number of
annealed-Langevin corrector updates at the current time, then one reverse
Euler-Maruyama predictor step.  An optional final posterior-mean denoise
replaces the residual small-noise state with its clean estimate before the
inverse transform back to a waveform.

The score model only needs an ``evaluate(x_t, y, t)`` method; the analytic
kernel score and the trained network both qualify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sde import (
    ProcessState,
    SdeParams,
    diffusion_coeff,
    drift,
    kernel_std,
    sample_complex_normal,
)
from .spectral import ComplexSpectrogram, StftConfig, Waveform, istft, stft
from .training import tweedie_estimate

# Times this close to the terminal grid point snap to it exactly, so the
# final state lands on t_eps despite accumulated rounding.
_T_SNAP = 1e-12

TWEEDIE_FACTOR_CHOICES = ("auto", "half", "full")


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process integration settings.

    ``snr`` is the Langevin step-size ratio of the corrector.  ``tweedie_factor``
    selects the score-to-posterior coefficient for the final denoise; "auto"
    resolves it from the model's score convention (conjugate -> "full",
    real-view -> "half").
    """

    n_steps: int = 30
    corrector_steps_per_predictor: int = 1
    snr: float = 0.5
    final_tweedie: bool = True
    seed: int = 0
    tweedie_factor: str = "auto"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.corrector_steps_per_predictor < 0:
            raise ValueError(
                "corrector_steps_per_predictor must be >= 0, got "
                f"{self.corrector_steps_per_predictor}"
            )
        if not (0.0 < self.snr <= 1.0):
            raise ValueError(f"snr must be in (0, 1], got {self.snr}")
        if self.tweedie_factor not in TWEEDIE_FACTOR_CHOICES:
            raise ValueError(
                f"tweedie_factor must be one of {TWEEDIE_FACTOR_CHOICES}, "
                f"got {self.tweedie_factor!r}"
            )


def resolve_tweedie_factor(model, requested: str = "auto") -> str:
    """Map "auto" to the factor matched to the model's score convention.

    A conjugate-convention score needs the full variance coefficient for an
    unbiased posterior mean; a real-view score needs half.  Models without a
    ``convention`` attribute (the trained network) are conjugate by
    construction of the training target.
    """
    if requested != "auto":
        return requested
    convention = getattr(model, "convention", "conjugate")
    return "full" if convention == "conjugate" else "half"


def init_state(
    y: ComplexSpectrogram, p: SdeParams, rng: np.random.Generator
) -> ProcessState:
    """Gaussian start centered on the noisy spectrogram: x_T = y + std(T) z."""
    z = sample_complex_normal(rng, y.bins.shape)
    x = y.bins + kernel_std(p.t_max, p) * z
    return ProcessState(ComplexSpectrogram(x, y.n_samples), p.t_max)


def predictor_step(
    state: ProcessState,
    y: ComplexSpectrogram,
    model,
    p: SdeParams,
    dt: float,
    rng: np.random.Generator,
) -> ProcessState:
    """One reverse Euler-Maruyama step of size ``dt``.

    x <- x - [f(x, y) - g(t)^2 s(x, y, t)] dt + g(t) sqrt(dt) z with fresh
    complex noise z.  A step that would cross t_eps is clamped to a partial
    step landing on t_eps exactly; at dt = 0 only the zero-noise identity
    update runs (the noise draw still advances the rng stream).
    """
    if dt < 0.0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    state.check_bounds(p)
    dt_eff = min(dt, state.t - p.t_eps)
    if dt_eff < 0.0:
        dt_eff = 0.0
    s = model.evaluate(state.x, y, state.t)
    g = diffusion_coeff(state.t, p)
    f = drift(state.x, y, p)
    z = sample_complex_normal(rng, state.x.bins.shape)
    # Divergence shows up as non-finite bins at construction time, so the
    # intermediate overflow itself need not warn.
    with np.errstate(over="ignore", invalid="ignore"):
        x_new = (
            state.x.bins
            - (f.bins - g * g * s.bins) * dt_eff
            + g * math.sqrt(dt_eff) * z
        )
    t_new = state.t - dt_eff
    if t_new < p.t_eps + _T_SNAP:
        t_new = p.t_eps
    return ProcessState(ComplexSpectrogram(x_new, state.x.n_samples), t_new)


def corrector_step(
    state: ProcessState,
    y: ComplexSpectrogram,
    model,
    snr: float,
    rng: np.random.Generator,
) -> ProcessState:
    """One annealed-Langevin update at the current time; t is unchanged.

    Step size eps = 2 (snr ||z|| / ||s||)^2, update x <- x + eps s +
    sqrt(2 eps) z.  A zero-norm score makes the update ill-defined, so it is
    skipped; the noise draw still advances the rng stream either way.
    """
    if not (0.0 < snr <= 1.0):
        raise ValueError(f"snr must be in (0, 1], got {snr}")
    s = model.evaluate(state.x, y, state.t)
    z = sample_complex_normal(rng, state.x.bins.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        s_norm = float(np.linalg.norm(s.bins))
        if s_norm == 0.0:
            return state
        eps = 2.0 * (snr * float(np.linalg.norm(z)) / s_norm) ** 2
        x_new = state.x.bins + eps * s.bins + math.sqrt(2.0 * eps) * z
    return ProcessState(ComplexSpectrogram(x_new, state.x.n_samples), state.t)


def enhance(
    y_waveform: Waveform,
    model,
    p: SdeParams,
    sampler_cfg: SamplerConfig,
    stft_cfg: StftConfig,
    progress=None,
) -> Waveform:
    """Enhance a noisy waveform with the full reverse-process pipeline.

    Transform, sample from T down to t_eps on a uniform grid of
    ``n_steps`` predictor sweeps (each preceded by the configured corrector
    updates), optionally apply the final posterior-mean denoise, and invert
    the transform.  Output length and sample rate match the input.

    ``progress``, when given, is called after each sweep with
    ``(step_index, t, residual_norm)`` where the residual is the norm of that
    sweep's state change.  Raises RuntimeError with a step diagnostic if the
    state stops being finite mid-run.
    """
    rng = np.random.default_rng(sampler_cfg.seed)
    y = stft(y_waveform, stft_cfg)
    state = init_state(y, p, rng)
    grid = np.linspace(p.t_max, p.t_eps, sampler_cfg.n_steps + 1)
    for k in range(sampler_cfg.n_steps):
        x_prev = state.x.bins
        try:
            for _ in range(sampler_cfg.corrector_steps_per_predictor):
                state = corrector_step(state, y, model, sampler_cfg.snr, rng)
            dt = float(grid[k] - grid[k + 1])
            state = predictor_step(state, y, model, p, dt, rng)
        except ValueError as e:
            raise RuntimeError(
                f"sampling aborted at step {k + 1}/{sampler_cfg.n_steps} "
                f"(t={float(grid[k]):.6g}): {e}"
            ) from e
        if progress is not None:
            residual = float(np.linalg.norm(state.x.bins - x_prev))
            progress(k + 1, state.t, residual)
    if sampler_cfg.final_tweedie:
        factor = resolve_tweedie_factor(model, sampler_cfg.tweedie_factor)
        s = model.evaluate(state.x, y, state.t)
        denoised = tweedie_estimate(state.x, y, state.t, s, p, factor)
        state = ProcessState(denoised, state.t)
    out = istft(state.x, stft_cfg, len(y_waveform))
    return Waveform(out.samples, y_waveform.sample_rate)


def enhance_direct(y_waveform: Waveform, model, stft_cfg: StftConfig) -> Waveform:
    """One-shot enhancement with a direct clean-spectrogram predictor.

    The network output at the sentinel time 0 is taken as the clean
    spectrogram estimate; no reverse process is involved.
    """
    y = stft(y_waveform, stft_cfg)
    estimate = model.predict_raw(y, y, 0.0)
    out = istft(estimate, stft_cfg, len(y_waveform))
    return Waveform(out.samples, y_waveform.sample_rate)
