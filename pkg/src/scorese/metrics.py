"""Objective evaluation of enhanced signals.

Two built-in metrics: scale-invariant SDR on waveforms and mean squared
error on complex spectrograms.  ``evaluate_corpus`` runs a metric set over
(name, estimate, reference) triples and aggregates mean and standard error
per metric, mirroring the usual "mean +/- sem" table layout.

Intrusive perceptual metrics (PESQ and friends) are deliberately not
implemented here; ``external_metric`` wraps a shell command that computes
one, so they stay optional plug-ins.
"""

from __future__ import annotations

import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .spectral import ComplexSpectrogram, Waveform, wav_write

SI_SDR_CAP_DB = 100.0
SI_SDR_FLOOR_DB = -100.0

# Distortion below this fraction of target energy counts as exact recovery.
_CAP_REL_ENERGY = 1e-20


def si_sdr(estimate: Waveform, reference: Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The estimate is compared against the orthogonal projection of itself
    onto the reference: alpha = <e, r>/||r||^2, and the returned value is
    10*log10(||alpha*r||^2 / ||alpha*r - e||^2).  Signals are used as-is,
    with no mean removal.  The result is capped at +100 dB when the
    distortion energy falls below 1e-20 of the target energy (numerically
    exact recovery) and floored at -100 dB when the estimate carries no
    component of the reference.
    """
    e = estimate.samples
    r = reference.samples
    if e.shape != r.shape:
        raise ValueError(
            f"length mismatch: estimate {e.shape[0]}, reference {r.shape[0]}"
        )
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0.0:
        raise ValueError("reference signal has zero energy")

    alpha = float(np.dot(e, r)) / ref_energy
    target_energy = alpha * alpha * ref_energy
    if target_energy == 0.0:
        return SI_SDR_FLOOR_DB
    distortion = alpha * r - e
    distortion_energy = float(np.dot(distortion, distortion))
    if distortion_energy <= _CAP_REL_ENERGY * target_energy:
        return SI_SDR_CAP_DB
    value = 10.0 * math.log10(target_energy / distortion_energy)
    return float(np.clip(value, SI_SDR_FLOOR_DB, SI_SDR_CAP_DB))


def spectral_mse(estimate: ComplexSpectrogram, reference: ComplexSpectrogram) -> float:
    """Mean squared complex error over all bins."""
    if estimate.bins.shape != reference.bins.shape:
        raise ValueError(
            f"shape mismatch: {estimate.bins.shape} vs {reference.bins.shape}"
        )
    diff = estimate.bins - reference.bins
    return float(np.mean(diff.real**2 + diff.imag**2))


@dataclass(frozen=True)
class MetricSummary:
    """Per-utterance values of one metric plus aggregate statistics."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size < 1:
            raise ValueError("metric summary needs at least one value")
        if not np.all(np.isfinite(values)):
            raise ValueError("metric values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def sem(self) -> float:
        """Standard error of the mean: sample stddev / sqrt(n), 0 for n = 1."""
        if self.n == 1:
            return 0.0
        return float(np.std(self.values, ddof=1) / math.sqrt(self.n))


@dataclass(frozen=True)
class EvalReport:
    """Evaluation results for a corpus.

    ``names`` lists utterance identifiers in evaluation order; ``metrics``
    maps metric name to a MetricSummary whose values align with ``names``.
    """

    names: tuple
    metrics: dict

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("report needs at least one utterance")
        for name, summary in self.metrics.items():
            if summary.n != len(self.names):
                raise ValueError(
                    f"metric {name!r} has {summary.n} values for "
                    f"{len(self.names)} utterances"
                )

    def summary_table(self) -> str:
        """Human-readable 'metric: mean +/- sem (n)' lines."""
        lines = []
        for name in sorted(self.metrics):
            s = self.metrics[name]
            lines.append(f"{name}: {s.mean:.4f} +/- {s.sem:.4f} (n={s.n})")
        return "\n".join(lines)

    def write_report(self, path) -> None:
        """Write tab-separated report.

        Layout: header row ``utterance<TAB>metric...``, one row per
        utterance with raw values, then ``mean`` and ``sem`` footer rows.
        """
        metric_names = sorted(self.metrics)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(["utterance"] + metric_names) + "\n")
            for i, utt in enumerate(self.names):
                row = [str(utt)] + [
                    f"{self.metrics[m].values[i]:.10g}" for m in metric_names
                ]
                fh.write("\t".join(row) + "\n")
            fh.write(
                "\t".join(["mean"] + [f"{self.metrics[m].mean:.10g}" for m in metric_names])
                + "\n"
            )
            fh.write(
                "\t".join(["sem"] + [f"{self.metrics[m].sem:.10g}" for m in metric_names])
                + "\n"
            )


def evaluate_corpus(pairs, metric_fns=None) -> EvalReport:
    """Evaluate (name, estimate, reference) triples with a metric set.

    ``metric_fns`` maps metric name to ``fn(estimate, reference) -> float``
    over waveforms; defaults to SI-SDR only.  Deterministic: utterance order
    is preserved and every metric is a pure function of its pair.
    """
    if metric_fns is None:
        metric_fns = {"si_sdr": si_sdr}
    if not metric_fns:
        raise ValueError("metric_fns must not be empty")
    names = []
    columns = {name: [] for name in metric_fns}
    for name, estimate, reference in pairs:
        names.append(name)
        for metric_name, fn in metric_fns.items():
            columns[metric_name].append(float(fn(estimate, reference)))
    if not names:
        raise ValueError("no utterance pairs to evaluate")
    return EvalReport(
        names=tuple(names),
        metrics={m: MetricSummary(np.array(v)) for m, v in columns.items()},
    )


def external_metric(command: str, sample_rate: int = 16000):
    """Wrap a shell command as a waveform metric.

    ``command`` is a template with optional ``{estimate}`` and
    ``{reference}`` placeholders that receive 16-bit wav paths.  The last
    line of stdout must parse as a float.  Nothing is executed at wrap
    time; failures surface when the returned callable runs.
    """

    def run(estimate: Waveform, reference: Waveform) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            est_path = os.path.join(tmp, "estimate.wav")
            ref_path = os.path.join(tmp, "reference.wav")
            wav_write(est_path, Waveform(estimate.samples, sample_rate))
            wav_write(ref_path, Waveform(reference.samples, sample_rate))
            argv = shlex.split(command.format(estimate=est_path, reference=ref_path))
            result = subprocess.run(
                argv, capture_output=True, text=True, check=True
            )
        return float(result.stdout.strip().splitlines()[-1])

    return run
