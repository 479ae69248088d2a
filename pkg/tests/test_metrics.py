"""Tests for objective evaluation metrics."""

import math

import numpy as np
import pytest

from scorese.metrics import (
    SI_SDR_CAP_DB,
    SI_SDR_FLOOR_DB,
    EvalReport,
    MetricSummary,
    evaluate_corpus,
    external_metric,
    si_sdr,
    spectral_mse,
)
from scorese.spectral import ComplexSpectrogram, Waveform


def _noise(rng, n):
    return rng.standard_normal(n)


def _orthogonalize(w, r):
    """Remove the component of w along r."""
    return w - (np.dot(w, r) / np.dot(r, r)) * r


class TestSiSdr:
    def test_identical_signals_hit_cap(self):
        rng = np.random.default_rng(0)
        r = Waveform(0.1 * _noise(rng, 4000))
        assert si_sdr(r, r) == SI_SDR_CAP_DB

    @pytest.mark.parametrize("c", [0.5, 2.0, 3.7, 1e-3])
    def test_scaled_copy_hits_cap(self, c):
        rng = np.random.default_rng(1)
        r = Waveform(0.1 * _noise(rng, 4000))
        assert si_sdr(Waveform(c * r.samples), r) == SI_SDR_CAP_DB

    def test_orthogonal_noise_ten_to_one(self):
        # Noise orthogonal to the reference with a 10:1 energy ratio gives
        # exactly 10*log10(10) = 10 dB.
        rng = np.random.default_rng(2)
        r = _noise(rng, 8000)
        w = _orthogonalize(_noise(rng, 8000), r)
        w *= math.sqrt(np.dot(r, r) / (10.0 * np.dot(w, w)))
        value = si_sdr(Waveform(r + w), Waveform(r))
        assert value == pytest.approx(10.0, abs=1e-6)

    @pytest.mark.parametrize("c", [0.25, 0.5, 2.0, 8.0])
    def test_scale_invariance_power_of_two_exact(self, c):
        rng = np.random.default_rng(3)
        r = _noise(rng, 2000)
        e = r + 0.3 * _noise(rng, 2000)
        assert si_sdr(Waveform(c * e), Waveform(r)) == si_sdr(Waveform(e), Waveform(r))

    @pytest.mark.parametrize("c", [0.3, 1.7, 123.4])
    def test_scale_invariance_general(self, c):
        rng = np.random.default_rng(4)
        r = _noise(rng, 2000)
        e = r + 0.3 * _noise(rng, 2000)
        a = si_sdr(Waveform(c * e), Waveform(r))
        b = si_sdr(Waveform(e), Waveform(r))
        assert a == pytest.approx(b, rel=1e-12)

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(5)
        r = _noise(rng, 2000)
        e = r + 0.5 * _noise(rng, 2000)
        perm = rng.permutation(2000)
        a = si_sdr(Waveform(e[perm]), Waveform(r[perm]))
        b = si_sdr(Waveform(e), Waveform(r))
        assert a == pytest.approx(b, rel=1e-12)

    def test_monotone_in_orthogonal_noise(self):
        rng = np.random.default_rng(6)
        r = _noise(rng, 4000)
        w = _orthogonalize(_noise(rng, 4000), r)
        values = []
        for scale in [0.1, 0.2, 0.4, 0.8, 1.6]:
            values.append(si_sdr(Waveform(r + scale * w), Waveform(r)))
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_orthogonal_estimate_hits_floor(self):
        r = Waveform(np.array([1.0, 0.0, 0.0]))
        e = Waveform(np.array([0.0, 1.0, 0.0]))
        assert si_sdr(e, r) == SI_SDR_FLOOR_DB

    def test_zero_estimate_hits_floor(self):
        r = Waveform(np.array([1.0, -1.0]))
        e = Waveform(np.zeros(2))
        assert si_sdr(e, r) == SI_SDR_FLOOR_DB

    def test_no_mean_centering(self):
        # A DC offset must change the value: signals are compared as-is.
        rng = np.random.default_rng(7)
        r = _noise(rng, 2000)
        e = r + 0.1 * _noise(rng, 2000)
        with_dc = si_sdr(Waveform(e + 0.5), Waveform(r))
        without = si_sdr(Waveform(e), Waveform(r))
        assert with_dc != pytest.approx(without, rel=1e-6)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            si_sdr(Waveform(np.zeros(10)), Waveform(np.ones(11)))

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError, match="zero energy"):
            si_sdr(Waveform(np.ones(10)), Waveform(np.zeros(10)))


class TestSpectralMse:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(10)
        bins = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        a = ComplexSpectrogram(bins, 100)
        assert spectral_mse(a, a) == 0.0

    def test_single_bin_constant_difference(self):
        f, k = 8, 5
        base = np.zeros((f, k), dtype=complex)
        bumped = base.copy()
        c = 0.37
        bumped[3, 2] = c
        a = ComplexSpectrogram(bumped, 100)
        b = ComplexSpectrogram(base, 100)
        assert spectral_mse(a, b) == pytest.approx(c * c / (f * k), rel=1e-15)

    def test_matches_elementwise_summation(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((6, 9)) + 1j * rng.standard_normal((6, 9))
        y = rng.standard_normal((6, 9)) + 1j * rng.standard_normal((6, 9))
        total = math.fsum(
            (x[i, j].real - y[i, j].real) ** 2 + (x[i, j].imag - y[i, j].imag) ** 2
            for i in range(6)
            for j in range(9)
        )
        expected = total / (6 * 9)
        got = spectral_mse(ComplexSpectrogram(x, 10), ComplexSpectrogram(y, 10))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        a = ComplexSpectrogram(np.zeros((2, 3), dtype=complex), 10)
        b = ComplexSpectrogram(np.zeros((2, 4), dtype=complex), 10)
        with pytest.raises(ValueError, match="shape"):
            spectral_mse(a, b)


class TestMetricSummary:
    def test_hand_checked_sem(self):
        s = MetricSummary(np.array([1.0, 2.0, 4.0]))
        assert s.mean == pytest.approx(7.0 / 3.0, rel=1e-15)
        assert s.sem == pytest.approx(math.sqrt(7.0) / 3.0, rel=1e-12)

    def test_single_value_sem_is_zero(self):
        s = MetricSummary(np.array([5.0]))
        assert s.sem == 0.0
        assert s.mean == 5.0

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="at least one"):
            MetricSummary(np.array([]))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            MetricSummary(np.array([1.0, np.nan]))


class TestEvaluateCorpus:
    def _pairs(self):
        rng = np.random.default_rng(20)
        out = []
        for i in range(3):
            r = _noise(rng, 3000)
            e = r + (0.1 * (i + 1)) * _noise(rng, 3000)
            out.append((f"utt{i}", Waveform(e), Waveform(r)))
        return out

    def test_values_match_direct_calls(self):
        pairs = self._pairs()
        report = evaluate_corpus(pairs)
        direct = [si_sdr(e, r) for _, e, r in pairs]
        np.testing.assert_array_equal(report.metrics["si_sdr"].values, direct)
        assert report.names == ("utt0", "utt1", "utt2")

    def test_deterministic(self):
        a = evaluate_corpus(self._pairs())
        b = evaluate_corpus(self._pairs())
        np.testing.assert_array_equal(
            a.metrics["si_sdr"].values, b.metrics["si_sdr"].values
        )

    def test_custom_metric_set(self):
        pairs = self._pairs()
        fns = {"rmse": lambda e, r: float(np.sqrt(np.mean((e.samples - r.samples) ** 2)))}
        report = evaluate_corpus(pairs, fns)
        assert set(report.metrics) == {"rmse"}
        assert report.metrics["rmse"].n == 3

    def test_empty_pairs_rejected(self):
        with pytest.raises(ValueError, match="no utterance"):
            evaluate_corpus([])

    def test_empty_metric_set_rejected(self):
        with pytest.raises(ValueError, match="not be empty"):
            evaluate_corpus(self._pairs(), {})

    def test_report_file_round_trip(self, tmp_path):
        report = evaluate_corpus(self._pairs())
        path = tmp_path / "eval.tsv"
        report.write_report(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "utterance\tsi_sdr"
        assert len(lines) == 3 + 3  # header + utterances + mean + sem
        mean_row = lines[-2].split("\t")
        sem_row = lines[-1].split("\t")
        assert mean_row[0] == "mean"
        assert float(mean_row[1]) == pytest.approx(
            report.metrics["si_sdr"].mean, rel=1e-9
        )
        assert sem_row[0] == "sem"
        assert float(sem_row[1]) == pytest.approx(
            report.metrics["si_sdr"].sem, rel=1e-9
        )

    def test_summary_table_mentions_metric(self):
        report = evaluate_corpus(self._pairs())
        assert "si_sdr" in report.summary_table()
        assert "n=3" in report.summary_table()


class TestEvalReportValidation:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="values for"):
            EvalReport(
                names=("a", "b"),
                metrics={"m": MetricSummary(np.array([1.0]))},
            )

    def test_no_utterances_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            EvalReport(names=(), metrics={})


class TestExternalMetric:
    def test_constant_command(self):
        fn = external_metric("echo 3.5")
        rng = np.random.default_rng(30)
        w = Waveform(0.1 * _noise(rng, 100))
        assert fn(w, w) == 3.5

    def test_placeholder_substitution(self):
        # The command sees real wav files: a 100-sample 16-bit mono wav is
        # 44 header bytes plus 200 data bytes.
        cmd = (
            "python3 -c 'import sys, os; print(os.path.getsize(sys.argv[1]))' "
            "{estimate}"
        )
        fn = external_metric(cmd)
        rng = np.random.default_rng(31)
        w = Waveform(0.1 * _noise(rng, 100))
        assert fn(w, w) == 44 + 200
