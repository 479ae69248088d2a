"""Dataset plumbing: mixture synthesis at exact SNR and a synthetic corpus.

Clean signals are deterministic band-limited test tones (harmonic stacks,
chirps, AM tones) standing in for recorded speech at desk scale; noise
comes in white, pink, and filtered-babble flavors at unit RMS.  Mixtures
are materialized as 16-bit PCM pairs whose SNR survives quantization, with
every random choice driven by per-entry seeds so a manifest rebuild is
byte-identical.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import chirp as _chirp
from scipy.signal import lfilter

from .spectral import PIPELINE_SAMPLE_RATE, Waveform, wav_read, wav_write

SPLITS = ("train", "valid", "test")
CLEAN_KINDS = ("harmonic", "chirp", "am_modulated")
NOISE_KINDS = ("white", "pink", "ar_babble")

# Peak ceiling for materialized pairs; keeps the 16-bit writer out of its
# clipping branch with a little headroom.
_PCM_PEAK = 0.999

_INDEX_COLUMNS = ("id", "clean", "noisy", "snr_db", "seed", "crop_offset", "scale")


@dataclass(frozen=True)
class MixtureSpec:
    """One corpus entry: a clean/noise file pair mixed at a target SNR."""

    clean_path: str
    noise_path: str
    snr_db: float
    seed: int

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")

    @property
    def output_id(self) -> str:
        """Identity of the materialized pair, unique within a manifest."""
        clean = os.path.splitext(os.path.basename(self.clean_path))[0]
        noise = os.path.splitext(os.path.basename(self.noise_path))[0]
        return f"{clean}__{noise}__snr{self.snr_db:+g}__s{self.seed}"


@dataclass(frozen=True)
class Manifest:
    """Ordered mixture list for one split."""

    entries: tuple
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(self.entries) == 0:
            raise ValueError("manifest must contain at least one entry")
        ids = [e.output_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate output identities: {dupes}")


def write_manifest(manifest: Manifest, path) -> None:
    """Write a manifest as tab-separated text.

    Line 1 carries the split as ``# split: <tag>``; each data row is
    ``clean_path<TAB>noise_path<TAB>snr_db<TAB>seed``.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# split: {manifest.split}\n")
        fh.write("# columns: clean_path\tnoise_path\tsnr_db\tseed\n")
        for e in manifest.entries:
            fh.write(f"{e.clean_path}\t{e.noise_path}\t{e.snr_db:g}\t{e.seed}\n")


def read_manifest(path) -> Manifest:
    split = None
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# split:"):
                    split = line.split(":", 1)[1].strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"malformed manifest row: {line!r}")
            entries.append(
                MixtureSpec(parts[0], parts[1], float(parts[2]), int(parts[3]))
            )
    if split is None:
        raise ValueError(f"{path}: missing '# split:' header line")
    return Manifest(tuple(entries), split)


def crop_noise(noise: Waveform, target_len: int, rng: np.random.Generator):
    """Random contiguous crop to ``target_len`` samples.

    Returns (cropped, offset).  Consumes one draw from ``rng`` only when the
    noise is strictly longer than the target, so equal-length inputs leave
    the stream untouched.
    """
    if len(noise) < target_len:
        raise ValueError(
            f"noise ({len(noise)} samples) shorter than target ({target_len})"
        )
    slack = len(noise) - target_len
    offset = int(rng.integers(0, slack + 1)) if slack > 0 else 0
    cropped = Waveform(
        noise.samples[offset : offset + target_len], noise.sample_rate
    )
    return cropped, offset


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, rng):
    """Mix noise into clean at an exact energy-ratio SNR.

    The noise is cropped to the clean length (random position when longer)
    and scaled by alpha so that 10 log10(||clean||^2/||alpha noise||^2)
    equals ``snr_db``; returns (noisy, scaled_noise) so the caller keeps the
    ground-truth decomposition y = x + n.
    """
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: clean {clean.sample_rate}, noise {noise.sample_rate}"
        )
    cropped, _ = crop_noise(noise, len(clean), rng)
    clean_energy = float(np.dot(clean.samples, clean.samples))
    noise_energy = float(np.dot(cropped.samples, cropped.samples))
    if clean_energy <= 0.0:
        raise ValueError("clean signal is silent")
    if noise_energy <= 0.0:
        raise ValueError("noise signal is silent")
    alpha = math.sqrt(clean_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
    scaled = alpha * cropped.samples
    noisy = clean.samples + scaled
    return (
        Waveform(noisy, clean.sample_rate),
        Waveform(scaled, clean.sample_rate),
    )


def _edge_fade(x: np.ndarray, sample_rate: int, fade_s: float = 0.02) -> np.ndarray:
    fade = min(int(fade_s * sample_rate), x.size // 2)
    if fade < 1:
        return x
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    out = x.copy()
    out[:fade] *= ramp
    out[-fade:] *= ramp[::-1]
    return out


def _peak_normalize(x: np.ndarray, peak: float = 0.9) -> np.ndarray:
    top = np.max(np.abs(x))
    if top <= 0.0:
        raise ValueError("cannot normalize a silent signal")
    return np.clip(x * (peak / top), -peak, peak)


def synth_clean(
    duration_s: float,
    kind: str,
    rng: np.random.Generator,
    sample_rate: int = PIPELINE_SAMPLE_RATE,
) -> Waveform:
    """Deterministic band-limited test signal with peak exactly 0.9.

    Kinds: "harmonic" is a stack of partials on an integer fundamental in
    [80, 300] Hz with 1/k amplitude tilt (integer fundamentals keep the
    partials on the 1 Hz grid of whole-second analyses); "chirp" sweeps
    logarithmically between random low/high frequencies; "am_modulated" is
    a slow-AM tone.  All content stays below 7.3 kHz and edges are faded,
    so the signals round-trip the analysis transform cleanly.
    """
    if kind not in CLEAN_KINDS:
        raise ValueError(f"kind must be one of {CLEAN_KINDS}, got {kind!r}")
    n = int(round(duration_s * sample_rate))
    if n < 1:
        raise ValueError(f"duration {duration_s}s yields no samples")
    t = np.arange(n) / sample_rate
    if kind == "harmonic":
        f0 = int(rng.integers(80, 301))
        n_partials = min(40, int(0.45 * sample_rate / f0))
        x = np.zeros(n)
        for k in range(1, n_partials + 1):
            phase = rng.uniform(0.0, 2.0 * math.pi)
            x += (1.0 / k) * np.sin(2.0 * math.pi * k * f0 * t + phase)
    elif kind == "chirp":
        f_lo = rng.uniform(100.0, 300.0)
        f_hi = rng.uniform(1000.0, 3000.0)
        phase = rng.uniform(0.0, 360.0)
        x = _chirp(t, f0=f_lo, t1=t[-1] if n > 1 else 1.0, f1=f_hi,
                   method="logarithmic", phi=phase)
    else:
        f_c = rng.uniform(200.0, 1000.0)
        f_m = rng.uniform(2.0, 8.0)
        depth = 0.5
        carrier = np.sin(2.0 * math.pi * f_c * t + rng.uniform(0.0, 2.0 * math.pi))
        envelope = 1.0 - depth + depth * np.sin(
            2.0 * math.pi * f_m * t + rng.uniform(0.0, 2.0 * math.pi)
        )
        x = envelope * carrier
    x = _edge_fade(x, sample_rate)
    return Waveform(_peak_normalize(x), sample_rate)


def synth_noise(
    duration_s: float,
    kind: str,
    rng: np.random.Generator,
    sample_rate: int = PIPELINE_SAMPLE_RATE,
) -> Waveform:
    """Unit-RMS noise of the requested color.

    "white" is flat, "pink" has a 1/f power density (-3 dB per octave),
    "ar_babble" is white noise through a 4-pole resonant filter (bumps near
    500 and 1500 Hz) under a slow syllabic gain modulation.
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"kind must be one of {NOISE_KINDS}, got {kind!r}")
    n = int(round(duration_s * sample_rate))
    if n < 2:
        raise ValueError(f"duration {duration_s}s too short for noise synthesis")
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        # Shape a white spectrum by 1/sqrt(f): power density falls as 1/f.
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
        gains = np.zeros_like(freqs)
        gains[1:] = 1.0 / np.sqrt(freqs[1:])
        x = np.fft.irfft(spec * gains, n=n)
    else:
        poles = []
        for f_res, radius in ((500.0, 0.97), (1500.0, 0.95)):
            angle = 2.0 * math.pi * f_res / sample_rate
            poles.append(radius * np.exp(1j * angle))
            poles.append(radius * np.exp(-1j * angle))
        a = np.real(np.poly(poles))
        x = lfilter([1.0], a, rng.standard_normal(n))
        rate = rng.uniform(2.0, 6.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        t = np.arange(n) / sample_rate
        x = x * (0.3 + 0.7 * (0.5 + 0.5 * np.sin(2.0 * math.pi * rate * t + phase)))
    rms = math.sqrt(float(np.mean(x * x)))
    if rms <= 0.0:
        raise ValueError("degenerate noise draw with zero energy")
    return Waveform(x / rms, sample_rate)


def build_dataset(manifest: Manifest, out_dir) -> str:
    """Materialize a manifest as 16-bit clean/noisy WAV pairs plus an index.

    For each entry the per-entry seed drives the noise crop position (and
    nothing else), the mixture hits the requested SNR exactly, and pairs
    whose peak would clip the PCM range are rescaled jointly (preserving
    the SNR); one aggregate warning reports the pairs where more than 0.01%
    of samples would have clipped.  Returns the index path.

    Index format: ``# split:`` header, ``# columns:`` header, then one row
    per pair with id, clean file, noisy file, snr_db, seed, crop_offset,
    scale (tab-separated; file names relative to the index).
    """
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.tsv")
    rows = []
    clip_fracs = []
    for spec in manifest.entries:
        rng = np.random.default_rng(spec.seed)
        clean = wav_read(spec.clean_path)
        noise = wav_read(spec.noise_path)
        cropped, offset = crop_noise(noise, len(clean), rng)
        noisy, _ = mix_at_snr(clean, cropped, spec.snr_db, rng)
        peak = max(
            float(np.max(np.abs(clean.samples))),
            float(np.max(np.abs(noisy.samples))),
        )
        scale = 1.0
        if peak > _PCM_PEAK:
            would_clip = np.count_nonzero(
                np.abs(clean.samples) > 1.0
            ) + np.count_nonzero(np.abs(noisy.samples) > 1.0)
            frac = would_clip / (2.0 * len(clean))
            if frac > 1e-4:
                clip_fracs.append(frac)
            scale = _PCM_PEAK / peak
        uid = spec.output_id
        clean_name = f"{uid}_clean.wav"
        noisy_name = f"{uid}_noisy.wav"
        wav_write(
            os.path.join(out_dir, clean_name),
            Waveform(scale * clean.samples, clean.sample_rate),
        )
        wav_write(
            os.path.join(out_dir, noisy_name),
            Waveform(scale * noisy.samples, noisy.sample_rate),
        )
        rows.append(
            (uid, clean_name, noisy_name, spec.snr_db, spec.seed, offset, scale)
        )
    if clip_fracs:
        warnings.warn(
            f"{len(clip_fracs)} of {len(manifest.entries)} pairs would have "
            f"clipped (worst {100.0 * max(clip_fracs):.3f}% of samples); "
            "pairs rescaled jointly, SNR preserved",
            stacklevel=2,
        )
    with open(index_path, "w", encoding="utf-8") as fh:
        fh.write(f"# split: {manifest.split}\n")
        fh.write("# columns: " + "\t".join(_INDEX_COLUMNS) + "\n")
        for row in rows:
            uid, clean_name, noisy_name, snr_db, seed, offset, scale = row
            fh.write(
                f"{uid}\t{clean_name}\t{noisy_name}\t{snr_db:g}\t{seed}\t"
                f"{offset}\t{scale:.17g}\n"
            )
    return index_path


def synthesize_corpus(
    out_dir,
    n_train: int,
    n_test: int,
    snrs=(-5.0, 0.0, 5.0),
    seed: int = 0,
    duration_s: float = 0.5,
    sample_rate: int = PIPELINE_SAMPLE_RATE,
):
    """Generate a complete synthetic train/test corpus under ``out_dir``.

    Writes source material to ``sources/`` (one clean file per utterance,
    kinds cycling; one long noise file per color), manifests that cycle
    noise colors and SNRs across utterances, and materialized pairs under
    ``train/`` and ``test/``.  Everything derives from ``seed``, so a rerun
    reproduces the corpus byte for byte.  Returns the two index paths.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test utterance")
    src_dir = os.path.join(out_dir, "sources")
    os.makedirs(src_dir, exist_ok=True)

    noise_paths = {}
    noise_dur = max(2.0 * duration_s, duration_s + 0.5)
    for j, kind in enumerate(NOISE_KINDS):
        rng = np.random.default_rng([seed, 1, j])
        path = os.path.join(src_dir, f"noise_{kind}.wav")
        wav_write(path, synth_noise(noise_dur, kind, rng, sample_rate))
        noise_paths[kind] = path

    def _split(tag, count, base):
        entries = []
        for i in range(count):
            kind = CLEAN_KINDS[i % len(CLEAN_KINDS)]
            rng = np.random.default_rng([seed, 0, base + i])
            clean_path = os.path.join(src_dir, f"{tag}_clean_{i:04d}.wav")
            wav_write(clean_path, synth_clean(duration_s, kind, rng, sample_rate))
            noise_kind = NOISE_KINDS[i % len(NOISE_KINDS)]
            snr = float(snrs[i % len(snrs)])
            entries.append(
                MixtureSpec(
                    clean_path, noise_paths[noise_kind], snr, seed * 100_000 + base + i
                )
            )
        manifest = Manifest(tuple(entries), tag)
        write_manifest(manifest, os.path.join(out_dir, f"{tag}_manifest.tsv"))
        return build_dataset(manifest, os.path.join(out_dir, tag))

    train_index = _split("train", n_train, 0)
    test_index = _split("test", n_test, n_train)
    return train_index, test_index


def load_dataset(index_path):
    """Read a materialized corpus back as (id, clean, noisy) triples."""
    base = os.path.dirname(os.path.abspath(index_path))
    triples = []
    with open(index_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != len(_INDEX_COLUMNS):
                raise ValueError(f"malformed index row: {line!r}")
            uid, clean_name, noisy_name = parts[0], parts[1], parts[2]
            clean = wav_read(os.path.join(base, clean_name))
            noisy = wav_read(os.path.join(base, noisy_name))
            if len(clean) != len(noisy):
                raise ValueError(f"{uid}: clean/noisy length mismatch")
            triples.append((uid, clean, noisy))
    if not triples:
        raise ValueError(f"{index_path}: no data rows")
    return triples
