"""Score-based diffusion speech enhancement, verifiable at desk scale.

The package is organized around one pipeline: waveforms enter through the
compressed STFT front end (``spectral``), a mean-reverting diffusion with
a closed-form Gaussian kernel defines the corruption process (``sde``),
score models exact or learned live in ``score``, training objectives and
the optimization loop in ``training``, reverse-time Predictor-Corrector
sampling in ``sampler``, corpus synthesis in ``audio_data``, evaluation in
``metrics``, and the reproducible command-line workflows in ``cli``.
"""

from .audio_data import (
    Manifest,
    MixtureSpec,
    build_dataset,
    load_dataset,
    mix_at_snr,
    read_manifest,
    synth_clean,
    synth_noise,
    synthesize_corpus,
    write_manifest,
)
from .metrics import EvalReport, MetricSummary, evaluate_corpus, si_sdr, spectral_mse
from .sampler import SamplerConfig, enhance, enhance_direct
from .score import (
    Checkpoint,
    NeuralScorer,
    OracleScore,
    ScorerConfig,
    load_checkpoint,
    save_checkpoint,
)
from .sde import (
    SdeParams,
    diffusion_coeff,
    drift,
    kernel_mean,
    kernel_std,
    kernel_var,
    sample_perturbed,
    simulate_forward,
)
from .spectral import (
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    istft,
    stft,
    wav_read,
    wav_write,
)
from .training import (
    LossConfig,
    TrainResult,
    alpha_weight,
    score_matching_loss,
    supervised_loss,
    train,
    tweedie_estimate,
    weighted_loss,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ComplexSpectrogram",
    "EvalReport",
    "LossConfig",
    "Manifest",
    "MetricSummary",
    "MixtureSpec",
    "NeuralScorer",
    "OracleScore",
    "SamplerConfig",
    "ScorerConfig",
    "SdeParams",
    "StftConfig",
    "TrainResult",
    "Waveform",
    "alpha_weight",
    "build_dataset",
    "diffusion_coeff",
    "drift",
    "enhance",
    "enhance_direct",
    "evaluate_corpus",
    "istft",
    "kernel_mean",
    "kernel_std",
    "kernel_var",
    "load_checkpoint",
    "load_dataset",
    "mix_at_snr",
    "read_manifest",
    "sample_perturbed",
    "save_checkpoint",
    "score_matching_loss",
    "si_sdr",
    "simulate_forward",
    "spectral_mse",
    "stft",
    "supervised_loss",
    "synth_clean",
    "synth_noise",
    "synthesize_corpus",
    "train",
    "tweedie_estimate",
    "wav_read",
    "wav_write",
    "weighted_loss",
    "write_manifest",
]
