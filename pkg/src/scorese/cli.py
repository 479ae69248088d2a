"""Operator entry point tying the modules into reproducible workflows.

Subcommands: ``make-dataset`` (materialize or synthesize a corpus),
``train`` (fit a scorer on a materialized corpus), ``enhance`` (run the
reverse sampler or a direct predictor over noisy audio), ``evaluate``
(score enhanced output against references), and ``validate-sde`` (check
the closed-form noise kernel against Monte-Carlo simulation).

Configuration is a JSON file with optional sections ``seed``, ``sde``,
``stft``, ``loss``, ``sampler``, ``scorer``; unknown sections or keys are
rejected.  Every run writes a resolved-config snapshot next to its outputs
(``run_config.json``), and that snapshot is itself a valid ``--config``
input, so any run can be reproduced from its artifacts.  Human-readable
logging goes to stderr; machine-readable records go to files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .audio_data import (
    build_dataset,
    load_dataset,
    read_manifest,
    synthesize_corpus,
)
from .metrics import evaluate_corpus, si_sdr, spectral_mse
from .sampler import SamplerConfig, enhance, enhance_direct
from .score import NeuralScorer, OracleScore, ScorerConfig, load_checkpoint
from .sde import SdeParams, simulate_forward
from .spectral import ComplexSpectrogram, StftConfig, stft, wav_read, wav_write
from .training import LossConfig, TRAIN_MODES, train

_SECTION_TYPES = {
    "sde": SdeParams,
    "stft": StftConfig,
    "loss": LossConfig,
    "sampler": SamplerConfig,
    "scorer": ScorerConfig,
}

SNAPSHOT_NAME = "run_config.json"


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one command invocation."""

    seed: int = 0
    sde: SdeParams = SdeParams()
    stft: StftConfig = StftConfig()
    loss: LossConfig = LossConfig()
    sampler: SamplerConfig = SamplerConfig()
    scorer: ScorerConfig = ScorerConfig()


def _build_section(cls, data, name):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {unknown}")
    return cls(**data)


def load_config(path=None) -> RunConfig:
    """Parse a JSON config file; missing sections fall back to defaults.

    Accepts either a bare section mapping or a ``run_config.json`` snapshot
    (whose sections live under the ``config`` key).  Every section and key
    is validated; unknown names are errors, not silent passengers.
    """
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config root must be a JSON object")
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    allowed = {"seed"} | set(_SECTION_TYPES)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValueError(f"{path}: unknown config sections: {unknown}")
    kwargs = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ValueError(f"{path}: seed must be an integer")
        kwargs["seed"] = raw["seed"]
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ValueError(f"{path}: section {name!r} must be an object")
            kwargs[name] = _build_section(cls, raw[name], name)
    return RunConfig(**kwargs)


def write_snapshot(out_dir, command: str, cfg: RunConfig, args_record: dict) -> str:
    """Record the fully resolved run next to its outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, SNAPSHOT_NAME)
    payload = {
        "command": command,
        "config": {
            "seed": cfg.seed,
            **{name: asdict(getattr(cfg, name)) for name in _SECTION_TYPES},
        },
        "args": args_record,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _parse_alpha(text: str):
    """--alpha value: "ramp" or "const:<c>" with c in [0, 1]."""
    if text == "ramp":
        return "ramp", 0.0
    if text.startswith("const:"):
        try:
            value = float(text.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad --alpha value {text!r}: constant is not a number")
        return "constant", value
    raise ValueError(
        f"bad --alpha value {text!r}: expected 'ramp' or 'const:<c>'"
    )


def _resolve_index(data_path: str) -> str:
    if os.path.isdir(data_path):
        candidate = os.path.join(data_path, "index.tsv")
        if not os.path.exists(candidate):
            raise ValueError(f"{data_path}: no index.tsv in directory")
        return candidate
    return data_path


def _spectrogram_pairs(index_path, stft_cfg):
    """Materialized corpus -> (clean, noisy) spectrogram training pairs."""
    pairs = []
    for _, clean, noisy in load_dataset(index_path):
        pairs.append((stft(clean, stft_cfg), stft(noisy, stft_cfg)))
    return pairs


def cmd_make_dataset(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    if args.synthesize:
        train_index, test_index = synthesize_corpus(
            args.out,
            n_train=args.n_train,
            n_test=args.n_test,
            snrs=tuple(float(s) for s in args.snrs.split(",")),
            seed=seed,
            duration_s=args.duration,
        )
        _log(f"synthesized corpus: {train_index} and {test_index}")
        record = {
            "mode": "synthesize",
            "n_train": args.n_train,
            "n_test": args.n_test,
            "snrs": args.snrs,
            "duration": args.duration,
            "seed": seed,
        }
    else:
        if args.manifest is None:
            raise ValueError("make-dataset needs --manifest or --synthesize")
        manifest = read_manifest(args.manifest)
        index = build_dataset(manifest, args.out)
        _log(f"materialized {len(manifest.entries)} pairs: {index}")
        record = {"mode": "manifest", "manifest": os.path.abspath(args.manifest)}
    write_snapshot(args.out, "make-dataset", cfg, record)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    loss_cfg = cfg.loss
    if args.mode is not None:
        loss_cfg = replace(loss_cfg, mode=args.mode)
    if args.alpha is not None:
        schedule, constant = _parse_alpha(args.alpha)
        loss_cfg = replace(
            loss_cfg, alpha_schedule=schedule, alpha_constant=constant
        )
    if args.tweedie is not None:
        loss_cfg = replace(loss_cfg, tweedie_factor=args.tweedie)
    if args.steps is not None:
        loss_cfg = replace(loss_cfg, total_steps=args.steps)
    if args.lr is not None:
        loss_cfg = replace(loss_cfg, learning_rate=args.lr)
    if args.batch_size is not None:
        loss_cfg = replace(loss_cfg, batch_size=args.batch_size)
    cfg = replace(cfg, seed=seed, loss=loss_cfg)

    index = _resolve_index(args.data)
    dataset = _spectrogram_pairs(index, cfg.stft)
    _log(
        f"training mode={loss_cfg.mode} steps={loss_cfg.total_steps} "
        f"on {len(dataset)} utterances (seed {seed})"
    )
    model = NeuralScorer(cfg.scorer, cfg.sde, np.random.default_rng([seed, 0]))
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.tsv")
    checkpoint_path = os.path.join(args.out, "checkpoint.bin")
    result = train(
        dataset,
        model,
        loss_cfg,
        np.random.default_rng([seed, 1]),
        p=cfg.sde,
        log_path=log_path,
        checkpoint_path=checkpoint_path,
    )
    if result.records:
        first = result.records[0].total
        last = result.records[-1].total
        _log(f"loss: first {first:.6g}, last {last:.6g}")
    _log(f"checkpoint: {checkpoint_path}")
    write_snapshot(
        args.out,
        "train",
        cfg,
        {"data": os.path.abspath(index), "steps": loss_cfg.total_steps},
    )
    return 0


def _gather_noisy_inputs(input_path: str):
    """Input file or directory -> list of (noisy_path, clean_path_or_None)."""
    if os.path.isdir(input_path):
        out = []
        for name in sorted(os.listdir(input_path)):
            if not name.endswith(".wav") or name.endswith("_clean.wav"):
                continue
            if name.endswith("_enhanced.wav"):
                continue
            noisy = os.path.join(input_path, name)
            stem = name[: -len(".wav")]
            if stem.endswith("_noisy"):
                stem = stem[: -len("_noisy")]
            clean = os.path.join(input_path, f"{stem}_clean.wav")
            out.append((noisy, clean if os.path.exists(clean) else None))
        if not out:
            raise ValueError(f"{input_path}: no noisy wav files found")
        return out
    return [(input_path, None)]


def _output_name(noisy_path: str) -> str:
    stem = os.path.splitext(os.path.basename(noisy_path))[0]
    if stem.endswith("_noisy"):
        stem = stem[: -len("_noisy")]
    return f"{stem}_enhanced.wav"


def cmd_enhance(args) -> int:
    cfg = load_config(args.config)
    sampler_cfg = cfg.sampler
    if args.steps is not None:
        sampler_cfg = replace(sampler_cfg, n_steps=args.steps)
    if args.correctors is not None:
        sampler_cfg = replace(
            sampler_cfg, corrector_steps_per_predictor=args.correctors
        )
    if args.snr is not None:
        sampler_cfg = replace(sampler_cfg, snr=args.snr)
    if args.no_final_tweedie:
        sampler_cfg = replace(sampler_cfg, final_tweedie=False)
    if args.tweedie is not None:
        sampler_cfg = replace(sampler_cfg, tweedie_factor=args.tweedie)
    seed = args.seed if args.seed is not None else cfg.seed
    cfg = replace(cfg, seed=seed, sampler=sampler_cfg)

    if (args.checkpoint is None) == (not args.oracle):
        raise ValueError("enhance needs exactly one of --checkpoint or --oracle")

    direct_model = None
    model = None
    p = cfg.sde
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.model
        p = model.sde
        if ckpt.ema_params is not None and not args.no_ema:
            model.theta[:] = ckpt.ema_params
        mode = ckpt.extra.get("mode")
        if mode == "supervised_direct":
            direct_model = model
        elif sampler_cfg.tweedie_factor == "auto":
            # score-only training regresses onto the kernel score itself
            # (exact pairing: full); the weighted objective teaches the
            # half-coefficient correction, so honor the trained factor
            factor = "full" if mode == "score_only" else ckpt.extra.get(
                "tweedie_factor", "full"
            )
            sampler_cfg = replace(sampler_cfg, tweedie_factor=factor)
            cfg = replace(cfg, sampler=sampler_cfg)
        _log(f"loaded checkpoint step {ckpt.step} (mode {mode or 'unknown'})")

    inputs = _gather_noisy_inputs(args.input)
    if args.clean is not None:
        if len(inputs) != 1:
            raise ValueError("--clean applies only to a single input file")
        inputs = [(inputs[0][0], args.clean)]

    os.makedirs(args.out, exist_ok=True)
    for i, (noisy_path, clean_path) in enumerate(inputs):
        noisy = wav_read(noisy_path)
        clean = wav_read(clean_path) if clean_path is not None else None
        per_file = replace(sampler_cfg, seed=seed + i)
        if args.oracle:
            if clean is None:
                raise ValueError(
                    f"{noisy_path}: oracle enhancement needs a clean reference "
                    "(--clean or a matching *_clean.wav)"
                )
            file_model = OracleScore(
                stft(clean, cfg.stft), p, args.score_convention
            )
        else:
            file_model = model
        progress = None
        if args.verbose:
            name = os.path.basename(noisy_path)
            progress = lambda k, t, r, _n=name: _log(
                f"progress\t{_n}\t{k}\t{t:.6f}\t{r:.6g}"
            )
        if direct_model is not None:
            out_wav = enhance_direct(noisy, direct_model, cfg.stft)
        else:
            out_wav = enhance(noisy, file_model, p, per_file, cfg.stft, progress)
        out_path = os.path.join(args.out, _output_name(noisy_path))
        wav_write(out_path, out_wav)
        if clean is not None:
            score = si_sdr(out_wav, clean)
            _log(f"enhanced {noisy_path} -> {out_path} si_sdr={score:.2f} dB")
        else:
            _log(f"enhanced {noisy_path} -> {out_path}")
    write_snapshot(
        args.out,
        "enhance",
        cfg,
        {
            "input": os.path.abspath(args.input),
            "checkpoint": args.checkpoint and os.path.abspath(args.checkpoint),
            "oracle": bool(args.oracle),
            "score_convention": args.score_convention,
            "n_inputs": len(inputs),
        },
    )
    return 0


def _reference_for(est_name: str, reference_dir: str):
    stem = os.path.splitext(est_name)[0]
    for suffix in ("_enhanced", "_noisy", "_clean"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    for candidate in (f"{stem}_clean.wav", f"{stem}.wav"):
        path = os.path.join(reference_dir, candidate)
        if os.path.exists(path):
            return path
    return None


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    names = [
        n for n in sorted(os.listdir(args.estimates)) if n.endswith(".wav")
    ]
    if not names:
        raise ValueError(f"{args.estimates}: no wav files to evaluate")
    pairs = []
    for name in names:
        ref = _reference_for(name, args.references)
        if ref is None:
            raise ValueError(f"{name}: no reference found in {args.references}")
        est_wav = wav_read(os.path.join(args.estimates, name))
        ref_wav = wav_read(ref)
        pairs.append((os.path.splitext(name)[0], est_wav, ref_wav))
    metric_fns = {
        "si_sdr": si_sdr,
        "spectral_mse": lambda e, r: spectral_mse(
            stft(e, cfg.stft), stft(r, cfg.stft)
        ),
    }
    report = evaluate_corpus(pairs, metric_fns)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "eval_report.tsv")
    report.write_report(report_path)
    _log(report.summary_table())
    _log(f"report: {report_path}")
    write_snapshot(
        args.out,
        "evaluate",
        cfg,
        {
            "estimates": os.path.abspath(args.estimates),
            "references": os.path.abspath(args.references),
            "n_pairs": len(pairs),
        },
    )
    return 0


def cmd_validate_sde(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    p = cfg.sde
    times = tuple(float(t) for t in args.times.split(","))
    f_bins, k_frames = (int(v) for v in args.bins.split(","))
    rng = np.random.default_rng([seed, 2])
    x0 = ComplexSpectrogram(
        rng.standard_normal((f_bins, k_frames))
        + 1j * rng.standard_normal((f_bins, k_frames)),
        1000,
    )
    y = ComplexSpectrogram(
        x0.bins
        + 0.3
        * (
            rng.standard_normal((f_bins, k_frames))
            + 1j * rng.standard_normal((f_bins, k_frames))
        ),
        1000,
    )
    _log(
        f"simulating {args.paths} paths x {args.steps} steps on "
        f"{f_bins}x{k_frames} bins"
    )
    moments = simulate_forward(
        x0, y, p, n_steps=args.steps, n_paths=args.paths,
        rng=np.random.default_rng([seed, 3]), checkpoints=times,
    )
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "sde_report.tsv")
    moments.write_report(report_path)
    write_snapshot(
        args.out,
        "validate-sde",
        cfg,
        {"paths": args.paths, "steps": args.steps, "times": args.times,
         "bins": args.bins, "seed": seed},
    )
    failures = []
    for record in moments.records:
        bound = moments.mean_error_bound(record, n_std=3.0)
        _log(
            f"t={record.t:g}: var rel err {record.pooled_var_error:.4f}, "
            f"max mean dev {record.max_mean_deviation:.5f} (bound {bound:.5f})"
        )
        if record.pooled_var_error > 0.02:
            failures.append(
                f"t={record.t:g}: variance error {record.pooled_var_error:.4f} > 2%"
            )
        if record.max_mean_deviation > bound:
            failures.append(
                f"t={record.t:g}: mean deviation {record.max_mean_deviation:.5f} "
                f"exceeds {bound:.5f}"
            )
    _log(f"report: {report_path}")
    if failures:
        for f in failures:
            _log(f"FAIL {f}")
        return 1
    _log("kernel validation passed")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scorese",
        description=(
            "Diffusion-based speech enhancement toolkit. All commands accept "
            "--config (JSON; sections seed/sde/stft/loss/sampler/scorer, "
            "unknown keys rejected) and write a run_config.json snapshot "
            "next to their outputs."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser(
        "make-dataset", help="materialize a manifest or synthesize a corpus"
    )
    mk.add_argument("--out", required=True, help="output directory")
    mk.add_argument("--config", default=None, help="JSON config file")
    mk.add_argument("--manifest", default=None, help="mixture manifest to build")
    mk.add_argument(
        "--synthesize", action="store_true",
        help="generate sources and manifests before building",
    )
    mk.add_argument("--n-train", type=int, default=100, help="default 100")
    mk.add_argument("--n-test", type=int, default=20, help="default 20")
    mk.add_argument(
        "--snrs", default="-5,0,5", help="comma-separated dB list, default -5,0,5"
    )
    mk.add_argument(
        "--duration", type=float, default=0.5, help="utterance seconds, default 0.5"
    )
    mk.add_argument("--seed", type=int, default=None, help="master seed")
    mk.set_defaults(func=cmd_make_dataset)

    tr = sub.add_parser("train", help="train a scorer on a materialized corpus")
    tr.add_argument("--data", required=True, help="corpus dir or index.tsv")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--config", default=None, help="JSON config file")
    tr.add_argument(
        "--mode", choices=TRAIN_MODES, default=None,
        help="training objective (default from config: weighted)",
    )
    tr.add_argument(
        "--alpha", default=None,
        help="'ramp' or 'const:<c>' with c in [0,1] (default ramp)",
    )
    tr.add_argument(
        "--tweedie", choices=("half", "full"), default=None,
        help="supervised-term posterior coefficient (default half)",
    )
    tr.add_argument("--steps", type=int, default=None, help="training steps")
    tr.add_argument("--lr", type=float, default=None, help="learning rate")
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None, help="master seed")
    tr.set_defaults(func=cmd_train)

    en = sub.add_parser("enhance", help="enhance noisy wav files")
    en.add_argument("--input", required=True, help="noisy wav file or directory")
    en.add_argument("--out", required=True, help="output directory")
    en.add_argument("--config", default=None, help="JSON config file")
    en.add_argument("--checkpoint", default=None, help="trained model file")
    en.add_argument(
        "--oracle", action="store_true",
        help="use the exact kernel score (requires clean references)",
    )
    en.add_argument(
        "--clean", default=None, help="clean reference for a single input file"
    )
    en.add_argument(
        "--score-convention", choices=("conjugate", "real-view"),
        default="conjugate",
        help="score scaling convention for --oracle and factor resolution",
    )
    en.add_argument("--steps", type=int, default=None, help="sampler steps")
    en.add_argument("--correctors", type=int, default=None)
    en.add_argument("--snr", type=float, default=None, help="corrector ratio")
    en.add_argument(
        "--tweedie", choices=("auto", "half", "full"), default=None,
        help="final denoise coefficient (default auto)",
    )
    en.add_argument("--no-final-tweedie", action="store_true")
    en.add_argument(
        "--no-ema", action="store_true", help="use raw weights, not the EMA"
    )
    en.add_argument("--seed", type=int, default=None)
    en.add_argument(
        "--verbose", action="store_true",
        help="stream per-step progress records to stderr",
    )
    en.set_defaults(func=cmd_enhance)

    ev = sub.add_parser("evaluate", help="score estimates against references")
    ev.add_argument("--estimates", required=True, help="directory of wav files")
    ev.add_argument("--references", required=True, help="directory of references")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--config", default=None, help="JSON config file")
    ev.set_defaults(func=cmd_evaluate)

    va = sub.add_parser(
        "validate-sde", help="Monte-Carlo check of the closed-form kernel"
    )
    va.add_argument("--out", required=True, help="output directory")
    va.add_argument("--config", default=None, help="JSON config file")
    va.add_argument("--paths", type=int, default=2000, help="default 2000")
    va.add_argument("--steps", type=int, default=400, help="default 400")
    va.add_argument(
        "--times", default="0.25,0.5,1.0", help="checkpoint times, default 0.25,0.5,1.0"
    )
    va.add_argument("--bins", default="4,4", help="F,K grid size, default 4,4")
    va.add_argument("--seed", type=int, default=None)
    va.set_defaults(func=cmd_validate_sde)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
