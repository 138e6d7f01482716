"""Command line entry points.

Exit codes: 0 success, 1 usage/config/input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import config as cfgmod
from . import data, dsp, metrics, training
from .model import UPITSeparator, separate
from .validation import atomic_write

log = logging.getLogger("cmcsep")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SNAPSHOT = "config.resolved.cfg"


class UsageError(Exception):
    pass


def _resolve(args) -> training.TrainConfig:
    overrides = [cfgmod.parse_override(s) for s in args.set]
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    return cfgmod.load_config(args.config, overrides)


def _out_dir(args, cfg) -> Path:
    return Path(args.out or os.environ.get("CMCSEP_OUT") or cfg.out_dir)


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    with atomic_write(path, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------- subcommands


def cmd_synth_data(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(_out_dir(args, cfg), args.force)
    counts = {"train": cfg.n_train, "validation": cfg.n_validation, "test": cfg.n_test}
    for split, n in counts.items():
        scfg = cfg.synth_config(split)
        manifest = data.write_synthetic_split(
            out, scfg, n, args.utterances_per_speaker, cfg.n_speakers, rng_seed=cfg.seed
        )
        log.info("%s: %d utterances from %d speakers, %d mixtures", split, len(manifest.entries), len(manifest.speakers), n)
    cfgmod.write_config(out / SNAPSHOT, cfg)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(_out_dir(args, cfg), args.force)
    if cfg.method == "upit":
        log.warning("method=upit is audio-only; video inputs are ignored")
    cfgmod.write_config(out / SNAPSHOT, cfg)
    train_set = training.load_split(cfg, "train", None if cfg.dataset != "synth" else cfg.n_train)
    val_set = training.load_split(cfg, "validation", None if cfg.dataset != "synth" else cfg.n_validation)
    run = training.train_upit_baseline if cfg.method == "upit" else training.train
    path = run(cfg, train_set, val_set, out_dir=out)
    log.info("best checkpoint: %s", path)
    return EXIT_OK


def _parse_labelled(items) -> list[tuple[str, Path]]:
    out = []
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).parent.name or Path(item).stem, item
        out.append((label, Path(path)))
    return out


def _test_split(cfg, model_cfg: training.TrainConfig | None = None):
    if model_cfg is not None and model_cfg.stft_config != cfg.stft_config:
        raise UsageError("checkpoint STFT settings differ from the evaluation config's stft_preset")
    return training.load_split(cfg, "test", None if cfg.dataset != "synth" else cfg.n_test)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(_out_dir(args, cfg), args.force)
    cfgmod.write_config(out / SNAPSHOT, cfg)
    checkpoints = _parse_labelled(args.checkpoint)
    for _, path in checkpoints:
        if not path.exists():
            raise UsageError(f"checkpoint not found: {path}")
    reports = []
    test = None
    if not args.no_mixture:
        test = _test_split(cfg)
        reports.append(metrics.evaluate_dataset(None, test, "Mixture"))
    for label, path in checkpoints:
        model, mcfg, _ = training.load_checkpoint(path, with_avc=False)
        test = _test_split(cfg, mcfg) if test is None else test
        reports.append(metrics.evaluate_dataset(model, test, label))
    if not reports:
        raise UsageError("nothing to evaluate: give --checkpoint or drop --no-mixture")
    for r in reports:
        r.to_csv(out / f"eval_{r.method.replace(' ', '_')}.csv")
    table = metrics.format_table(reports)
    with atomic_write(out / "results.txt", "w") as f:
        f.write(table)
    _write_json(out / "results.json", [{"method": r.method, "sdr_db": r.sdr_db, "stoi": r.stoi, "pesq": "not computed", "n_samples": r.n_samples} for r in reports])
    print(table, end="")
    return EXIT_OK


def cmd_separate(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(_out_dir(args, cfg), args.force)
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    model, mcfg, _ = training.load_checkpoint(path, with_avc=False)
    wav = dsp.read_wav(args.mixture, dsp.DEFAULT_SAMPLE_RATE)
    spec = dsp.stft(wav, mcfg.stft_config)
    videos = None
    n_out = mcfg.n_speakers
    if not isinstance(model, UPITSeparator):
        if not args.video:
            raise UsageError("audio-visual checkpoints need one --video per speaker")
        videos = []
        for v in args.video:
            clip = data.load_frames(Path(v))
            clip = data.halve_frame_rate(clip) if not args.no_halve else clip
            gap = abs(clip.n_frames / clip.frame_rate - wav.duration)
            if gap > args.tolerance:
                raise UsageError(f"{v}: video lasts {clip.n_frames / clip.frame_rate:.2f} s, audio {wav.duration:.2f} s")
            videos.append(clip)
        n_frames = min(c.n_frames for c in videos)
        videos = [data.VideoClip(c.frames[:n_frames], c.frame_rate, c.speaker_id) for c in videos]
        n_out = len(videos)
    estimates, _ = separate(model, spec, videos)
    for k, est in enumerate(estimates[:n_out]):
        dsp.write_wav(out / f"speaker{k}.wav", dsp.istft(est, len(wav)))
    cfgmod.write_config(out / SNAPSHOT, mcfg)
    return EXIT_OK


def cmd_analyze_correspondence(args) -> int:
    cfg = _resolve(args)
    if args.baseline and not args.checkpoint:
        raise UsageError("baseline analysis borrows the AVC block of a proposed-method --checkpoint")
    if not args.checkpoint:
        raise UsageError("--checkpoint (proposed method) is required")
    out = _prepare_out(_out_dir(args, cfg), args.force)
    cfgmod.write_config(out / SNAPSHOT, cfg)
    proposed, pcfg, _ = training.load_checkpoint(args.checkpoint)
    if getattr(proposed, "avc", None) is None:
        raise UsageError(f"{args.checkpoint} has no AVC block (was it trained with lambda > 0?)")
    test = _test_split(cfg, pcfg)
    hists = {"proposed": metrics.angle_histogram(proposed, test, "proposed", bin_width=args.bin_width)}
    if args.baseline:
        base, bcfg, _ = training.load_checkpoint(args.baseline)
        hists["baseline"] = metrics.angle_histogram(base, test, "baseline", avc_model=proposed, bin_width=args.bin_width)
    summary = {}
    for name, h in hists.items():
        h.to_csv(out / f"angles_{name}.csv")
        if not args.no_plot:
            try:
                h.plot(out / f"angles_{name}.png", f"{name}: positive vs negative pairs")
            except ImportError:
                log.warning("matplotlib not available; skipping plot")
        summary[name] = {
            "mean_positive_deg": h.mean_positive,
            "mean_negative_deg": h.mean_negative,
            "gap_deg": h.mean_negative - h.mean_positive,
            "n_positive": h.n_positive,
            "n_negative": h.n_negative,
        }
        print(f"{name}: positive {h.mean_positive:.1f} deg, negative {h.mean_negative:.1f} deg")
    _write_json(out / "angles_summary.json", summary)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", type=Path, help="output directory (default: $CMCSEP_OUT or out_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cmcsep", description="Audio-visual speech separation with a cross-modal correspondence loss")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic audio-visual corpus")
    s.add_argument("--utterances-per-speaker", type=int, default=4)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", parents=[common], help="train proposed / av_baseline / upit")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="SDR/STOI table over the test split")
    s.add_argument("--checkpoint", action="append", default=[], metavar="[LABEL=]PATH")
    s.add_argument("--no-mixture", action="store_true", help="omit the unprocessed Mixture row")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("separate", parents=[common], help="separate one mixture WAV")
    s.add_argument("--mixture", required=True, type=Path)
    s.add_argument("--video", action="append", default=[], type=Path, help="frame archive (.npz), one per speaker")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--no-halve", action="store_true", help="do not drop every other video frame")
    s.add_argument("--tolerance", type=float, default=0.5, help="allowed audio/video duration gap in seconds")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("analyze-correspondence", parents=[common], help="angle histograms of visual vs separated features")
    s.add_argument("--checkpoint", type=Path, help="proposed-method checkpoint")
    s.add_argument("--baseline", type=Path, help="checkpoint trained without CMC")
    s.add_argument("--bin-width", type=float, default=1.0)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_analyze_correspondence)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (training.TrainingError, training.CheckpointError, RuntimeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
