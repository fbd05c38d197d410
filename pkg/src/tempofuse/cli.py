"""Command-line interface: ``tempofuse <subcommand> ...``.

Option precedence is command-line flag, then the ``--config`` JSON file, then
the built-in defaults shown in ``--help``. Failures exit nonzero with a single
``tempofuse: error: <Kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import features as F
from .audio_io import load_wav, wav_info
from .data import (DatasetError, DatasetManifest, SplitSpec, SyntheticSpec, ensure_dir, split_dataset,
                   synth_click_dataset)
from .evaluation import confusion_matrix, evaluate, export_report
from .models import BackboneConfig, ModelConfig, TempoBranchConfig, load_checkpoint, save_checkpoint
from .pipeline import (FeatureCache, chunk_dataset, default_cache_dir, extract_dataset, iter_records,
                       load_partition, model_inputs, song_tempo)
from .training import EpochReport, TrainConfig, train

MODES = ("mel_only", "ftg_only", "actg_only", "early", "late")
TRAIN_DEFAULTS = {"batch_size": 256, "epochs": 200, "lr": 0.005, "dropout": 0.5, "seed": 0,
                  "patience": 20, "target_accuracy": None}
BACKBONE_FLAGS = ("blocks", "channels")
TEMPO_FLAGS = ("branch_channels", "embed_channels", "pooled_len")


class CliError(Exception):
    """Inconsistent or missing command-line input."""


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def parse_segment(text: str):
    if text == "full":
        return None
    try:
        start, end = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"segment must be START:END seconds or 'full', got {text!r}")
    if not 0 <= start < end:
        raise argparse.ArgumentTypeError(f"segment start must be >= 0 and before end, got {text!r}")
    return (start, end)


def _segment_arg(text: str) -> str:
    parse_segment(text)
    return text


def parse_ratios(text: str) -> tuple[int, ...]:
    try:
        ratios = tuple(int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must look like 8:1:1, got {text!r}")
    if len(ratios) != 3 or min(ratios) < 1:
        raise argparse.ArgumentTypeError(f"need three positive ratios, got {text!r}")
    return ratios


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc


def _pick(flag, section: dict, key: str, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _manifest(args) -> DatasetManifest:
    return DatasetManifest.read_csv(args.manifest)


def _cache(args, cfg: F.FeatureConfig | None = None) -> FeatureCache:
    return FeatureCache(args.cache or default_cache_dir(), cfg)


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json(Path(args.spec).read_text()) if args.spec else SyntheticSpec()
    if args.songs_per_class is not None:
        spec.songs_per_class = args.songs_per_class
    if args.duration is not None:
        spec.duration = args.duration
    if args.seed is not None:
        spec.seed = args.seed
    out = ensure_dir(args.out)
    manifest = synth_click_dataset(spec, out, jobs=args.jobs)
    manifest.write_csv(out / "manifest.csv")
    (out / "spec.json").write_text(spec.to_json() + "\n")
    print(f"wrote {len(manifest)} songs in {len(manifest.classes)} classes; manifest {out / 'manifest.csv'}")
    return 0


def cmd_split(args) -> int:
    split = split_dataset(_manifest(args), args.ratios, args.seed)
    split.write_csv(args.out)
    counts = {p: len(split.songs(p)) for p in ("train", "valid", "test")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def feature_config_from(args, section: dict) -> F.FeatureConfig:
    text = _pick(args.segment, section, "segment", "15:45")
    seg = None if text is None else parse_segment(text) if isinstance(text, str) else tuple(text)
    return F.FeatureConfig(
        segment=seg,
        mel_full=bool(_pick(args.mel_full or None, section, "mel_full", False)),
        n_mels=_pick(args.n_mels, section, "n_mels", 128),
        window_len=_pick(args.window, section, "window_len", 2048),
        hop=_pick(args.hop, section, "hop", 512),
        tempo_window=_pick(args.tempo_window, section, "tempo_window", 384),
        chunk_len=_pick(args.chunk_len, section, "chunk_len", 200),
    )


def cmd_extract(args) -> int:
    conf = _load_config(args.config)
    cfg = feature_config_from(args, conf.get("features", {}))
    manifest = _manifest(args)
    if cfg.segment is not None:
        short = [e.song_id for e in manifest.entries
                 if wav_info(manifest.audio_path(e)).duration < cfg.min_duration]
        if short:
            raise DatasetError(f"shorter than the {cfg.min_duration:g}s analysis window: {', '.join(short)}")
    cache = _cache(args, cfg)
    computed, skipped = extract_dataset(manifest, cache, jobs=args.jobs)
    print(f"computed={computed} skipped={skipped} cache={cache.dir}")
    return 0


def cmd_tempo(args) -> int:
    manifest = _manifest(args)
    cache = _cache(args)
    rows = []
    for e in manifest.entries:
        rec = cache.load(e.song_id)
        rows.append((e.song_id, e.class_name, song_tempo(rec, bpm_min=args.bpm_min, bpm_max=args.bpm_max)))
    out = Path(args.out)
    export_report(out.parent if out.suffix else out, tempo_rows=rows)
    target = (out.parent if out.suffix else out) / "tempo_per_song.csv"
    if out.suffix and out != target:
        target.replace(out)
        target = out
    print(f"wrote {len(rows)} tempi to {target}")
    return 0


def _check_mode_flags(args, mode: str) -> None:
    given = lambda names: [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is not None]
    if mode == "mel_only" and given(TEMPO_FLAGS):
        raise CliError(f"--mode mel_only has no tempo branch; remove {', '.join(given(TEMPO_FLAGS))}")
    if mode in ("ftg_only", "actg_only") and given(BACKBONE_FLAGS):
        raise CliError(f"--mode {mode} has no Mel backbone; remove {', '.join(given(BACKBONE_FLAGS))}")


def model_config_from(args, section: dict, kind: str) -> ModelConfig:
    bb = dict(section.get("backbone", {}))
    tc = dict(section.get("tempo", {}))
    if args.blocks is not None:
        bb["n_blocks"] = args.blocks
    if args.channels is not None:
        bb["channels"] = args.channels
    if args.hidden is not None:
        bb["hidden"] = args.hidden
    for name in TEMPO_FLAGS:
        if getattr(args, name) is not None:
            tc[name] = getattr(args, name)
    return ModelConfig(kind, backbone=BackboneConfig(**bb), tempo=TempoBranchConfig(**tc))


def cmd_train(args) -> int:
    conf = _load_config(args.config)
    tconf = conf.get("train", {})
    mode = _pick(args.mode, tconf, "mode", "late")
    if mode not in MODES:
        raise CliError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    _check_mode_flags(args, mode)
    patience = _pick(args.patience, tconf, "patience", TRAIN_DEFAULTS["patience"])
    cfg = TrainConfig(
        batch_size=_pick(args.batch_size, tconf, "batch_size", TRAIN_DEFAULTS["batch_size"]),
        epochs=_pick(args.epochs, tconf, "epochs", TRAIN_DEFAULTS["epochs"]),
        lr=_pick(args.lr, tconf, "lr", TRAIN_DEFAULTS["lr"]),
        dropout=_pick(args.dropout, tconf, "dropout", TRAIN_DEFAULTS["dropout"]),
        seed=_pick(args.seed, tconf, "seed", TRAIN_DEFAULTS["seed"]),
        kind=mode,
        patience=patience if patience else None,
        target_accuracy=_pick(args.target_accuracy, tconf, "target_accuracy", None),
    )
    model_cfg = model_config_from(args, conf.get("model", {}), cfg.kind)
    manifest = _manifest(args)
    out = ensure_dir(args.out)
    if args.split:
        split = SplitSpec.read_csv(args.split)
    else:
        split = split_dataset(manifest, (8, 1, 1), cfg.seed)
        split.write_csv(out / "split.csv")
    cache = _cache(args)

    def log(r: EpochReport) -> None:
        _stderr(f"epoch {r.epoch:3d} loss {r.train_loss:.4f} val_chunk {r.val_chunk_acc:.3f} "
                f"val_song {r.val_song_acc:.3f} ({r.seconds:.1f}s)")

    result = train(manifest, split, cache, cfg, model_cfg, log=log)
    save_checkpoint(result.checkpoint, out / "checkpoint.tfck")
    export_report(out, reports=result.reports)
    print(f"best_epoch={result.best_epoch} checkpoint={out / 'checkpoint.tfck'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _manifest(args)
    split = SplitSpec.read_csv(args.split)
    if not split.songs(args.partition):
        raise DatasetError(f"empty split: partition {args.partition!r} has no songs")
    cache = _cache(args, ckpt.feature_config)
    if set(ckpt.class_names) != set(manifest.classes) or len(ckpt.class_names) != len(manifest.classes):
        raise CliError("checkpoint class table does not match the manifest classes")
    ds = load_partition(manifest, split, args.partition, cache, ckpt.stats, model_inputs(ckpt.model.kind))
    ev = evaluate(ckpt.model, ds)
    n = len(ckpt.class_names)
    cm = confusion_matrix(ds.song_labels, ev.song_preds, n, ckpt.class_names)
    per_class = [(ckpt.class_names[c], *ev.per_class.get(c, (float("nan"), float("nan")))) for c in range(n)]
    first = cache.load(ds.song_ids[0])
    images = {f"sample_{name}": first.matrix(kind) for name, kind in
              (("mel", "mel"), ("fourier", "fourier_tg"), ("autocorrelation", "ac_tg"))}
    out = ensure_dir(args.out)
    export_report(out, confusion=cm, per_class=per_class, images=images)
    summary = {"partition": args.partition, "songs": ds.n_songs, "chunks": len(ds),
               "chunk_accuracy": ev.chunk_accuracy, "song_accuracy": ev.song_accuracy}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"chunk_acc={ev.chunk_accuracy:.4f} song_acc={ev.song_accuracy:.4f} songs={ds.n_songs}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    clip = load_wav(args.wav)
    fc = ckpt.feature_config
    if fc.segment is not None and clip.duration < fc.min_duration:
        raise DatasetError(f"{args.wav}: {clip.duration:.2f}s is shorter than the "
                           f"{fc.min_duration:g}s analysis window")
    rec = F.extract_record(clip, Path(args.wav).stem, 0, fc)
    ds = chunk_dataset([rec], ckpt.stats, model_inputs(ckpt.model.kind), fc.chunk_len)
    ev = evaluate(ckpt.model, ds)
    scores = ev.scores.mean(axis=0)
    result = {
        "file": str(args.wav),
        "prediction": ckpt.class_names[int(ev.song_preds[0])],
        "scores": {name: round(float(s), 6) for name, s in zip(ckpt.class_names, scores)},
        "chunk_votes": [ckpt.class_names[int(p)] for p in ev.chunk_preds],
    }
    print(json.dumps(result, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite, summarize

    def progress(r):
        if args.verbose:
            _stderr(f"{r.name:28s} seed {r.seed:3d} max rel err {r.report.max_rel_error:.2e}")

    results = run_suite(range(args.seed, args.seed + args.seeds), tolerance=args.tolerance,
                        progress=progress)
    worst = summarize(results)
    for name, err in worst.items():
        print(f"{name:28s} {err:.3e} {'PASS' if err < args.tolerance else 'FAIL'}")
    failed = [r for r in results if not r.report.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed over {args.seeds} seeds "
          f"(tolerance {args.tolerance:g})")
    return 1 if failed else 0


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempofuse",
                                description="EDM subgenre classification from Mel-spectrograms and tempograms.")
    sub = p.add_subparsers(dest="command", required=True)

    def cache_arg(sp):
        sp.add_argument("--cache", help="feature cache directory (default: $TEMPOFUSE_CACHE or .tempofuse_cache)")

    sp = sub.add_parser("synth", help="generate a synthetic click-track dataset")
    sp.add_argument("--out", required=True, help="output directory (class subfolders + manifest.csv)")
    sp.add_argument("--spec", help="SyntheticSpec JSON (default: 5 classes at 90/110/128/140/170 BPM)")
    sp.add_argument("--songs-per-class", type=int, help="override songs per class (default: 100)")
    sp.add_argument("--duration", type=float, help="override song length in seconds (default: 30)")
    sp.add_argument("--seed", type=int, help="override the generator seed (default: 0)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("split", help="stratified train/valid/test split")
    sp.add_argument("--manifest", required=True, help="manifest CSV")
    sp.add_argument("--out", required=True, help="split CSV to write")
    sp.add_argument("--ratios", type=parse_ratios, default=(8, 1, 1), help="train:valid:test (default: 8:1:1)")
    sp.add_argument("--seed", type=int, default=0, help="shuffle seed (default: 0)")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("extract", help="compute and cache Mel-spectrogram and tempograms per song")
    sp.add_argument("--manifest", required=True, help="manifest CSV")
    cache_arg(sp)
    sp.add_argument("--config", help="JSON config; its 'features' section sets defaults")
    sp.add_argument("--segment", type=_segment_arg,
                    help="analysis window START:END seconds or 'full' (default: 15:45)")
    sp.add_argument("--mel-full", action="store_true",
                    help="Mel-spectrogram over the whole clip, tempograms over --segment")
    sp.add_argument("--n-mels", type=int, help="Mel bands (default: 128)")
    sp.add_argument("--window", type=int, help="STFT Hamming window length (default: 2048)")
    sp.add_argument("--hop", type=int, help="STFT hop (default: 512)")
    sp.add_argument("--tempo-window", type=int, help="tempogram window in novelty frames (default: 384)")
    sp.add_argument("--chunk-len", type=int, help="frames per chunk (default: 200)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("tempo", help="global tempo of every song from its cached Fourier tempogram")
    sp.add_argument("--manifest", required=True, help="manifest CSV")
    cache_arg(sp)
    sp.add_argument("--out", required=True, help="output CSV path or directory")
    sp.add_argument("--bpm-min", type=float, default=60.0, help="lowest tempo considered (default: 60)")
    sp.add_argument("--bpm-max", type=float, default=200.0, help="highest tempo considered (default: 200)")
    sp.set_defaults(func=cmd_tempo)

    sp = sub.add_parser("train", help="train one of the five model kinds")
    sp.add_argument("--manifest", required=True, help="manifest CSV")
    sp.add_argument("--split", help="split CSV (default: fresh 8:1:1 split with --seed, saved to --out)")
    cache_arg(sp)
    sp.add_argument("--out", required=True, help="directory for checkpoint.tfck and epochs.csv")
    sp.add_argument("--config", help="JSON config with 'train' and 'model' sections")
    sp.add_argument("--mode", choices=MODES, help="model kind (default: late)")
    sp.add_argument("--epochs", type=int, help="maximum epochs (default: 200)")
    sp.add_argument("--batch-size", type=int, help="chunks per minibatch (default: 256)")
    sp.add_argument("--lr", type=float, help="Adam learning rate (default: 0.005)")
    sp.add_argument("--dropout", type=float, help="dropout before the last dense layer (default: 0.5)")
    sp.add_argument("--seed", type=int, help="seed for init, shuffling and dropout (default: 0)")
    sp.add_argument("--patience", type=int,
                    help="early-stop after this many epochs without validation gain; 0 disables (default: 20)")
    sp.add_argument("--target-accuracy", type=float,
                    help="stop once validation song accuracy reaches this value (default: off)")
    sp.add_argument("--blocks", type=int, help="residual blocks in the Mel backbone (default: 7)")
    sp.add_argument("--channels", type=int, help="channels per residual block (default: 128)")
    sp.add_argument("--hidden", type=int, help="dense hidden width (default: 512)")
    sp.add_argument("--branch-channels", type=int, help="channels of each tempo 1-D conv (default: 64)")
    sp.add_argument("--embed-channels", type=int, help="tempo embedding width (default: 64)")
    sp.add_argument("--pooled-len", type=int, help="time bins after tempo mean pooling (default: 8)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="chunk/song accuracy, confusion matrix and per-class CSVs")
    sp.add_argument("--checkpoint", required=True, help="checkpoint.tfck")
    sp.add_argument("--manifest", required=True, help="manifest CSV")
    sp.add_argument("--split", required=True, help="split CSV")
    sp.add_argument("--partition", default="test", choices=("train", "valid", "test"),
                    help="partition to evaluate (default: test)")
    cache_arg(sp)
    sp.add_argument("--out", required=True, help="report directory")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="classify one WAV file")
    sp.add_argument("--checkpoint", required=True, help="checkpoint.tfck")
    sp.add_argument("wav", help="audio file")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer and model kind")
    sp.add_argument("--seeds", type=int, default=50, help="number of random seeds (default: 50)")
    sp.add_argument("--seed", type=int, default=0, help="first seed (default: 0)")
    sp.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default: 1e-4)")
    sp.add_argument("--verbose", action="store_true", help="print every check")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DatasetError, F.FeatureFileError, ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        _stderr(f"tempofuse: error: {type(exc).__name__}: {msg}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
