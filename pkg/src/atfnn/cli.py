"""Command line: extract, train, eval, ablate, dump-attention, gradcheck.

Every command is deterministic under (config, seed). Run configuration is
a JSON file; the --seed/--jobs/--out flags override the corresponding
config entries. Relative paths inside a config resolve against the config
file's directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .evaluate import (
    INDEX_FIELDS,
    FeatureStore,
    FoldError,
    TrainSettings,
    build_report,
    load_feature_cache,
    make_folds,
    metrics,
    read_manifest,
    run_crossval,
    score_fold,
    FoldResult,
)
from .features import N_MELS, SEG_FRAMES, load_wav, log_mel_spectrogram, mel_filterbank, segment
from .gradsuite import run_suite
from .model import VARIANTS, AtfnnModel, ModelConfig, load_model, save_model
from . import autodiff as ad

ABLATION_FLAGS = {
    # variant -> (attention, f-encoder, t-encoder) presence
    "AFNN": (True, True, False),
    "ATNN": (True, False, True),
    "TFNN": (False, True, True),
    "ATFNN": (True, True, True),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    explicit_classes: bool
    settings: TrainSettings
    fold_mode: str
    manifest: Path
    feature_cache: Path | None
    out_dir: Path
    jobs: int


def load_run_config(path, seed_override=None, out_override=None, jobs_override=None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None

    model_raw = dict(raw.get("model", {}))
    if "fenc_conv_channels" in model_raw:
        model_raw["fenc_conv_channels"] = tuple(model_raw["fenc_conv_channels"])
    explicit_classes = "num_classes" in model_raw
    try:
        model = ModelConfig(**model_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: invalid model config: {e}") from None

    training = dict(raw.get("training", {}))
    if "epochs" not in training:
        raise ConfigError(f"{path}: training.epochs is required")
    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise ConfigError(f"{path}: a seed is required (config \"seed\" or --seed)")
    try:
        settings = TrainSettings(seed=int(seed), **training)
    except TypeError as e:
        raise ConfigError(f"{path}: invalid training section: {e}") from None
    if settings.dtype not in ("float64", "float32"):
        raise ConfigError(f"{path}: training.dtype must be float64 or float32")
    if settings.batch_size < 1 or settings.epochs < 1:
        raise ConfigError(f"{path}: batch_size and epochs must be positive")

    fold_mode = raw.get("fold_mode", "speaker")
    if fold_mode not in ("speaker", "session"):
        raise ConfigError(f"{path}: fold_mode must be speaker or session")

    paths = raw.get("paths", {})
    if "manifest" not in paths:
        raise ConfigError(f"{path}: paths.manifest is required")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else path.parent / p

    manifest = resolve(paths["manifest"])
    cache = resolve(paths["feature_cache"]) if paths.get("feature_cache") else None
    if out_override:
        out_dir = Path(out_override)
    elif paths.get("out_dir"):
        out_dir = resolve(paths["out_dir"])
    else:
        raise ConfigError(f"{path}: an output directory is required (paths.out_dir or --out)")
    jobs = int(jobs_override if jobs_override is not None else raw.get("jobs", 1))
    return RunConfig(model=model, explicit_classes=explicit_classes, settings=settings,
                     fold_mode=fold_mode, manifest=manifest, feature_cache=cache,
                     out_dir=out_dir, jobs=jobs)


def _resolve_classes(rc: RunConfig, label_names: list[str]) -> ModelConfig:
    n = len(label_names)
    if rc.explicit_classes and rc.model.num_classes != n:
        raise ConfigError(f"config says num_classes={rc.model.num_classes} "
                          f"but the manifest has {n} labels: {label_names}")
    return rc.model if rc.model.num_classes == n else replace(rc.model, num_classes=n)


def _config_echo(rc: RunConfig, model: ModelConfig) -> dict:
    echo = {
        "model": asdict(model),
        "training": asdict(rc.settings),
        "fold_mode": rc.fold_mode,
        "manifest": str(rc.manifest),
    }
    echo["model"]["fenc_conv_channels"] = list(model.fenc_conv_channels)
    return echo


def _get_store(rc: RunConfig, entries) -> FeatureStore:
    if rc.feature_cache is not None:
        index = rc.feature_cache / "index.csv"
        if index.exists():
            return load_feature_cache(index)
    print("feature cache missing, extracting features in memory", file=sys.stderr)
    return FeatureStore.from_entries(entries)


def _fold_ckpt_name(i: int, unit: str) -> str:
    return f"fold{i:02d}_{unit}.ckpt"


def _write_report(path: Path, report: dict) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------


def cmd_extract(args) -> int:
    if args.config:
        rc = load_run_config(args.config, args.seed, None, args.jobs)
        manifest = Path(args.manifest) if args.manifest else rc.manifest
        out_dir = Path(args.out) if args.out else rc.feature_cache
    else:
        manifest = Path(args.manifest) if args.manifest else None
        out_dir = Path(args.out) if args.out else None
    if manifest is None or out_dir is None:
        print("extract needs --manifest and --out (or a config providing them)", file=sys.stderr)
        return 2
    entries, _ = read_manifest(manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.csv"

    prior: dict[str, tuple[str, list[list[str]]]] = {}
    if index_path.exists():
        with open(index_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is not None and tuple(reader.fieldnames) == INDEX_FIELDS:
                for row in reader:
                    sha, rows = prior.setdefault(row["utterance_id"], (row["audio_sha256"], []))
                    rows.append([row[c] for c in INDEX_FIELDS])

    fb = mel_filterbank()
    index_rows: list[list[str]] = []
    errors: list[tuple[str, str]] = []
    reused = computed = 0
    for e in entries:
        try:
            audio = Path(e.path).read_bytes()
            sha = hashlib.sha256(audio).hexdigest()
            cached = prior.get(e.utterance_id)
            if cached and cached[0] == sha and all((out_dir / r[3]).exists() for r in cached[1]):
                index_rows.extend(cached[1])
                reused += 1
                continue
            grid = log_mel_spectrogram(load_wav(io.BytesIO(audio)), fb)
            for mode in ("train", "eval"):
                for k, seg in enumerate(segment(grid, mode)):
                    rel = f"{e.utterance_id}.{mode}.{k:03d}.f64"
                    (out_dir / rel).write_bytes(np.ascontiguousarray(seg, dtype="<f8").tobytes())
                    index_rows.append([e.utterance_id, mode, str(k), rel, sha])
            computed += 1
        except Exception as err:
            errors.append((e.utterance_id, str(err)))
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_FIELDS)
        writer.writerows(index_rows)
    print(f"extracted {computed} utterance(s), reused {reused}, "
          f"{len(index_rows)} segment(s) -> {index_path}")
    for uid, msg in errors:
        print(f"error: {uid}: {msg}", file=sys.stderr)
    return 1 if errors else 0


def _save_fold_checkpoints(rc: RunConfig, model_cfg: ModelConfig,
                           results: list[FoldResult]) -> None:
    for i, r in enumerate(results):
        model = AtfnnModel(model_cfg, seed=0, dtype=np.float64)
        ad.restore(model.params, r.params)
        save_model(rc.out_dir / _fold_ckpt_name(i, r.unit_id), model,
                   meta={"held_out": r.unit_id, "fold_index": i, "seed": rc.settings.seed})


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.seed, args.out, args.jobs)
    entries, label_names = read_manifest(rc.manifest)
    model_cfg = _resolve_classes(rc, label_names)
    store = _get_store(rc, entries)
    results = run_crossval(entries, store, model_cfg, rc.settings, rc.fold_mode, rc.jobs)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    report = build_report(results, label_names, _config_echo(rc, model_cfg))
    _write_report(rc.out_dir / "report.json", report)
    _save_fold_checkpoints(rc, model_cfg, results)
    pooled = report["pooled"]
    print(f"{len(results)} folds -> pooled WAR {pooled['war']:.4f}, UAR {pooled['uar']:.4f}")
    print(f"report: {rc.out_dir / 'report.json'}")
    return 0


def cmd_eval(args) -> int:
    """Re-score previously trained fold checkpoints against the manifest."""
    rc = load_run_config(args.config, args.seed, args.out, args.jobs)
    entries, label_names = read_manifest(rc.manifest)
    model_cfg = _resolve_classes(rc, label_names)
    store = _get_store(rc, entries)
    plan = make_folds(entries, rc.fold_mode)
    results = []
    for i, fold in enumerate(plan.folds):
        ckpt = rc.out_dir / _fold_ckpt_name(i, fold.unit_id)
        if not ckpt.exists():
            print(f"missing checkpoint {ckpt}; run train first", file=sys.stderr)
            return 1
        model = load_model(ckpt)
        confusion, seg_confusion = score_fold(model, fold, entries, store)
        war, uar = metrics(confusion)
        results.append(FoldResult(unit_id=fold.unit_id, confusion=confusion, war=war,
                                  uar=uar, losses=[], segment_confusion=seg_confusion,
                                  params={}))
    report = build_report(results, label_names, _config_echo(rc, model_cfg))
    _write_report(rc.out_dir / "report_rescored.json", report)
    pooled = report["pooled"]
    print(f"{len(results)} folds -> pooled WAR {pooled['war']:.4f}, UAR {pooled['uar']:.4f}")
    print(f"report: {rc.out_dir / 'report_rescored.json'}")
    return 0


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config, args.seed, args.out, args.jobs)
    entries, label_names = read_manifest(rc.manifest)
    base_cfg = _resolve_classes(rc, label_names)
    store = _get_store(rc, entries)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    table: dict[str, dict] = {}
    for variant in VARIANTS:
        cfg = replace(base_cfg, variant=variant)
        results = run_crossval(entries, store, cfg, rc.settings, rc.fold_mode, rc.jobs)
        report = build_report(results, label_names, _config_echo(rc, cfg))
        _write_report(rc.out_dir / f"report_{variant.lower()}.json", report)
        att, fenc, tenc = ABLATION_FLAGS[variant]
        table[variant] = {
            "attention": att, "f_encoder": fenc, "t_encoder": tenc,
            "war": report["pooled"]["war"], "uar": report["pooled"]["uar"],
        }
    _write_report(rc.out_dir / "ablation.json", table)
    lines = [f"{'Variant':<8} {'Attention':<10} {'F-Encoder':<10} {'T-Encoder':<10} "
             f"{'WAR':>8} {'UAR':>8}"]
    for variant, row in table.items():
        marks = ["✓" if row[k] else "✗"
                 for k in ("attention", "f_encoder", "t_encoder")]
        lines.append(f"{variant:<8} {marks[0]:<10} {marks[1]:<10} {marks[2]:<10} "
                     f"{row['war']:>8.4f} {row['uar']:>8.4f}")
    text = "\n".join(lines)
    (rc.out_dir / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0


def _write_csv_grid(path: Path, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid), delimiter=",", fmt="%.10g")


def _write_pgm(path: Path, grid: np.ndarray) -> None:
    g = np.asarray(grid, dtype=np.float64)
    span = g.max() - g.min()
    scaled = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    img = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    path.write_bytes(header + img.tobytes())


def cmd_dump_attention(args) -> int:
    model = load_model(args.checkpoint)
    if model.config.variant == "TFNN":
        print("variant has no attention", file=sys.stderr)
        return 2
    if args.segment_file:
        raw = np.fromfile(args.segment_file, dtype="<f8")
        if raw.size != N_MELS * SEG_FRAMES:
            print(f"{args.segment_file}: expected {N_MELS}x{SEG_FRAMES} float64 grid",
                  file=sys.stderr)
            return 2
        grid = raw.reshape(N_MELS, SEG_FRAMES)
    elif args.wav:
        segs = segment(log_mel_spectrogram(load_wav(args.wav)), mode="eval")
        if args.segment_index >= len(segs):
            print(f"{args.wav}: has {len(segs)} eval segments, "
                  f"index {args.segment_index} out of range", file=sys.stderr)
            return 2
        grid = segs[args.segment_index]
    else:
        print("dump-attention needs --segment-file or --wav", file=sys.stderr)
        return 2

    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    _, maps = model.forward(grid)
    written = []

    def emit(name, array):
        p = out_dir / f"{name}.csv"
        _write_csv_grid(p, array)
        written.append(p)
        if args.pgm:
            q = out_dir / f"{name}.pgm"
            _write_pgm(q, array)
            written.append(q)

    emit("spectrogram", grid)
    if maps.freq_expanded is not None:
        emit("freq_expanded", maps.freq_expanded)
        emit("freq_groups", maps.freq_avg)
    if maps.time_expanded is not None:
        emit("time_expanded", maps.time_expanded)
        emit("time_groups", maps.time_avg)
    for p in written:
        print(p)
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_suite(seeds=range(args.seeds), corrupt=args.corrupt)
    width = max(len(name) for name, _, _ in rows)
    ok = True
    for name, err, passed in rows:
        ok &= passed
        print(f"{name:<{width}}  max rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    print(f"gradient check: {'PASS' if ok else 'FAIL'} ({args.seeds} seed(s))")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, help="parallel fold workers")
    common.add_argument("--out", help="override the output directory")

    parser = argparse.ArgumentParser(prog="atfnn",
                                     description="attentive time-frequency network tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common],
                       help="extract log-mel segment features into a cache")
    p.add_argument("--manifest", help="manifest CSV (overrides config)")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train", parents=[common],
                       help="run leave-one-unit-out training and evaluation")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="re-score existing fold checkpoints")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="run all four architecture variants")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dump-attention", parents=[common],
                       help="export attention maps for one segment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--segment-file", help="raw float64 80x128 grid from the feature cache")
    p.add_argument("--wav", help="compute the grid from a wav instead")
    p.add_argument("--segment-index", type=int, default=0)
    p.add_argument("--pgm", action="store_true", help="also write grayscale PGM images")
    p.set_defaults(fn=cmd_dump_attention)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of all gradients")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--corrupt", choices=["conv2d"], help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError, FoldError, ad.CheckpointError,
            ad.DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
