"""Command-line pipeline: prepare, stats, train, choreograph, eval.

Configuration comes from built-in defaults, optionally overlaid by a JSON
config file (--config), then by command-line flags; --show-config prints
the merged result and exits. Every command is deterministic given its
inputs and seed, and exits nonzero on any error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from choreo import audiofeat, dataset, metrics, peakpick, placement
from choreo import selection as sel
from choreo import simfile as sm
from choreo.selection import ngram

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "augment": True,
    "placement": {
        "kind": "clstm",
        "batch_size": 256,
        "unroll": 100,
        "dropout": 0.5,
        "learning_rate": 0.1,
        "clip_norm": 5.0,
        "max_epochs": 100,
        "patience": 10,
    },
    "selection": {
        "kind": "lstm",
        "batch_size": 64,
        "unroll": 64,
        "dropout": 0.5,
        "learning_rate": 0.1,
        "clip_norm": 5.0,
        "max_epochs": 100,
        "patience": 10,
        "use_time": True,
        "use_beat": True,
        "ngram_order": 5,
    },
    "peakpick": {
        "hamming_width": 5,
        "tolerance": 0.02,
    },
}

DIFFICULTY_RATINGS = {name: 2 * i + 1 for i, name in
                      enumerate(placement.DIFFICULTY_NAMES)}
DEFAULT_OUTPUT_BPM = 120.0


def merge_config(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if key not in out:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {key!r} must be an object")
            for sub, sval in value.items():
                if sub not in out[key]:
                    raise ValueError(f"unknown config key {key}.{sub}")
                out[key][sub] = sval
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as f:
            cfg = merge_config(cfg, json.load(f))
    return merge_config(cfg, overrides)


def _flag_overrides(args, mapping: dict[str, tuple[str, ...]]) -> dict:
    """Nested config overrides for every provided flag."""
    out: dict = {}
    for attr, path in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return out


def _maybe_show_config(args, cfg: dict) -> bool:
    if getattr(args, "show_config", False):
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return True
    return False


def _onoff(value: str) -> bool:
    table = {"on": True, "off": False}
    if value not in table:
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return table[value]


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args, {
        "seed": ("seed",), "jobs": ("jobs",)}))
    if _maybe_show_config(args, cfg):
        return 0
    manifest = dataset.prepare_dataset(args.pack_dir, args.out_dir,
                                       seed=cfg["seed"], jobs=cfg["jobs"])
    counts = {split: sum(1 for s in manifest.songs if s.split == split)
              for split in dataset.SPLITS}
    print(f"prepared {len(manifest.songs)} songs "
          f"(train={counts['train']} valid={counts['valid']} "
          f"test={counts['test']}), skipped {len(manifest.skipped)}")
    for item in manifest.skipped:
        print(f"  skipped {item['simfile']}: {item['reason']}")
    return 0


def cmd_stats(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    stats = dataset.manifest_stats(manifest)
    stats["splits"] = {split: sum(1 for s in manifest.songs
                                  if s.split == split)
                      for split in dataset.SPLITS}
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def _placement_cfg(cfg: dict) -> placement.PlacementTrainConfig:
    p = cfg["placement"]
    return placement.PlacementTrainConfig(
        batch_size=p["batch_size"], unroll=p["unroll"], dropout=p["dropout"],
        learning_rate=p["learning_rate"], clip_norm=p["clip_norm"],
        max_epochs=p["max_epochs"], patience=p["patience"], seed=cfg["seed"])


def cmd_train_placement(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args, {
        "seed": ("seed",),
        "kind": ("placement", "kind"),
        "lr": ("placement", "learning_rate"),
        "batch_size": ("placement", "batch_size"),
        "unroll": ("placement", "unroll"),
        "dropout": ("placement", "dropout"),
        "max_epochs": ("placement", "max_epochs"),
        "patience": ("placement", "patience"),
    }))
    if _maybe_show_config(args, cfg):
        return 0
    kind = cfg["placement"]["kind"]
    manifest = dataset.load_manifest(args.manifest)
    stats = dataset.load_stats(args.manifest)
    train_items = dataset.placement_items(manifest, "train", stats)
    valid_items = dataset.placement_items(manifest, "valid", stats)
    model, history = placement.train_placement(
        kind, [it[0] for it in train_items], [it[0] for it in valid_items],
        _placement_cfg(cfg))

    out = Path(args.out) if args.out else (
        Path(args.manifest).parent / "models" /
        f"placement-{kind}-{manifest.name}.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    placement.save_placement_model(
        out, model, norm_stats=audiofeat.stats_to_dict(stats),
        seed=cfg["seed"], extra={"dataset": manifest.name})

    pk = cfg["peakpick"]
    by_difficulty: dict[str, list] = {}
    valid_pairs = []
    for chart, truth_times, difficulty in valid_items:
        probs = placement.predict_probs(model, chart)
        eligible = chart.eligible()
        valid_pairs.append((probs[eligible], chart.labels[eligible]))
        by_difficulty.setdefault(difficulty, []).append(
            (probs, truth_times))
    thresholds = peakpick.calibrate_thresholds(
        by_difficulty, hamming_width=pk["hamming_width"],
        tolerance=pk["tolerance"])
    thresholds_path = Path(f"{out}.thresholds.json")
    thresholds_path.write_text(json.dumps(thresholds, indent=2,
                                          sort_keys=True) + "\n")

    pooled = [peakpick.micro_counts(v, thresholds[d],
                                    hamming_width=pk["hamming_width"],
                                    tolerance=pk["tolerance"])
              for d, v in sorted(by_difficulty.items())]
    totals = np.sum(np.asarray(pooled), axis=0)
    report = {
        "model": out.stem,
        "dataset": manifest.name,
        "epochs": len(history),
        "valid_auc_pr": metrics.auc_pr_charts(valid_pairs),
        "valid_fscore_m": metrics.f1_score(*totals),
        "valid_frame_perplexity": metrics.frame_perplexity_charts(valid_pairs),
    }
    Path(f"{out}.metrics.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    assert "test" not in manifest.access_log
    return 0


def _selection_train_cfg(cfg: dict) -> sel.SelectionTrainConfig:
    s = cfg["selection"]
    return sel.SelectionTrainConfig(
        batch_size=s["batch_size"], unroll=s["unroll"],
        learning_rate=s["learning_rate"], clip_norm=s["clip_norm"],
        dropout=s["dropout"], max_epochs=s["max_epochs"],
        patience=s["patience"], use_time=s["use_time"],
        use_beat=s["use_beat"], seed=cfg["seed"])


def _ngram_distributions(model, tokens: list[int]) -> np.ndarray:
    dists = np.empty((len(tokens), sel.EMISSION_SIZE))
    history = [sel.START_INDEX]
    for i, t in enumerate(tokens):
        dist = ngram.kn_distribution(model, history)
        dists[i] = [dist[w] for w in range(sel.EMISSION_SIZE)]
        history.append(t)
    return dists


def _selection_eval_pairs(model, charts, unroll: int):
    pairs = []
    for steps in charts:
        tokens = sel.chart_tokens(steps)
        if isinstance(model, ngram.KnModel):
            dists = _ngram_distributions(model, tokens)
        else:
            dists = sel.sequence_distributions(model, steps, unroll=unroll)
        pairs.append((dists, np.asarray(tokens)))
    return pairs


def cmd_train_selection(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args, {
        "seed": ("seed",),
        "kind": ("selection", "kind"),
        "lr": ("selection", "learning_rate"),
        "batch_size": ("selection", "batch_size"),
        "unroll": ("selection", "unroll"),
        "dropout": ("selection", "dropout"),
        "max_epochs": ("selection", "max_epochs"),
        "patience": ("selection", "patience"),
        "use_time": ("selection", "use_time"),
        "use_beat": ("selection", "use_beat"),
        "augment": ("augment",),
    }))
    if _maybe_show_config(args, cfg):
        return 0
    kind = cfg["selection"]["kind"]
    manifest = dataset.load_manifest(args.manifest)
    train_charts = dataset.selection_charts(manifest, "train",
                                            augment=cfg["augment"])
    valid_charts = dataset.selection_charts(manifest, "valid", augment=False)
    print(f"training sequences: {len(train_charts)}")

    out_dir = Path(args.manifest).parent / "models"
    if kind == "ngram":
        sequences = [sel.chart_tokens(steps) for steps in train_charts]
        model = ngram.kn_train(sequences, list(range(sel.EMISSION_SIZE)),
                               n=cfg["selection"]["ngram_order"])
        out = Path(args.out) if args.out else (
            out_dir / f"selection-ngram-{manifest.name}.knlm")
        out.parent.mkdir(parents=True, exist_ok=True)
        ngram.save_kn_model(out, model)
    elif kind in ("mlp5", "lstm"):
        train_cfg = _selection_train_cfg(cfg)
        model, _ = sel.train_selection(kind, train_charts, valid_charts,
                                       train_cfg)
        out = Path(args.out) if args.out else (
            out_dir / f"selection-{kind}-{manifest.name}.ckpt")
        out.parent.mkdir(parents=True, exist_ok=True)
        sel.save_selection_model(out, model, train_cfg,
                                 extra={"dataset": manifest.name})
    else:
        raise ValueError(f"unknown selection kind {kind!r}")

    pairs = _selection_eval_pairs(model, valid_charts,
                                  cfg["selection"]["unroll"])
    report = {"model": out.stem, "dataset": manifest.name}
    report.update({f"valid_{k}": v
                   for k, v in metrics.selection_metrics(pairs).items()})
    Path(f"{out}.metrics.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    assert "test" not in manifest.access_log
    return 0


def _load_selection_checkpoint(path):
    magic = open(path, "rb").read(4)
    if magic == ngram.KN_MAGIC:
        return ngram.load_kn_model(path), {"kind": "ngram"}
    model, ckpt = sel.load_selection_model(path)
    return model, ckpt["arch"]


def _canonical_difficulty(name: str) -> str:
    for known in placement.DIFFICULTY_NAMES:
        if name.strip().lower() == known.lower():
            return known
    raise ValueError(f"difficulty must be one of {placement.DIFFICULTY_NAMES},"
                     f" got {name!r}")


def cmd_choreograph(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args, {
        "seed": ("seed",)}))
    if _maybe_show_config(args, cfg):
        return 0
    difficulty = _canonical_difficulty(args.difficulty)
    model, ckpt = placement.load_placement_model(args.placement)
    if ckpt["norm_stats"] is None:
        raise ValueError("placement checkpoint has no normalization stats")
    stats = audiofeat.stats_from_dict(ckpt["norm_stats"])

    buf = audiofeat.load_wav(args.audio)
    features = audiofeat.apply_normalization(
        audiofeat.compute_features(buf.samples), stats)
    cond = placement.difficulty_onehot(difficulty,
                                       DIFFICULTY_RATINGS[difficulty])
    if len(cond) != model.cond_dim:
        raise ValueError(f"model expects conditioning width {model.cond_dim}")
    chart_view = placement.PlacementChart(
        padded=audiofeat.pad_context(features),
        labels=np.zeros(features.shape[0], dtype=np.float32), cond=cond,
        first=0, last=features.shape[0] - 1)
    probs = placement.predict_probs(model, chart_view)

    thresholds_path = Path(args.thresholds) if args.thresholds else \
        Path(f"{args.placement}.thresholds.json")
    if thresholds_path.exists():
        thresholds = json.loads(thresholds_path.read_text())
    else:
        log.warning("no thresholds file at %s; using 0.5", thresholds_path)
        thresholds = {}
    theta = thresholds.get(difficulty, 0.5)

    pk = cfg["peakpick"]
    times = peakpick.decode_peaks(probs, theta,
                                  hamming_width=pk["hamming_width"])

    bpm = args.bpm if args.bpm else DEFAULT_OUTPUT_BPM
    if bpm <= 0:
        raise ValueError("--bpm must be positive")
    sel_model, arch = _load_selection_checkpoint(args.selection)
    if isinstance(sel_model, ngram.KnModel):
        raise ValueError("choreograph needs a neural selection checkpoint; "
                         "n-gram models support evaluation only")
    if arch["use_beat"] and not args.bpm:
        raise ValueError("selection model uses beat features; supply --bpm")

    rng = np.random.Generator(np.random.PCG64(cfg["seed"]))
    beats = times * bpm / 60.0
    combos = sel.generate(sel_model, times,
                          beats if args.bpm else None, rng,
                          validity_mask=True)
    steps = [sm.TimedStep(beat=b, time=t, combo=c)
             for b, t, c in zip(beats, times, combos)]
    out_sf = sm.Simfile(
        title=args.title or Path(args.audio).stem, artist="",
        offset=0.0, tempo_map=[sm.TempoChange(beat=0.0, bpm=bpm)],
        charts=[sm.Chart(difficulty_name=difficulty,
                         difficulty_rating=DIFFICULTY_RATINGS[difficulty],
                         author="choreo", steps=steps)],
        audio_path=Path(args.audio).name)
    Path(args.out).write_text(sm.write_simfile(out_sf))
    if len(steps) == 0:
        print(f"no frames above threshold {theta}; wrote an empty chart to "
              f"{args.out}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}: {len(steps)} steps at {difficulty} "
          f"(theta={theta}, bpm={bpm:g})")
    return 0


def _placement_eval_row(ckpt_path, manifest, stats, items, pk) -> dict:
    model, ckpt = placement.load_placement_model(ckpt_path)
    placement.check_norm_digest(ckpt, stats)
    thresholds_path = Path(f"{ckpt_path}.thresholds.json")
    if thresholds_path.exists():
        thresholds = json.loads(thresholds_path.read_text())
    else:
        log.warning("no thresholds sidecar for %s; calibrating on the "
                    "validation split", ckpt_path)
        valid_items = dataset.placement_items(manifest, "valid", stats)
        by_difficulty: dict[str, list] = {}
        for chart, truth, difficulty in valid_items:
            probs = placement.predict_probs(model, chart)
            by_difficulty.setdefault(difficulty, []).append((probs, truth))
        thresholds = peakpick.calibrate_thresholds(
            by_difficulty, hamming_width=pk["hamming_width"],
            tolerance=pk["tolerance"])

    frame_pairs = []
    counts_per_chart = []
    chart_thetas = []
    for chart, truth_times, difficulty in items:
        probs = placement.predict_probs(model, chart)
        eligible = chart.eligible()
        frame_pairs.append((probs[eligible], chart.labels[eligible]))
        smoothed = peakpick.smooth(probs, pk["hamming_width"])
        counts = {}
        for theta in peakpick.THRESHOLD_GRID:
            counts[theta] = peakpick.micro_counts(
                [(smoothed, truth_times)], theta, tolerance=pk["tolerance"],
                presmoothed=True)
        counts_per_chart.append(counts)
        if difficulty not in thresholds:
            log.warning("no calibrated threshold for %r; using 0.5",
                        difficulty)
        chart_thetas.append(thresholds.get(difficulty, 0.5))

    row = {"model": Path(ckpt_path).stem, "dataset": manifest.name,
           "auc_pr": metrics.auc_pr_charts(frame_pairs),
           "frame_perplexity": metrics.frame_perplexity_charts(frame_pairs)}
    row.update(metrics.fscore_curves(counts_per_chart, chart_thetas))
    return row


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args, {"seed": ("seed",)}))
    if _maybe_show_config(args, cfg):
        return 0
    manifest = dataset.load_manifest(args.manifest)
    stats = dataset.load_stats(args.manifest)
    pk = cfg["peakpick"]
    rows = []
    if args.placement:
        items = dataset.placement_items(manifest, "test", stats)
        for ckpt_path in args.placement:
            rows.append(_placement_eval_row(ckpt_path, manifest, stats,
                                            items, pk))
    if args.selection:
        charts = dataset.selection_charts(manifest, "test", augment=False)
        for ckpt_path in args.selection:
            model, arch = _load_selection_checkpoint(ckpt_path)
            pairs = _selection_eval_pairs(model, charts,
                                          cfg["selection"]["unroll"])
            row = {"model": Path(ckpt_path).stem, "dataset": manifest.name}
            row.update(metrics.selection_metrics(pairs))
            rows.append(row)
    if not rows:
        raise ValueError("nothing to evaluate: pass --placement and/or "
                         "--selection checkpoints")
    prefix = args.out or str(Path(args.manifest).parent / "report")
    metrics.write_report(prefix, rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file overlaying defaults")
    p.add_argument("--show-config", action="store_true",
                   help="print the merged config and exit")
    p.add_argument("--seed", type=int, help="override the config seed")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", help="model kind")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--unroll", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--out", help="checkpoint output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="choreo",
        description="Learn and generate rhythm-game step charts from audio.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split a pack and cache features")
    p.add_argument("pack_dir")
    p.add_argument("out_dir")
    p.add_argument("--jobs", type=int, help="parallel feature extraction")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("manifest")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-placement", help="train a placement model")
    p.add_argument("manifest")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_placement)

    p = sub.add_parser("train-selection", help="train a selection model")
    p.add_argument("manifest")
    _add_train_flags(p)
    p.add_argument("--augment", type=_onoff,
                   help="4-fold mirror augmentation of training charts")
    p.add_argument("--use-time", type=_onoff, dest="use_time")
    p.add_argument("--use-beat", type=_onoff, dest="use_beat")
    _add_common(p)
    p.set_defaults(func=cmd_train_selection)

    p = sub.add_parser("choreograph",
                       help="generate a .sm chart for a WAV file")
    p.add_argument("--audio", required=True)
    p.add_argument("--difficulty", required=True)
    p.add_argument("--placement", required=True, help="placement checkpoint")
    p.add_argument("--selection", required=True, help="selection checkpoint")
    p.add_argument("--out", required=True, help="output .sm path")
    p.add_argument("--bpm", type=float,
                   help="true tempo; unlocks beat-based selection features")
    p.add_argument("--thresholds", help="thresholds JSON "
                   "(default: <placement>.thresholds.json)")
    p.add_argument("--title", help="song title for the output file")
    _add_common(p)
    p.set_defaults(func=cmd_choreograph)

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    p.add_argument("manifest")
    p.add_argument("--placement", nargs="*", default=[],
                   help="placement checkpoints")
    p.add_argument("--selection", nargs="*", default=[],
                   help="selection checkpoints")
    p.add_argument("--out", help="report path prefix")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # deterministic nonzero exit on any error
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
