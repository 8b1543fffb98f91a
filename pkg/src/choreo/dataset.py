"""Dataset preparation: song discovery, splits, and feature caching.

A pack directory of `.sm` files with WAV audio becomes a manifest plus a
per-song cache of raw (unnormalized) feature tensors. Songs are split
80/10/10 at the song level by a seeded shuffle so every chart of a song
shares a split; normalization statistics are fit on the training split
only. Split membership is handed out through an accessor that records
which splits were read, so tests can verify that training never touched
the test split.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from choreo import audiofeat
from choreo.placement import difficulty_onehot, make_placement_chart
from choreo.simfile import Simfile, SimfileError, augment_dataset, parse_simfile

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
STATS_NAME = "norm_stats.json"
CACHE_DIR_ENV = "CHOREO_CACHE_DIR"
SPLITS = ("train", "valid", "test")


@dataclass
class SongEntry:
    simfile: str  # relative to pack_dir
    audio: str  # relative to pack_dir
    cache: str  # relative to cache_root
    split: str
    title: str
    duration: float  # seconds of audio


@dataclass
class DatasetManifest:
    seed: int
    name: str
    pack_dir: str
    cache_root: str
    songs: list[SongEntry]
    skipped: list[dict]
    access_log: list[str] = field(default_factory=list)

    def split_songs(self, split: str) -> list[SongEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.access_log.append(split)
        log.info("split access: %s", split)
        return [s for s in self.songs if s.split == split]

    def all_songs(self) -> list[SongEntry]:
        return list(self.songs)

    def simfile_path(self, entry: SongEntry) -> Path:
        return Path(self.pack_dir) / entry.simfile

    def audio_file(self, entry: SongEntry) -> Path:
        return Path(self.pack_dir) / entry.audio

    def cache_path(self, entry: SongEntry) -> Path:
        return Path(self.cache_root) / entry.cache


def split_counts(n: int) -> tuple[int, int, int]:
    """80/10/10 by count; the remainder goes to train. Tiny packs keep at
    least one validation (n >= 2) and one test (n >= 3) song so the
    training pipeline stays runnable end to end."""
    valid = n // 10
    test = n // 10
    if n >= 2 and valid == 0:
        valid = 1
    if n >= 3 and test == 0:
        test = 1
    return n - valid - test, valid, test


def assign_splits(num_songs: int, seed: int) -> list[str]:
    """Split labels for songs in discovery order, shuffled by seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(num_songs)
    n_train, n_valid, _ = split_counts(num_songs)
    labels = [""] * num_songs
    for rank, idx in enumerate(order):
        if rank < n_train:
            labels[idx] = "train"
        elif rank < n_train + n_valid:
            labels[idx] = "valid"
        else:
            labels[idx] = "test"
    return labels


def discover_simfiles(pack_dir) -> list[Path]:
    return sorted(Path(pack_dir).rglob("*.sm"))


def _cache_name(rel_simfile: str) -> str:
    digest = hashlib.sha1(rel_simfile.encode("utf-8")).hexdigest()[:8]
    return f"{Path(rel_simfile).stem}-{digest}.melf"


def _extract_song(job):
    """Worker: parse one simfile, load audio, compute and cache features.

    Returns (rel_path, parsed Simfile, duration, cache_rel) or
    (rel_path, error message, None, None).
    """
    pack_dir, rel, cache_root = job
    sm_path = Path(pack_dir) / rel
    try:
        parsed = parse_simfile(sm_path.read_text())
    except (OSError, SimfileError) as exc:
        return rel, f"simfile parse failed: {exc}", None, None
    if not parsed.audio_path:
        return rel, "no audio file declared", None, None
    audio = sm_path.parent / parsed.audio_path
    try:
        buf = audiofeat.load_wav(audio)
    except (OSError, ValueError) as exc:
        return rel, f"audio load failed: {exc}", None, None
    spec = audiofeat.compute_features(buf.samples)
    cache_rel = _cache_name(rel)
    audiofeat.write_feature_cache(Path(cache_root) / cache_rel, spec)
    duration = len(buf.samples) / audiofeat.SAMPLE_RATE
    return rel, parsed, duration, cache_rel


def prepare_dataset(pack_dir, out_dir, seed: int = 0,
                    jobs: int = 1) -> DatasetManifest:
    """Build the manifest, feature cache, and train-split normalization
    statistics for a pack directory. Undecodable songs are skipped and
    reported in the manifest."""
    pack_dir = Path(pack_dir).resolve()
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_root = Path(os.environ.get(CACHE_DIR_ENV) or out_dir / "features")
    cache_root.mkdir(parents=True, exist_ok=True)

    rels = [str(p.relative_to(pack_dir)) for p in discover_simfiles(pack_dir)]
    if not rels:
        raise ValueError(f"no .sm files under {pack_dir}")
    jobs_args = [(str(pack_dir), rel, str(cache_root)) for rel in rels]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_song, jobs_args))
    else:
        results = [_extract_song(j) for j in jobs_args]

    kept: list[tuple[str, Simfile, float, str]] = []
    skipped: list[dict] = []
    for rel, parsed, duration, cache_rel in results:
        if duration is None:
            log.warning("skipping %s: %s", rel, parsed)
            skipped.append({"simfile": rel, "reason": parsed})
        else:
            kept.append((rel, parsed, duration, cache_rel))
    if not kept:
        raise ValueError("every song was skipped; nothing to prepare")

    labels = assign_splits(len(kept), seed)
    songs = []
    for (rel, parsed, duration, cache_rel), split in zip(kept, labels):
        audio_rel = str((Path(rel).parent / parsed.audio_path))
        songs.append(SongEntry(simfile=rel, audio=audio_rel, cache=cache_rel,
                               split=split, title=parsed.title,
                               duration=duration))

    manifest = DatasetManifest(seed=seed, name=pack_dir.name,
                               pack_dir=str(pack_dir),
                               cache_root=str(cache_root), songs=songs,
                               skipped=skipped)
    train_specs = [audiofeat.read_feature_cache(manifest.cache_path(e))
                   for e in manifest.split_songs("train")]
    stats = audiofeat.fit_normalization(train_specs)
    audiofeat.save_normalization(out_dir / STATS_NAME, stats)
    save_manifest(out_dir / MANIFEST_NAME, manifest)
    return manifest


def save_manifest(path, manifest: DatasetManifest) -> None:
    payload = {
        "seed": manifest.seed,
        "name": manifest.name,
        "pack_dir": manifest.pack_dir,
        "cache_root": manifest.cache_root,
        "songs": [vars(s) for s in manifest.songs],
        "skipped": manifest.skipped,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path) as f:
        payload = json.load(f)
    songs = [SongEntry(**s) for s in payload["songs"]]
    return DatasetManifest(seed=payload["seed"], name=payload["name"],
                           pack_dir=payload["pack_dir"],
                           cache_root=payload["cache_root"], songs=songs,
                           skipped=payload.get("skipped", []))


def load_stats(manifest_path) -> audiofeat.NormalizationStats:
    return audiofeat.load_normalization(Path(manifest_path).parent / STATS_NAME)


# ---------------------------------------------------------------------------
# training/eval views

def song_simfile(manifest: DatasetManifest, entry: SongEntry) -> Simfile:
    return parse_simfile(manifest.simfile_path(entry).read_text())


def normalized_features(manifest: DatasetManifest, entry: SongEntry,
                        stats: audiofeat.NormalizationStats) -> np.ndarray:
    raw = audiofeat.read_feature_cache(manifest.cache_path(entry))
    return audiofeat.apply_normalization(raw, stats)


def placement_items(manifest: DatasetManifest, split: str,
                    stats: audiofeat.NormalizationStats):
    """Per chart: (PlacementChart, truth step times, difficulty name)."""
    items = []
    for entry in manifest.split_songs(split):
        features = normalized_features(manifest, entry, stats)
        parsed = song_simfile(manifest, entry)
        for chart in parsed.charts:
            if not chart.steps:
                log.warning("empty chart in %s; skipped", entry.simfile)
                continue
            times = [s.time for s in chart.steps]
            pc = make_placement_chart(
                features, times, chart.difficulty_name,
                chart.difficulty_rating,
                name=f"{entry.title}/{chart.difficulty_name}")
            items.append((pc, np.asarray(times), chart.difficulty_name))
    return items


def placement_charts(manifest: DatasetManifest, split: str,
                     stats: audiofeat.NormalizationStats):
    return [item[0] for item in placement_items(manifest, split, stats)]


def selection_charts(manifest: DatasetManifest, split: str,
                     augment: bool = False):
    """Step sequences per chart; augment=True mirrors the charts 4-fold.

    Mirroring permutes arrows without moving steps in time, so it only
    enriches selection training; placement labels are mirror-invariant.
    """
    out = []
    for entry in manifest.split_songs(split):
        parsed = song_simfile(manifest, entry)
        charts = [c for c in parsed.charts if c.steps]
        if augment:
            charts = augment_dataset(charts)
        out.extend(c.steps for c in charts)
    return out


def manifest_stats(manifest: DatasetManifest) -> dict:
    """Pack statistics over every split, with audio durations from the
    prepared manifest."""
    from choreo.simfile import dataset_stats
    simfiles = []
    durations = {}
    for entry in manifest.all_songs():
        parsed = song_simfile(manifest, entry)
        simfiles.append(parsed)
        durations[parsed.audio_path] = entry.duration
    return dataset_stats(simfiles, durations)


def difficulty_vector(name: str, rating: float) -> np.ndarray:
    return difficulty_onehot(name, rating)
