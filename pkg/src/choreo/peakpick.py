"""Peak picking: per-frame probabilities -> discrete step times -> scores.

The decode path smooths predicted probabilities with a unit-sum Hamming
window, picks local maxima over a threshold (leftmost index on plateaus),
and scores predictions against ground truth with greedy one-to-one
matching at +/-20 ms.

Thresholds are calibrated per difficulty on validation data by grid
search over {0.00, 0.01, ..., 1.00}, maximizing micro F-score; ties go to
the smaller threshold.
"""

from __future__ import annotations

import logging
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.020  # seconds
DEFAULT_HAMMING_WIDTH = 5  # frames
FRAME_PERIOD = 0.010  # seconds
THRESHOLD_GRID = [i / 100.0 for i in range(101)]


@dataclass
class PeakPickConfig:
    hamming_width: int = DEFAULT_HAMMING_WIDTH
    threshold_per_difficulty: dict[str, float] = field(default_factory=dict)
    tolerance: float = DEFAULT_TOLERANCE

    def __post_init__(self):
        if self.hamming_width < 1 or self.hamming_width % 2 == 0:
            raise ValueError(f"hamming_width must be odd, got {self.hamming_width}")
        for name, theta in self.threshold_per_difficulty.items():
            if not 0.0 <= theta <= 1.0:
                raise ValueError(f"threshold {theta} for {name!r} outside [0, 1]")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]  # (prediction index, truth index)


def hamming_kernel(width: int) -> np.ndarray:
    if width < 1 or width % 2 == 0:
        raise ValueError(f"width must be odd and positive, got {width}")
    if width == 1:
        return np.ones(1)
    n = np.arange(width)
    kernel = 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (width - 1))
    return kernel / kernel.sum()


def smooth(probs: np.ndarray, hamming_width: int = DEFAULT_HAMMING_WIDTH) -> np.ndarray:
    """Convolve with a unit-sum Hamming window; same length, zero-padded."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        return probs
    return np.convolve(probs, hamming_kernel(hamming_width), mode="same")


def pick_peaks(smoothed: np.ndarray, threshold: float) -> np.ndarray:
    """Indices of local maxima at or above `threshold`.

    A run of equal values counts as one candidate, reported at its leftmost
    index; it is a peak when strictly above both neighboring runs (sequence
    boundaries behave as -inf).
    """
    s = np.asarray(smoothed, dtype=np.float64)
    n = s.size
    peaks = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        left = s[i - 1] if i > 0 else -np.inf
        right = s[j + 1] if j + 1 < n else -np.inf
        if s[i] > left and s[i] > right and s[i] >= threshold:
            peaks.append(i)
        i = j + 1
    return np.asarray(peaks, dtype=np.int64)


def peaks_to_times(peak_frames: np.ndarray,
                   frame_period: float = FRAME_PERIOD) -> np.ndarray:
    return np.asarray(peak_frames, dtype=np.float64) * frame_period


def match_placements(predicted_times, truth_times,
                     tolerance: float = DEFAULT_TOLERANCE) -> MatchResult:
    """Greedy one-to-one matching in increasing time order.

    Each prediction takes the nearest still-unmatched truth within
    +/-tolerance (earlier truth on exact distance ties). Unmatched
    predictions are FPs; unmatched truths are FNs.
    """
    pred = np.asarray(predicted_times, dtype=np.float64)
    truth = np.asarray(truth_times, dtype=np.float64)
    used = np.zeros(len(truth), dtype=bool)
    pairs = []
    for i, p in enumerate(pred):
        best = -1
        best_dist = np.inf
        for j in range(bisect_left(truth, p - tolerance), len(truth)):
            if truth[j] > p + tolerance:
                break
            if used[j]:
                continue
            dist = abs(truth[j] - p)
            if dist < best_dist:
                best_dist = dist
                best = j
        if best >= 0:
            used[best] = True
            pairs.append((i, best))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(pred) - tp, fn=len(truth) - tp, pairs=pairs)


def f_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def decode_peaks(probs: np.ndarray, threshold: float,
                 hamming_width: int = DEFAULT_HAMMING_WIDTH,
                 frame_period: float = FRAME_PERIOD) -> np.ndarray:
    """probs -> smoothed -> thresholded peak times (seconds)."""
    return peaks_to_times(pick_peaks(smooth(probs, hamming_width), threshold),
                          frame_period)


def micro_counts(charts: list[tuple[np.ndarray, np.ndarray]], threshold: float,
                 hamming_width: int = DEFAULT_HAMMING_WIDTH,
                 tolerance: float = DEFAULT_TOLERANCE,
                 frame_period: float = FRAME_PERIOD,
                 presmoothed: bool = False) -> tuple[int, int, int]:
    """Summed (TP, FP, FN) over (probs, truth_times) chart pairs."""
    tp = fp = fn = 0
    for probs, truth in charts:
        s = probs if presmoothed else smooth(probs, hamming_width)
        times = peaks_to_times(pick_peaks(s, threshold), frame_period)
        m = match_placements(times, truth, tolerance)
        tp += m.tp
        fp += m.fp
        fn += m.fn
    return tp, fp, fn


def calibrate_thresholds(charts_by_difficulty: dict[str, list[tuple[np.ndarray, np.ndarray]]],
                         difficulties: list[str] | None = None,
                         hamming_width: int = DEFAULT_HAMMING_WIDTH,
                         tolerance: float = DEFAULT_TOLERANCE,
                         frame_period: float = FRAME_PERIOD) -> dict[str, float]:
    """Per-difficulty threshold maximizing micro F-score on validation charts.

    `charts_by_difficulty` maps difficulty name to (probs, truth_times)
    pairs. Difficulties with no validation charts get 0.5 with a warning.
    """
    if difficulties is None:
        difficulties = sorted(charts_by_difficulty)
    thresholds: dict[str, float] = {}
    for name in difficulties:
        charts = charts_by_difficulty.get(name, [])
        if not charts:
            log.warning("no validation charts for difficulty %r; "
                        "defaulting threshold to 0.5", name)
            thresholds[name] = 0.5
            continue
        smoothed = [(smooth(p, hamming_width), t) for p, t in charts]
        best_theta = 0.0
        best_f = -1.0
        for theta in THRESHOLD_GRID:
            tp, fp, fn = micro_counts(smoothed, theta, tolerance=tolerance,
                                      frame_period=frame_period,
                                      presmoothed=True)
            f = f_score(tp, fp, fn)
            if f > best_f:  # strict: ties keep the smaller theta
                best_f = f
                best_theta = theta
        thresholds[name] = best_theta
    return thresholds
