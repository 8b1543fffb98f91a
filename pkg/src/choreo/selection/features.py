"""Input encodings for selection models.

Tokens are the 256 packed arrow combinations plus a START sentinel
(index 256) marking the beginning of a chart; START is never emitted.
The bag-of-arrows encoding spends 4 state bits per arrow (one is always
set) plus a start flag, 17 features total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from choreo.simfile import NUM_ARROWS, NUM_COMBOS, TimedStep, combo_index

START_INDEX = NUM_COMBOS  # 256
VOCAB_SIZE = NUM_COMBOS + 1  # combos + START
EMISSION_SIZE = NUM_COMBOS  # START is input-only

BAG_SIZE = 4 * NUM_ARROWS + 1  # 17

DT_CLAMP = 60.0  # seconds
DB_CLAMP = 120.0  # beats


def bag_of_arrows(token: int) -> np.ndarray:
    """17-vector: 4 state bits per arrow plus a start flag."""
    bag = np.zeros(BAG_SIZE, dtype=np.float32)
    if token == START_INDEX:
        bag[-1] = 1.0
        return bag
    if not 0 <= token < NUM_COMBOS:
        raise ValueError(f"token {token} out of range")
    rest = token
    for arrow in reversed(range(NUM_ARROWS)):
        state = rest % 4
        rest //= 4
        bag[arrow * 4 + state] = 1.0
    return bag


def beat_phase(beat: float) -> np.ndarray:
    """One-hot of the nearest 16th-note subdivision within the beat.

    index = round(4 * frac(beat)) mod 4, rounding halves up.
    """
    frac = beat - math.floor(beat)
    idx = int(math.floor(4.0 * frac + 0.5)) % 4
    out = np.zeros(4, dtype=np.float32)
    out[idx] = 1.0
    return out


@dataclass
class RhythmFeatures:
    dt_prev: float  # seconds since the previous step
    dt_next: float  # seconds until the next step
    db_prev: float  # beats since the previous step
    db_next: float  # beats until the next step
    phase: np.ndarray  # one-hot 4

    def vector(self, use_time: bool, use_beat: bool) -> np.ndarray:
        parts = []
        if use_time:
            parts.append(np.array([self.dt_prev, self.dt_next], dtype=np.float32))
        if use_beat:
            parts.append(np.array([self.db_prev, self.db_next], dtype=np.float32))
            parts.append(self.phase)
        if not parts:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate(parts)


def rhythm_dims(use_time: bool, use_beat: bool) -> int:
    return 2 * use_time + 6 * use_beat


def rhythm_features(steps: list[TimedStep], i: int) -> RhythmFeatures:
    """Deltas to neighboring steps; boundary positions copy the opposite
    side, and a single-step chart gets all-zero deltas."""
    step = steps[i]
    dt_prev = step.time - steps[i - 1].time if i > 0 else None
    dt_next = steps[i + 1].time - step.time if i + 1 < len(steps) else None
    db_prev = step.beat - steps[i - 1].beat if i > 0 else None
    db_next = steps[i + 1].beat - step.beat if i + 1 < len(steps) else None
    if dt_prev is None and dt_next is None:
        dt_prev = dt_next = db_prev = db_next = 0.0
    else:
        dt_prev = dt_prev if dt_prev is not None else dt_next
        dt_next = dt_next if dt_next is not None else dt_prev
        db_prev = db_prev if db_prev is not None else db_next
        db_next = db_next if db_next is not None else db_prev
    return RhythmFeatures(
        dt_prev=min(dt_prev, DT_CLAMP),
        dt_next=min(dt_next, DT_CLAMP),
        db_prev=min(db_prev, DB_CLAMP),
        db_next=min(db_next, DB_CLAMP),
        phase=beat_phase(step.beat),
    )


def chart_tokens(steps: list[TimedStep]) -> list[int]:
    return [combo_index(s.combo) for s in steps]
