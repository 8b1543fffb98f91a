"""StepMania ``.sm`` parsing, writing, and chart manipulation.

Supports the 4-panel ``dance-single`` subset: ``#KEY:VALUE;`` header tags
(TITLE, ARTIST, MUSIC, OFFSET, BPMS) and ``#NOTES`` blocks whose note rows
use the characters ``0123``. Rolls (``4``), mines (``M``), stops, and
non-positive BPMs are rejected with a parse error. ``//`` comments are
stripped.

Offset sign convention: ``#OFFSET:x`` means audio time = beat time - x,
so the event at beat 0 occurs at ``-x`` seconds.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

log = logging.getLogger(__name__)

BEATS_PER_MEASURE = 4
ROWS_PER_MEASURE = 192  # finest supported grid
ROWS_PER_BEAT = ROWS_PER_MEASURE // BEATS_PER_MEASURE  # 48
MEASURE_ROW_COUNTS = (4, 8, 12, 16, 24, 32, 48, 64, 96, 192)

NUM_ARROWS = 4
NUM_COMBOS = 4**NUM_ARROWS  # 256


class ArrowState(enum.IntEnum):
    """State of one arrow in a note row; values match the ``.sm`` digits."""

    OFF = 0
    TAP = 1
    HOLD_START = 2
    HOLD_END = 3


# One simultaneous state of all four arrows, ordered (left, down, up, right).
StepCombo = tuple[ArrowState, ArrowState, ArrowState, ArrowState]

ALL_OFF: StepCombo = (ArrowState.OFF,) * 4


class MirrorAxis(enum.Enum):
    LR = "lr"
    UD = "ud"
    BOTH = "both"


@dataclass(frozen=True)
class TempoChange:
    beat: float
    bpm: float


@dataclass(frozen=True)
class TimedStep:
    beat: float
    time: float
    combo: StepCombo


@dataclass
class Chart:
    difficulty_name: str
    difficulty_rating: int
    author: str
    steps: list[TimedStep]


@dataclass
class Simfile:
    title: str
    artist: str
    offset: float
    tempo_map: list[TempoChange]
    charts: list[Chart]
    audio_path: str = ""


class SimfileError(ValueError):
    """Parse or validation failure, with the 1-based source line if known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


# ---------------------------------------------------------------------------
# combos

def combo_from_string(row: str) -> StepCombo:
    if len(row) != NUM_ARROWS or any(c not in "0123" for c in row):
        raise ValueError(f"bad note row {row!r}")
    return tuple(ArrowState(int(c)) for c in row)  # type: ignore[return-value]


def combo_to_string(combo: StepCombo) -> str:
    return "".join(str(int(a)) for a in combo)


def combo_index(combo: StepCombo) -> int:
    """Pack a combo into 0..255 (base-4 digits, left arrow most significant)."""
    i = 0
    for a in combo:
        i = i * 4 + int(a)
    return i


def combo_from_index(i: int) -> StepCombo:
    if not 0 <= i < NUM_COMBOS:
        raise ValueError(f"combo index {i} out of range")
    digits = []
    for _ in range(NUM_ARROWS):
        digits.append(ArrowState(i % 4))
        i //= 4
    return tuple(reversed(digits))  # type: ignore[return-value]


def is_single_arrow(combo: StepCombo) -> bool:
    """True if the combo is exactly one instantaneous tap."""
    return sum(1 for a in combo if a != ArrowState.OFF) == 1 and ArrowState.TAP in combo


# ---------------------------------------------------------------------------
# tempo map

def validate_tempo_map(tempo_map: list[TempoChange]) -> None:
    if not tempo_map:
        raise ValueError("empty tempo map")
    if tempo_map[0].beat != 0:
        raise ValueError("tempo map must start at beat 0")
    for prev, cur in zip(tempo_map, tempo_map[1:]):
        if cur.beat <= prev.beat:
            raise ValueError("tempo change beats must be strictly increasing")
    for tc in tempo_map:
        if not (math.isfinite(tc.bpm) and tc.bpm > 0):
            raise ValueError(f"non-positive BPM {tc.bpm}")


def beat_to_time(beat: float, tempo_map: list[TempoChange], offset: float) -> float:
    """Seconds at `beat`, integrating 60/bpm over the tempo segments.

    Piecewise linear and strictly increasing in `beat`; beat 0 maps to
    ``-offset``.
    """
    t = -offset
    for i, tc in enumerate(tempo_map):
        seg_end = tempo_map[i + 1].beat if i + 1 < len(tempo_map) else math.inf
        if beat <= seg_end:
            return t + (beat - tc.beat) * 60.0 / tc.bpm
        t += (seg_end - tc.beat) * 60.0 / tc.bpm
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# hold-state validation

def check_hold_states(combos) -> int | None:
    """Index of the first combo violating hold rules, or None if valid.

    Rules, per arrow: HOLD_END only while that arrow is held by an earlier
    HOLD_START; no TAP or HOLD_START while held.
    """
    held = [False] * NUM_ARROWS
    for i, combo in enumerate(combos):
        for a, st in enumerate(combo):
            if held[a] and st in (ArrowState.TAP, ArrowState.HOLD_START):
                return i
            if not held[a] and st == ArrowState.HOLD_END:
                return i
            if st == ArrowState.HOLD_START:
                held[a] = True
            elif st == ArrowState.HOLD_END:
                held[a] = False
    return None


def validate_hold_states(steps: list[TimedStep]) -> None:
    bad = check_hold_states(s.combo for s in steps)
    if bad is not None:
        raise ValueError(f"hold-state violation at step {bad}")


# ---------------------------------------------------------------------------
# parsing

def _line_at(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("//", 1)[0] for line in text.split("\n"))


def _scan_tags(clean: str):
    """Yield (name, value, value_pos, tag_line) for each ``#NAME:VALUE;``."""
    pos = 0
    while True:
        start = clean.find("#", pos)
        if start < 0:
            return
        colon = clean.find(":", start)
        semi = clean.find(";", start)
        if colon < 0 or (0 <= semi < colon):
            raise SimfileError("malformed tag (missing ':')", _line_at(clean, start))
        if semi < 0:
            raise SimfileError("unterminated tag (missing ';')", _line_at(clean, start))
        name = clean[start + 1 : colon].strip().upper()
        yield name, clean[colon + 1 : semi], colon + 1, _line_at(clean, start)
        pos = semi + 1


def _parse_bpms(value: str, line: int) -> list[TempoChange]:
    changes = []
    for entry in value.split(","):
        entry = entry.strip()
        if not entry:
            continue
        if "=" not in entry:
            raise SimfileError(f"malformed BPMS entry {entry!r}", line)
        beat_s, bpm_s = entry.split("=", 1)
        try:
            beat, bpm = float(beat_s), float(bpm_s)
        except ValueError:
            raise SimfileError(f"malformed BPMS entry {entry!r}", line) from None
        if not (math.isfinite(bpm) and bpm > 0):
            raise SimfileError(f"non-positive BPM {bpm_s.strip()}", line)
        changes.append(TempoChange(beat, bpm))
    try:
        validate_tempo_map(changes)
    except ValueError as e:
        raise SimfileError(str(e), line) from None
    return changes


def _parse_notes(value: str, value_pos: int, clean: str,
                 tempo_map: list[TempoChange], offset: float) -> Chart | None:
    parts = value.split(":", 5)
    block_line = _line_at(clean, value_pos)
    if len(parts) != 6:
        raise SimfileError("NOTES block needs 6 ':'-separated fields", block_line)
    chart_type, author, diff_name, rating_s, _radar, notes = parts
    if chart_type.strip() != "dance-single":
        log.warning("skipping unsupported chart type %r (line %d)",
                    chart_type.strip(), block_line)
        return None
    try:
        rating = int(rating_s.strip())
    except ValueError:
        raise SimfileError(f"bad difficulty rating {rating_s.strip()!r}",
                           block_line) from None

    notes_line = _line_at(clean, value_pos + (len(value) - len(notes)))
    measures: list[list[tuple[str, int]]] = []
    rows: list[tuple[str, int]] = []
    for i, raw in enumerate(notes.split("\n")):
        line_no = notes_line + i
        tokens = raw.strip().split(",")
        for j, tok in enumerate(tokens):
            tok = tok.strip()
            if tok:
                rows.append((tok, line_no))
            if j < len(tokens) - 1:
                measures.append(rows)
                rows = []
    measures.append(rows)
    if measures and not measures[-1]:
        measures.pop()  # tolerate a trailing comma

    steps: list[TimedStep] = []
    held = [False] * NUM_ARROWS
    for m_idx, m_rows in enumerate(measures):
        n = len(m_rows)
        # any divisor of 192 keeps every row on the 1/192-measure grid
        if n and ROWS_PER_MEASURE % n != 0:
            raise SimfileError(
                f"measure has {n} rows; supported: divisors of {ROWS_PER_MEASURE}",
                m_rows[0][1])
        for r_idx, (tok, line_no) in enumerate(m_rows):
            if len(tok) != NUM_ARROWS or any(c not in "0123" for c in tok):
                raise SimfileError(
                    f"bad note row {tok!r} (rolls/mines are not supported)", line_no)
            if tok == "0000":
                continue
            combo = combo_from_string(tok)
            for a, st in enumerate(combo):
                if held[a] and st in (ArrowState.TAP, ArrowState.HOLD_START):
                    raise SimfileError(
                        f"arrow {a} is already held; cannot place {st.name}", line_no)
                if not held[a] and st == ArrowState.HOLD_END:
                    raise SimfileError(
                        f"arrow {a} is not held; cannot place HOLD_END", line_no)
                if st == ArrowState.HOLD_START:
                    held[a] = True
                elif st == ArrowState.HOLD_END:
                    held[a] = False
            # measure*4 + 4*row/n, evaluated on the exact integer grid so the
            # float result is independent of the measure's row count
            grid_row = m_idx * ROWS_PER_MEASURE + r_idx * (ROWS_PER_MEASURE // n)
            beat = grid_row / ROWS_PER_BEAT
            steps.append(TimedStep(beat, beat_to_time(beat, tempo_map, offset), combo))
    return Chart(diff_name.strip(), rating, author.strip(), steps)


def parse_simfile(text: str) -> Simfile:
    """Parse ``.sm`` text into a Simfile.

    Raises SimfileError (with a source line number) on malformed tags,
    unknown step characters, non-positive BPMs, or hold-state violations.
    """
    clean = _strip_comments(text)
    header: dict[str, tuple[str, int]] = {}
    notes_blocks: list[tuple[str, int]] = []
    for name, value, value_pos, tag_line in _scan_tags(clean):
        if name == "NOTES":
            notes_blocks.append((value, value_pos))
        elif name == "STOPS" and value.strip():
            raise SimfileError("STOPS are not supported", tag_line)
        elif name not in header:
            header[name] = (value, tag_line)

    for required in ("TITLE", "OFFSET", "BPMS"):
        if required not in header:
            raise SimfileError(f"missing required tag #{required}")
    if not notes_blocks:
        raise SimfileError("no #NOTES block")

    offset_s, offset_line = header["OFFSET"]
    try:
        offset = float(offset_s.strip())
    except ValueError:
        raise SimfileError(f"bad OFFSET {offset_s.strip()!r}", offset_line) from None
    if not math.isfinite(offset):
        raise SimfileError("OFFSET must be finite", offset_line)

    tempo_map = _parse_bpms(*header["BPMS"])

    charts = []
    for value, value_pos in notes_blocks:
        chart = _parse_notes(value, value_pos, clean, tempo_map, offset)
        if chart is not None:
            charts.append(chart)
    if not charts:
        raise SimfileError("no dance-single chart found")

    return Simfile(
        title=header["TITLE"][0].strip(),
        artist=header.get("ARTIST", ("", 0))[0].strip(),
        offset=offset,
        tempo_map=tempo_map,
        charts=charts,
        audio_path=header.get("MUSIC", ("", 0))[0].strip(),
    )


# ---------------------------------------------------------------------------
# writing

def _sanitize(value: str) -> str:
    clean = value.replace("\n", " ")
    for ch in "#:;":
        clean = clean.replace(ch, "")
    if clean != value:
        log.warning("sanitized metadata value %r for .sm output", value)
    return clean


def _measure_rows(positions: list[int], quantization: int) -> int:
    """Smallest supported row count representing all row positions exactly."""
    for count in MEASURE_ROW_COUNTS:
        if count > quantization:
            break
        stride = quantization // count
        if all(p % stride == 0 for p in positions):
            return count
    return quantization


def write_simfile(sf: Simfile, quantization: int = ROWS_PER_MEASURE) -> str:
    """Serialize to ``.sm`` text, snapping steps to the quantization grid.

    Steps snap to the nearest 1/quantization of a measure; collisions merge
    arrow-wise by max precedence (HOLD_END > HOLD_START > TAP > OFF), and any
    hold violation the merge produces is repaired by dropping the later
    conflicting event.
    """
    if quantization not in MEASURE_ROW_COUNTS:
        raise ValueError(f"unsupported quantization {quantization}")
    validate_tempo_map(sf.tempo_map)

    out = [
        f"#TITLE:{_sanitize(sf.title)};",
        f"#ARTIST:{_sanitize(sf.artist)};",
        f"#MUSIC:{_sanitize(sf.audio_path)};",
        f"#OFFSET:{sf.offset:.6f};",
        "#BPMS:" + ",".join(f"{tc.beat:.6f}={tc.bpm:.6f}" for tc in sf.tempo_map) + ";",
    ]

    for chart in sf.charts:
        merged: dict[int, list[int]] = {}
        for step in chart.steps:
            row = round(step.beat * quantization / BEATS_PER_MEASURE)
            cell = merged.setdefault(row, [0] * NUM_ARROWS)
            for a, st in enumerate(step.combo):
                cell[a] = max(cell[a], int(st))

        # Repair pass: dropping the later event keeps the chart playable.
        held = [False] * NUM_ARROWS
        for row in sorted(merged):
            cell = merged[row]
            for a in range(NUM_ARROWS):
                st = cell[a]
                if held[a] and st in (1, 2):
                    log.warning("dropping %s on held arrow %d at row %d",
                                ArrowState(st).name, a, row)
                    cell[a] = 0
                elif not held[a] and st == 3:
                    log.warning("dropping HOLD_END on idle arrow %d at row %d", a, row)
                    cell[a] = 0
                elif st == 2:
                    held[a] = True
                elif st == 3:
                    held[a] = False
        merged = {row: cell for row, cell in merged.items() if any(cell)}

        n_measures = max((row // quantization for row in merged), default=0) + 1
        measure_text = []
        for m in range(n_measures):
            local = {row - m * quantization: cell
                     for row, cell in merged.items()
                     if m * quantization <= row < (m + 1) * quantization}
            count = _measure_rows(sorted(local), quantization)
            stride = quantization // count
            lines = []
            for r in range(count):
                cell = local.get(r * stride)
                lines.append("".join(str(v) for v in cell) if cell else "0000")
            measure_text.append("\n".join(lines))

        out.append(
            "#NOTES:\n"
            "     dance-single:\n"
            f"     {_sanitize(chart.author)}:\n"
            f"     {_sanitize(chart.difficulty_name)}:\n"
            f"     {chart.difficulty_rating}:\n"
            "     0.0,0.0,0.0,0.0,0.0:\n"
            + "\n,\n".join(measure_text) + "\n;"
        )
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# augmentation

_LR = (3, 1, 2, 0)
_UD = (0, 2, 1, 3)
_BOTH = (3, 2, 1, 0)
_PERMS = {MirrorAxis.LR: _LR, MirrorAxis.UD: _UD, MirrorAxis.BOTH: _BOTH}


def mirror_combo(combo: StepCombo, axis: MirrorAxis) -> StepCombo:
    perm = _PERMS[axis]
    return tuple(combo[p] for p in perm)  # type: ignore[return-value]


def mirror_chart(chart: Chart, axis: MirrorAxis) -> Chart:
    """Swap arrow positions (LR: left<->right, UD: down<->up); timing unchanged."""
    steps = [replace(s, combo=mirror_combo(s.combo, axis)) for s in chart.steps]
    return replace(chart, steps=steps)


def augment_dataset(charts: list[Chart]) -> list[Chart]:
    """Four instances per chart: identity, LR, UD, and both mirrorings."""
    out = []
    for chart in charts:
        out.append(chart)
        out.extend(mirror_chart(chart, axis) for axis in
                   (MirrorAxis.LR, MirrorAxis.UD, MirrorAxis.BOTH))
    return out


# ---------------------------------------------------------------------------
# analysis

_SUBDIV_CLASSES = (("4th", 1), ("8th", 2), ("12th", 3), ("16th", 4),
                   ("24th", 6), ("32nd", 8))
SUBDIVISION_NAMES = tuple(name for name, _ in _SUBDIV_CLASSES) + ("other",)


def subdivision_class(beat: float, tol: float = 1e-4) -> str:
    """Coarsest rhythmic grid containing the beat position, or "other"."""
    for name, per_beat in _SUBDIV_CLASSES:
        scaled = beat * per_beat
        if abs(scaled - round(scaled)) <= tol * per_beat:
            return name
    return "other"


def subdivision_histogram(chart: Chart) -> dict[str, int]:
    hist = {name: 0 for name in SUBDIVISION_NAMES}
    for step in chart.steps:
        hist[subdivision_class(step.beat)] += 1
    return hist


def dataset_stats(simfiles: list[Simfile],
                  audio_durations: dict[str, float] | None = None) -> dict:
    """Aggregate pack statistics.

    Chart time spans run first step to last step. Songs with no known audio
    duration are warned about and excluded from the audio-hour total only.
    """
    vocab: set[StepCombo] = set()
    n_charts = 0
    n_steps = 0
    n_single = 0
    span_seconds = 0.0
    audio_seconds = 0.0
    for sf in simfiles:
        dur = (audio_durations or {}).get(sf.audio_path)
        if dur is None:
            log.warning("no audio duration for %r; excluded from audio hours",
                        sf.title)
        else:
            audio_seconds += dur
        for chart in sf.charts:
            n_charts += 1
            n_steps += len(chart.steps)
            n_single += sum(1 for s in chart.steps if is_single_arrow(s.combo))
            vocab.update(s.combo for s in chart.steps)
            if len(chart.steps) >= 2:
                span_seconds += chart.steps[-1].time - chart.steps[0].time
    return {
        "num_songs": len(simfiles),
        "num_charts": n_charts,
        "total_audio_hours": audio_seconds / 3600.0,
        "total_chart_hours": span_seconds / 3600.0,
        "steps_per_sec": n_steps / span_seconds if span_seconds > 0 else 0.0,
        "vocab_size": len(vocab),
        "single_arrow_fraction": n_single / n_steps if n_steps else 0.0,
    }
