"""Step placement: per-frame step probabilities from audio features.

Four model families over 10 ms frames, each ending in a single sigmoid
unit: logistic regression and an MLP on the flattened 15x80x3 context
window (conditioning concatenated at the input), a CNN whose two conv
layers (10@7x3 and 20@3x3, each ReLU + frequency max-pool of 3) feed
FC(256)+FC(128) with conditioning concatenated to the flattened conv
output, and a C-LSTM that applies the same conv stack across an
unrolled frame sequence, flattens channels x frequency per timestep
(20*8 = 160), concatenates conditioning, and runs a 2x200 LSTM followed
by the same FC head supervising every frame.

Training uses SGD with gradient-norm clipping, 50% dropout after each
fully connected and LSTM layer (never on the recurrent path), batches
of 256, and early stopping on validation AUC-PR. Labels stay
imbalanced; frames before the first or after the last step of a chart
are excluded. Prediction is deterministic and stateless per call, so
many songs may be scored in parallel against a frozen model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from choreo import nnkit as nn
from choreo.audiofeat import (
    CONTEXT_FRAMES,
    gather_context,
    pad_context,
    stats_digest,
    time_to_frame,
)
from choreo.metrics import auc_pr

log = logging.getLogger(__name__)

DIFFICULTY_NAMES = ("Beginner", "Easy", "Medium", "Hard", "Challenge")
NUM_DIFFICULTIES = 5
# representative numeric ratings used to bucket unknown difficulty names
DIFFICULTY_CENTERS = (1.0, 3.0, 5.0, 7.0, 9.0)

CONTEXT_WIDTH = 2 * CONTEXT_FRAMES + 1  # 15
NUM_BANDS = 80
NUM_CHANNELS = 3
WINDOW_FLAT = CONTEXT_WIDTH * NUM_BANDS * NUM_CHANNELS  # 3600

CONV1_FILTERS = 10
CONV1_TIME = 7
CONV1_FREQ = 3
CONV2_FILTERS = 20
CONV2_TIME = 3
CONV2_FREQ = 3
POOL_WIDTH = 3
FC1_WIDTH = 256
FC2_WIDTH = 128
LSTM_HIDDEN = 200
# two 'valid' convs shrink the time axis by (7-1) + (3-1) = 8 frames
CONV_TIME_SHRINK = (CONV1_TIME - 1) + (CONV2_TIME - 1)
CONV_HALO = CONV_TIME_SHRINK // 2  # frames of context needed per side
CNN_TIME_OUT = CONTEXT_WIDTH - CONV_TIME_SHRINK  # 7
CONV_FREQ_OUT = ((NUM_BANDS - CONV1_FREQ + 1) // POOL_WIDTH
                 - CONV2_FREQ + 1) // POOL_WIDTH  # 8
CNN_FLAT = CONV2_FILTERS * CNN_TIME_OUT * CONV_FREQ_OUT  # 1120
CLSTM_STEP_FLAT = CONV2_FILTERS * CONV_FREQ_OUT  # 160

PREDICT_CHUNK = 100  # stateful C-LSTM prediction advances 100 frames at a time
PREDICT_BATCH = 512


def difficulty_onehot(name: str, rating: float) -> np.ndarray:
    """5-way one-hot from a difficulty name; unknown names fall back to
    the nearest numeric-rating bucket with a warning."""
    out = np.zeros(NUM_DIFFICULTIES, dtype=np.float32)
    lowered = name.strip().lower()
    for i, known in enumerate(DIFFICULTY_NAMES):
        if lowered == known.lower():
            out[i] = 1.0
            return out
    idx = int(np.argmin([abs(rating - c) for c in DIFFICULTY_CENTERS]))
    log.warning("unknown difficulty name %r; rating %s mapped to %s",
                name, rating, DIFFICULTY_NAMES[idx])
    out[idx] = 1.0
    return out


def frame_labels(step_times, num_frames: int) -> tuple[np.ndarray, int, int]:
    """Per-frame 0/1 labels plus the first and last labeled frame.

    A step labels exactly the frame its time rounds to; steps that round
    past the end of the audio clamp to the final frame with a warning.
    """
    times = list(step_times)
    if not times:
        raise ValueError("chart has no steps")
    labels = np.zeros(num_frames, dtype=np.float32)
    for t in times:
        f = time_to_frame(t)
        if f < 0 or f >= num_frames:
            log.warning("step at %.3fs rounds to frame %d outside [0, %d); "
                        "clamped", t, f, num_frames)
            f = min(max(f, 0), num_frames - 1)
        labels[f] = 1.0
    marked = np.flatnonzero(labels)
    return labels, int(marked[0]), int(marked[-1])


@dataclass
class PlacementChart:
    """One chart's training/eval view: context-padded normalized features,
    per-frame labels, a conditioning vector, and the eligible frame span."""
    padded: np.ndarray  # (T + 14, 80, 3) float32
    labels: np.ndarray  # (T,) float32
    cond: np.ndarray  # (5 + author_dim,) float32
    first: int
    last: int
    name: str = ""

    @property
    def num_frames(self) -> int:
        return len(self.labels)

    def eligible(self) -> np.ndarray:
        return np.arange(self.first, self.last + 1)


def make_placement_chart(features: np.ndarray, step_times,
                         difficulty_name: str, difficulty_rating: float,
                         author_onehot: np.ndarray | None = None,
                         name: str = "") -> PlacementChart:
    if features.ndim != 3 or features.shape[1:] != (NUM_BANDS, NUM_CHANNELS):
        raise ValueError(f"features must be (T, {NUM_BANDS}, {NUM_CHANNELS}), "
                         f"got {features.shape}")
    labels, first, last = frame_labels(step_times, features.shape[0])
    cond = difficulty_onehot(difficulty_name, difficulty_rating)
    if author_onehot is not None:
        cond = np.concatenate([cond, np.asarray(author_onehot, np.float32)])
    return PlacementChart(padded=pad_context(features.astype(np.float32)),
                          labels=labels, cond=cond, first=first, last=last,
                          name=name)


# ---------------------------------------------------------------------------
# models

def _expect(layer: str, data: np.ndarray, shape: tuple) -> None:
    if data.shape != shape:
        raise nn.ShapeError(f"{layer}: expected {shape}, got {data.shape}")


class PlacementLogReg:
    kind = "logreg"

    def __init__(self, rng: np.random.Generator, cond_dim: int = 5,
                 dropout: float = 0.5):
        self.cond_dim = cond_dim
        self.dropout = dropout
        self.w, self.b = nn.dense_params(WINDOW_FLAT + cond_dim, 1, rng)

    def parameters(self):
        return [self.w, self.b]

    def param_names(self):
        return ["w", "b"]

    def logits(self, windows: np.ndarray, cond: np.ndarray, training: bool,
               rng: np.random.Generator) -> nn.Tensor:
        batch = windows.shape[0]
        x = np.concatenate([windows.reshape(batch, -1), cond], axis=1)
        _expect("logreg input", x, (batch, WINDOW_FLAT + self.cond_dim))
        out = nn.add(nn.matmul(nn.tensor(x), self.w), self.b)
        return nn.reshape(out, (batch,))

    def arch(self):
        return {"kind": self.kind, "cond_dim": self.cond_dim,
                "dropout": self.dropout}


class PlacementMlp:
    kind = "mlp"

    def __init__(self, rng: np.random.Generator, cond_dim: int = 5,
                 dropout: float = 0.5):
        self.cond_dim = cond_dim
        self.dropout = dropout
        in_dim = WINDOW_FLAT + cond_dim
        self.fc1_w, self.fc1_b = nn.dense_params(in_dim, FC1_WIDTH, rng)
        self.fc2_w, self.fc2_b = nn.dense_params(FC1_WIDTH, FC2_WIDTH, rng)
        self.out_w, self.out_b = nn.dense_params(FC2_WIDTH, 1, rng)

    def parameters(self):
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
                self.out_w, self.out_b]

    def param_names(self):
        return ["fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b"]

    def logits(self, windows, cond, training, rng):
        batch = windows.shape[0]
        x = np.concatenate([windows.reshape(batch, -1), cond], axis=1)
        _expect("mlp input", x, (batch, WINDOW_FLAT + self.cond_dim))
        h = nn.relu(nn.add(nn.matmul(nn.tensor(x), self.fc1_w), self.fc1_b))
        h = nn.dropout(h, self.dropout, training, rng)
        h = nn.relu(nn.add(nn.matmul(h, self.fc2_w), self.fc2_b))
        h = nn.dropout(h, self.dropout, training, rng)
        out = nn.add(nn.matmul(h, self.out_w), self.out_b)
        return nn.reshape(out, (batch,))

    def arch(self):
        return {"kind": self.kind, "cond_dim": self.cond_dim,
                "dropout": self.dropout}


class _ConvStack:
    """The shared two-layer conv encoder (kernels time x freq)."""

    def __init__(self, rng: np.random.Generator):
        self.c1_k, self.c1_b = nn.conv_params(
            CONV1_FILTERS, NUM_CHANNELS, CONV1_TIME, CONV1_FREQ, rng)
        self.c2_k, self.c2_b = nn.conv_params(
            CONV2_FILTERS, CONV1_FILTERS, CONV2_TIME, CONV2_FREQ, rng)

    def tensors(self):
        return [self.c1_k, self.c1_b, self.c2_k, self.c2_b]

    def apply(self, frames: np.ndarray) -> nn.Tensor:
        """(B, T, 80, 3) frames -> (B, 20, T-8, 8) pooled conv features."""
        batch, t_in = frames.shape[0], frames.shape[1]
        x = nn.tensor(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)))
        h = nn.maxpool_freq(nn.relu(nn.conv2d(x, self.c1_k, self.c1_b)),
                            POOL_WIDTH, POOL_WIDTH)
        _expect("conv1 pooled", h.data,
                (batch, CONV1_FILTERS, t_in - CONV1_TIME + 1,
                 (NUM_BANDS - CONV1_FREQ + 1) // POOL_WIDTH))
        h = nn.maxpool_freq(nn.relu(nn.conv2d(h, self.c2_k, self.c2_b)),
                            POOL_WIDTH, POOL_WIDTH)
        _expect("conv2 pooled", h.data,
                (batch, CONV2_FILTERS, t_in - CONV_TIME_SHRINK, CONV_FREQ_OUT))
        return h


class PlacementCnn:
    kind = "cnn"

    def __init__(self, rng: np.random.Generator, cond_dim: int = 5,
                 dropout: float = 0.5):
        self.cond_dim = cond_dim
        self.dropout = dropout
        self.conv = _ConvStack(rng)
        self.fc1_w, self.fc1_b = nn.dense_params(CNN_FLAT + cond_dim,
                                                 FC1_WIDTH, rng)
        self.fc2_w, self.fc2_b = nn.dense_params(FC1_WIDTH, FC2_WIDTH, rng)
        self.out_w, self.out_b = nn.dense_params(FC2_WIDTH, 1, rng)

    def parameters(self):
        return self.conv.tensors() + [self.fc1_w, self.fc1_b, self.fc2_w,
                                      self.fc2_b, self.out_w, self.out_b]

    def param_names(self):
        return ["c1_k", "c1_b", "c2_k", "c2_b", "fc1_w", "fc1_b",
                "fc2_w", "fc2_b", "out_w", "out_b"]

    def logits(self, windows, cond, training, rng):
        batch = windows.shape[0]
        h = self.conv.apply(windows)
        flat = nn.reshape(h, (batch, CNN_FLAT))
        x = nn.concat([flat, nn.tensor(cond)], axis=1)
        _expect("cnn fc input", x.data, (batch, CNN_FLAT + self.cond_dim))
        h = nn.relu(nn.add(nn.matmul(x, self.fc1_w), self.fc1_b))
        h = nn.dropout(h, self.dropout, training, rng)
        h = nn.relu(nn.add(nn.matmul(h, self.fc2_w), self.fc2_b))
        h = nn.dropout(h, self.dropout, training, rng)
        out = nn.add(nn.matmul(h, self.out_w), self.out_b)
        return nn.reshape(out, (batch,))

    def arch(self):
        return {"kind": self.kind, "cond_dim": self.cond_dim,
                "dropout": self.dropout}


class PlacementClstm:
    """Conv encoder shared with the CNN, then 2x200 LSTM and the FC head.

    A chunk of L output frames consumes L+8 padded feature rows; the conv
    output at sequence position j is exactly the center time slice of the
    CNN conv stack applied to frame (start+j)'s 15-frame window.
    """

    kind = "clstm"

    def __init__(self, rng: np.random.Generator, cond_dim: int = 5,
                 dropout: float = 0.5):
        self.cond_dim = cond_dim
        self.dropout = dropout
        self.conv = _ConvStack(rng)
        self.l1 = nn.init_lstm_params(CLSTM_STEP_FLAT + cond_dim,
                                      LSTM_HIDDEN, rng)
        self.l2 = nn.init_lstm_params(LSTM_HIDDEN, LSTM_HIDDEN, rng)
        self.fc1_w, self.fc1_b = nn.dense_params(LSTM_HIDDEN, FC1_WIDTH, rng)
        self.fc2_w, self.fc2_b = nn.dense_params(FC1_WIDTH, FC2_WIDTH, rng)
        self.out_w, self.out_b = nn.dense_params(FC2_WIDTH, 1, rng)

    def parameters(self):
        return (self.conv.tensors() + self.l1.tensors() + self.l2.tensors() +
                [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
                 self.out_w, self.out_b])

    def param_names(self):
        return ["c1_k", "c1_b", "c2_k", "c2_b",
                "l1_wx", "l1_wh", "l1_b", "l2_wx", "l2_wh", "l2_b",
                "fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b"]

    def zero_state(self, batch: int):
        mk = lambda: nn.tensor(np.zeros((batch, LSTM_HIDDEN), dtype=np.float32))
        return ((mk(), mk()), (mk(), mk()))

    @staticmethod
    def detach_state(state):
        return tuple((nn.Tensor(h.data), nn.Tensor(c.data)) for h, c in state)

    def chunk_logits(self, rows: np.ndarray, cond: np.ndarray, state,
                     training: bool, rng: np.random.Generator):
        """(B, L+8, 80, 3) rows -> time-major (L*B,) logits, new state."""
        batch, length = rows.shape[0], rows.shape[1] - CONV_TIME_SHRINK
        conv = self.conv.apply(rows)  # (B, 20, L, 8)
        cond_t = nn.tensor(cond)
        (h1, c1), (h2, c2) = state
        tops = []
        for t in range(length):
            step = nn.reshape(nn.index_axis(conv, 2, t),
                              (batch, CLSTM_STEP_FLAT))
            x = nn.concat([step, cond_t], axis=1)
            h1, c1 = nn.lstm_step(x, h1, c1, self.l1)
            mid = nn.dropout(h1, self.dropout, training, rng)
            h2, c2 = nn.lstm_step(mid, h2, c2, self.l2)
            tops.append(nn.dropout(h2, self.dropout, training, rng))
        seq = nn.concat(tops, axis=0)  # (L*B, 200) time-major
        _expect("clstm lstm output", seq.data, (length * batch, LSTM_HIDDEN))
        h = nn.relu(nn.add(nn.matmul(seq, self.fc1_w), self.fc1_b))
        h = nn.dropout(h, self.dropout, training, rng)
        h = nn.relu(nn.add(nn.matmul(h, self.fc2_w), self.fc2_b))
        h = nn.dropout(h, self.dropout, training, rng)
        out = nn.add(nn.matmul(h, self.out_w), self.out_b)
        return nn.reshape(out, (length * batch,)), ((h1, c1), (h2, c2))

    def arch(self):
        return {"kind": self.kind, "cond_dim": self.cond_dim,
                "dropout": self.dropout}


MODEL_KINDS = ("logreg", "mlp", "cnn", "clstm")


def build_placement_model(kind: str, rng: np.random.Generator,
                          cond_dim: int = 5, dropout: float = 0.5):
    table = {"logreg": PlacementLogReg, "mlp": PlacementMlp,
             "cnn": PlacementCnn, "clstm": PlacementClstm}
    if kind not in table:
        raise ValueError(f"unknown placement model kind {kind!r}")
    return table[kind](rng, cond_dim, dropout)


# ---------------------------------------------------------------------------
# training

@dataclass
class PlacementTrainConfig:
    batch_size: int = 256  # frames per update; unroll windows for the C-LSTM
    unroll: int = 100
    dropout: float = 0.5
    learning_rate: float = 0.1
    clip_norm: float = 5.0
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0


def _chart_window_rows(chart: PlacementChart, start: int, length: int) -> np.ndarray:
    """Padded feature rows feeding a C-LSTM chunk for frames
    [start, start+length)."""
    lo = start + CONTEXT_FRAMES - CONV_HALO
    return chart.padded[lo:lo + length + CONV_TIME_SHRINK]


def _clstm_windows(charts: list[PlacementChart], unroll: int):
    wins = []
    for ci, chart in enumerate(charts):
        for s in range(chart.first, chart.last + 1, unroll):
            wins.append((ci, s, min(unroll, chart.last + 1 - s)))
    return wins


def _feedforward_batch(charts, pairs):
    windows = []
    cond = []
    labels = []
    for ci, frames in pairs:
        chart = charts[ci]
        windows.append(gather_context(chart.padded, frames))
        cond.append(np.tile(chart.cond, (len(frames), 1)))
        labels.append(chart.labels[frames])
    return (np.concatenate(windows), np.concatenate(cond).astype(np.float32),
            np.concatenate(labels))


def _group_frames(index: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Group (chart, frame) rows by chart, preserving nothing but
    membership; gather_context is then one fancy-index per chart."""
    out = []
    for ci in np.unique(index[:, 0]):
        out.append((int(ci), index[index[:, 0] == ci, 1]))
    return out


def train_placement(kind: str, train_charts: list[PlacementChart],
                    valid_charts: list[PlacementChart],
                    cfg: PlacementTrainConfig):
    """SGD with early stopping on pooled validation AUC-PR.

    Returns (model, history); history has one record per epoch.
    """
    if not train_charts or not valid_charts:
        raise ValueError("empty training or validation split")
    cond_dims = {len(c.cond) for c in train_charts + valid_charts}
    if len(cond_dims) != 1:
        raise ValueError(f"inconsistent conditioning widths: {cond_dims}")
    cond_dim = cond_dims.pop()

    init_rng = np.random.Generator(np.random.PCG64(cfg.seed))
    shuffle_rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    drop_rng = np.random.Generator(np.random.PCG64(cfg.seed + 2))
    model = build_placement_model(kind, init_rng, cond_dim, cfg.dropout)
    sgd = nn.SgdConfig(learning_rate=cfg.learning_rate,
                       clip_norm=cfg.clip_norm, batch_size=cfg.batch_size)
    params = model.parameters()

    if kind == "clstm":
        windows = _clstm_windows(train_charts, cfg.unroll)
    else:
        pairs = np.array([(ci, f) for ci, c in enumerate(train_charts)
                          for f in c.eligible()])

    best_auc = -np.inf
    best_params = [p.data.copy() for p in params]
    stale = 0
    history = []
    for epoch in range(cfg.max_epochs):
        if kind == "clstm":
            order = shuffle_rng.permutation(len(windows))
            by_len: dict[int, list[int]] = {}
            for w in order:
                by_len.setdefault(windows[w][2], []).append(w)
            for group in by_len.values():
                for i in range(0, len(group), cfg.batch_size):
                    batch = [windows[w] for w in group[i:i + cfg.batch_size]]
                    rows = np.stack([
                        _chart_window_rows(train_charts[ci], s, l)
                        for ci, s, l in batch])
                    cond = np.stack([train_charts[ci].cond
                                     for ci, _, _ in batch])
                    labels = np.stack([train_charts[ci].labels[s:s + l]
                                       for ci, s, l in batch])
                    state = model.zero_state(len(batch))
                    logits, _ = model.chunk_logits(rows, cond, state, True,
                                                   drop_rng)
                    loss = nn.bce_with_logits_mean(logits,
                                                   labels.T.reshape(-1))
                    nn.backward(loss)
                    nn.clip_and_step(params, sgd)
                    nn.zero_grad(params)
        else:
            order = shuffle_rng.permutation(len(pairs))
            for i in range(0, len(order), cfg.batch_size):
                grouped = _group_frames(pairs[order[i:i + cfg.batch_size]])
                windows_np, cond, labels = _feedforward_batch(train_charts,
                                                              grouped)
                logits = model.logits(windows_np, cond, True, drop_rng)
                loss = nn.bce_with_logits_mean(logits, labels)
                nn.backward(loss)
                nn.clip_and_step(params, sgd)
                nn.zero_grad(params)

        auc = validation_auc_pr(model, valid_charts)
        history.append({"epoch": epoch, "valid_auc_pr": auc})
        if auc > best_auc + 1e-12:
            best_auc = auc
            best_params = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, best in zip(params, best_params):
        p.data = best
    return model, history


def validation_auc_pr(model, charts: list[PlacementChart]) -> float:
    """AUC-PR over the pooled eligible frames of every chart."""
    probs = []
    labels = []
    for chart in charts:
        p = predict_probs(model, chart)
        sel = chart.eligible()
        probs.append(p[sel])
        labels.append(chart.labels[sel])
    return auc_pr(np.concatenate(probs), np.concatenate(labels))


# ---------------------------------------------------------------------------
# prediction

def predict_probs(model, chart: PlacementChart) -> np.ndarray:
    """One step probability per frame for the whole song.

    The C-LSTM runs statefully in chronological 100-frame chunks with the
    hidden state carried across chunk boundaries; feedforward models score
    frames in fixed-size batches. Deterministic for fixed inputs.
    """
    total = chart.num_frames
    if len(chart.cond) != model.cond_dim:
        raise ValueError(f"chart conditioning width {len(chart.cond)} does "
                         f"not match model {model.cond_dim}")
    out = np.empty(total, dtype=np.float64)
    if model.kind == "clstm":
        state = model.zero_state(1)
        for s in range(0, total, PREDICT_CHUNK):
            length = min(PREDICT_CHUNK, total - s)
            rows = _chart_window_rows(chart, s, length)[None]
            logits, state = model.chunk_logits(rows, chart.cond[None], state,
                                               False, _NO_RNG)
            state = model.detach_state(state)
            out[s:s + length] = _sigmoid_np(logits.data)
        return out
    for s in range(0, total, PREDICT_BATCH):
        frames = np.arange(s, min(s + PREDICT_BATCH, total))
        windows = gather_context(chart.padded, frames)
        cond = np.tile(chart.cond, (len(frames), 1)).astype(np.float32)
        logits = model.logits(windows, cond, False, _NO_RNG)
        out[frames] = _sigmoid_np(logits.data)
    return out


_NO_RNG = np.random.Generator(np.random.PCG64(0))  # never drawn in eval


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                    np.exp(z) / (1.0 + np.exp(z)))


# ---------------------------------------------------------------------------
# checkpoints

def save_placement_model(path, model, norm_stats=None, seed=None,
                         extra: dict | None = None) -> None:
    params = {name: p.data for name, p in
              zip(model.param_names(), model.parameters())}
    nn.save_checkpoint(path, model.arch(), params, norm_stats=norm_stats,
                       seed=seed, extra=extra)


def load_placement_model(path):
    ckpt = nn.load_checkpoint(path)
    arch = ckpt["arch"]
    rng = np.random.Generator(np.random.PCG64(0))
    model = build_placement_model(arch["kind"], rng, arch["cond_dim"],
                                  arch.get("dropout", 0.5))
    for name, p in zip(model.param_names(), model.parameters()):
        loaded = ckpt["params"][name]
        if loaded.shape != p.data.shape:
            raise ValueError(f"parameter {name} shape {loaded.shape} does not "
                             f"match architecture {p.data.shape}")
        p.data = loaded
    return model, ckpt


def check_norm_digest(ckpt: dict, stats) -> None:
    """Reject prediction when features were normalized with different
    statistics than the checkpointed model was trained on."""
    stored = ckpt.get("norm_stats")
    if stored is None:
        raise ValueError("checkpoint carries no normalization statistics")
    if stored["digest"] != stats_digest(stats):
        raise ValueError("normalization statistics digest mismatch: features "
                         "were not produced with the training statistics")
