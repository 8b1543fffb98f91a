"""Neural step-selection models: fixed-window MLP and 2-layer LSTM.

Both consume bag-of-arrows token encodings plus optional rhythm features
and emit logits over the 256 arrow combinations. Training uses teacher
forcing with next-token cross-entropy, mini-batches of 64, and early
stopping on validation average per-step cross-entropy (pooled over
steps). The LSTM trains on non-overlapping unroll-length windows with
zero initial state; evaluation resets state on the same window grid;
generation carries state across the whole song.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from choreo import nnkit as nn
from choreo.selection.features import (
    BAG_SIZE,
    EMISSION_SIZE,
    START_INDEX,
    bag_of_arrows,
    rhythm_dims,
    rhythm_features,
)
from choreo.simfile import (
    ArrowState,
    NUM_ARROWS,
    StepCombo,
    TimedStep,
    combo_from_index,
    combo_index,
)

log = logging.getLogger(__name__)

MLP_WINDOW = 4
LSTM_HIDDEN = 128
LSTM_LAYERS = 2
FC1_WIDTH = 256
FC2_WIDTH = 128


@dataclass
class SelectionTrainConfig:
    batch_size: int = 64
    unroll: int = 64
    learning_rate: float = 0.1
    clip_norm: float = 5.0
    dropout: float = 0.5
    max_epochs: int = 100
    patience: int = 10
    use_time: bool = True
    use_beat: bool = True
    seed: int = 0


class SelectionMlp5:
    """Previous 4 steps (bag-of-arrows) + rhythm -> FC256 -> FC128 -> 256."""

    kind = "mlp5"

    def __init__(self, use_time: bool, use_beat: bool, rng: np.random.Generator,
                 dropout: float = 0.5):
        self.use_time = use_time
        self.use_beat = use_beat
        self.dropout = dropout
        self.in_dim = MLP_WINDOW * BAG_SIZE + rhythm_dims(use_time, use_beat)
        self.fc1_w, self.fc1_b = nn.dense_params(self.in_dim, FC1_WIDTH, rng)
        self.fc2_w, self.fc2_b = nn.dense_params(FC1_WIDTH, FC2_WIDTH, rng)
        self.out_w, self.out_b = nn.dense_params(FC2_WIDTH, EMISSION_SIZE, rng)

    def parameters(self) -> list[nn.Tensor]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
                self.out_w, self.out_b]

    def param_names(self) -> list[str]:
        return ["fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b"]

    def logits(self, x: nn.Tensor, training: bool,
               rng: np.random.Generator) -> nn.Tensor:
        h = nn.relu(nn.add(nn.matmul(x, self.fc1_w), self.fc1_b))
        h = nn.dropout(h, self.dropout, training, rng)
        h = nn.relu(nn.add(nn.matmul(h, self.fc2_w), self.fc2_b))
        h = nn.dropout(h, self.dropout, training, rng)
        return nn.add(nn.matmul(h, self.out_w), self.out_b)

    def arch(self) -> dict:
        return {"kind": self.kind, "use_time": self.use_time,
                "use_beat": self.use_beat, "dropout": self.dropout}


class SelectionLstm:
    """Bag-of-arrows + rhythm per step -> 2x128 LSTM -> 256 logits."""

    kind = "lstm"

    def __init__(self, use_time: bool, use_beat: bool, rng: np.random.Generator,
                 dropout: float = 0.5, hidden: int = LSTM_HIDDEN):
        self.use_time = use_time
        self.use_beat = use_beat
        self.dropout = dropout
        self.hidden = hidden
        self.in_dim = BAG_SIZE + rhythm_dims(use_time, use_beat)
        self.l1 = nn.init_lstm_params(self.in_dim, hidden, rng)
        self.l2 = nn.init_lstm_params(hidden, hidden, rng)
        self.out_w, self.out_b = nn.dense_params(hidden, EMISSION_SIZE, rng)

    def parameters(self) -> list[nn.Tensor]:
        return (self.l1.tensors() + self.l2.tensors() +
                [self.out_w, self.out_b])

    def param_names(self) -> list[str]:
        return ["l1_wx", "l1_wh", "l1_b", "l2_wx", "l2_wh", "l2_b",
                "out_w", "out_b"]

    def zero_state(self, batch: int):
        mk = lambda: nn.tensor(np.zeros((batch, self.hidden), dtype=np.float32))
        return ((mk(), mk()), (mk(), mk()))

    @staticmethod
    def detach_state(state):
        return tuple((nn.Tensor(h.data), nn.Tensor(c.data)) for h, c in state)

    def step(self, x: nn.Tensor, state, training: bool,
             rng: np.random.Generator):
        (h1, c1), (h2, c2) = state
        h1n, c1n = nn.lstm_step(x, h1, c1, self.l1)
        mid = nn.dropout(h1n, self.dropout, training, rng)
        h2n, c2n = nn.lstm_step(mid, h2, c2, self.l2)
        top = nn.dropout(h2n, self.dropout, training, rng)
        logits = nn.add(nn.matmul(top, self.out_w), self.out_b)
        return logits, ((h1n, c1n), (h2n, c2n))

    def arch(self) -> dict:
        return {"kind": self.kind, "use_time": self.use_time,
                "use_beat": self.use_beat, "dropout": self.dropout,
                "hidden": self.hidden}


def build_selection_model(kind: str, use_time: bool, use_beat: bool,
                          rng: np.random.Generator, dropout: float = 0.5):
    if kind == "mlp5":
        return SelectionMlp5(use_time, use_beat, rng, dropout)
    if kind == "lstm":
        return SelectionLstm(use_time, use_beat, rng, dropout)
    raise ValueError(f"unknown selection model kind {kind!r}")


# ---------------------------------------------------------------------------
# data assembly (teacher forcing)

def _rhythm_matrix(steps: list[TimedStep], use_time: bool,
                   use_beat: bool) -> np.ndarray:
    return np.stack([rhythm_features(steps, i).vector(use_time, use_beat)
                     for i in range(len(steps))])


def mlp_examples(charts: list[list[TimedStep]], use_time: bool,
                 use_beat: bool) -> tuple[np.ndarray, np.ndarray]:
    """(X, y): 4 previous-token bags (+rhythm of the predicted step)."""
    xs, ys = [], []
    for steps in charts:
        if not steps:
            continue
        tokens = [combo_index(s.combo) for s in steps]
        rhythm = _rhythm_matrix(steps, use_time, use_beat)
        for i, target in enumerate(tokens):
            history = [START_INDEX] * max(0, MLP_WINDOW - i) + \
                tokens[max(0, i - MLP_WINDOW):i]
            bags = [bag_of_arrows(t) for t in history]
            xs.append(np.concatenate(bags + [rhythm[i]]))
            ys.append(target)
    if not xs:
        raise ValueError("no steps in any chart")
    return np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.int64)


def lstm_sequences(charts: list[list[TimedStep]], use_time: bool,
                   use_beat: bool) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per chart: inputs x_i = bag(previous token) + rhythm(step i)."""
    out = []
    for steps in charts:
        if not steps:
            continue
        tokens = [combo_index(s.combo) for s in steps]
        rhythm = _rhythm_matrix(steps, use_time, use_beat)
        prev = [START_INDEX] + tokens[:-1]
        x = np.stack([np.concatenate([bag_of_arrows(p), rhythm[i]])
                      for i, p in enumerate(prev)]).astype(np.float32)
        out.append((x, np.asarray(tokens, dtype=np.int64)))
    if not out:
        raise ValueError("no steps in any chart")
    return out


def _windows(sequences, unroll: int):
    wins = []
    for x, y in sequences:
        for s in range(0, len(y), unroll):
            wins.append((x[s:s + unroll], y[s:s + unroll]))
    return wins


# ---------------------------------------------------------------------------
# forward passes

def _lstm_chunk_loss(model: SelectionLstm, x: np.ndarray, y: np.ndarray,
                     training: bool, rng: np.random.Generator) -> nn.Tensor:
    batch, length = x.shape[0], x.shape[1]
    state = model.zero_state(batch)
    step_logits = []
    for t in range(length):
        logits, state = model.step(nn.tensor(x[:, t, :]), state, training, rng)
        step_logits.append(logits)
    stacked = nn.concat(step_logits, axis=0)  # time-major (L*B, 256)
    labels = y.T.reshape(-1)
    return nn.softmax_cross_entropy(stacked, labels)


def _mlp_valid_ce(model: SelectionMlp5, x: np.ndarray, y: np.ndarray) -> float:
    ce = nn.softmax_cross_entropy(
        model.logits(nn.tensor(x), False, _NO_RNG), y, reduce="none")
    return float(ce.data.astype(np.float64).mean())


_NO_RNG = np.random.Generator(np.random.PCG64(0))  # never drawn from in eval


def _lstm_valid_ce(model: SelectionLstm, sequences, unroll: int) -> float:
    total = 0.0
    count = 0
    for x, y in _windows(sequences, unroll):
        loss = _lstm_chunk_loss(model, x[None], y[None], False, _NO_RNG)
        total += float(loss.data) * len(y)
        count += len(y)
    return total / count


# ---------------------------------------------------------------------------
# training

def train_selection(kind: str, train_charts: list[list[TimedStep]],
                    valid_charts: list[list[TimedStep]],
                    cfg: SelectionTrainConfig):
    """Train an MLP5 or LSTM selection model with early stopping.

    Returns (model, history); history records per-epoch validation CE.
    """
    if not train_charts or not valid_charts:
        raise ValueError("empty training or validation split")
    init_rng = np.random.Generator(np.random.PCG64(cfg.seed))
    shuffle_rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    drop_rng = np.random.Generator(np.random.PCG64(cfg.seed + 2))
    model = build_selection_model(kind, cfg.use_time, cfg.use_beat, init_rng,
                                  cfg.dropout)
    sgd = nn.SgdConfig(learning_rate=cfg.learning_rate,
                       clip_norm=cfg.clip_norm, batch_size=cfg.batch_size)
    params = model.parameters()

    if kind == "mlp5":
        x_train, y_train = mlp_examples(train_charts, cfg.use_time, cfg.use_beat)
        x_valid, y_valid = mlp_examples(valid_charts, cfg.use_time, cfg.use_beat)
        valid_ce = lambda: _mlp_valid_ce(model, x_valid, y_valid)
    else:
        seq_train = lstm_sequences(train_charts, cfg.use_time, cfg.use_beat)
        seq_valid = lstm_sequences(valid_charts, cfg.use_time, cfg.use_beat)
        train_windows = _windows(seq_train, cfg.unroll)
        valid_ce = lambda: _lstm_valid_ce(model, seq_valid, cfg.unroll)

    best_ce = np.inf
    best_params = [p.data.copy() for p in params]
    stale = 0
    history = []
    for epoch in range(cfg.max_epochs):
        if kind == "mlp5":
            order = shuffle_rng.permutation(len(y_train))
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                loss = nn.softmax_cross_entropy(
                    model.logits(nn.tensor(x_train[idx]), True, drop_rng),
                    y_train[idx])
                nn.backward(loss)
                nn.clip_and_step(params, sgd)
                nn.zero_grad(params)
        else:
            order = shuffle_rng.permutation(len(train_windows))
            by_len: dict[int, list[int]] = {}
            for w in order:
                by_len.setdefault(len(train_windows[w][1]), []).append(w)
            for length_group in by_len.values():
                for i in range(0, len(length_group), cfg.batch_size):
                    idx = length_group[i:i + cfg.batch_size]
                    x = np.stack([train_windows[w][0] for w in idx])
                    y = np.stack([train_windows[w][1] for w in idx])
                    loss = _lstm_chunk_loss(model, x, y, True, drop_rng)
                    nn.backward(loss)
                    nn.clip_and_step(params, sgd)
                    nn.zero_grad(params)

        ce = valid_ce()
        history.append({"epoch": epoch, "valid_ce": ce})
        if ce < best_ce - 1e-9:
            best_ce = ce
            best_params = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, best in zip(params, best_params):
        p.data = best
    return model, history


# ---------------------------------------------------------------------------
# prediction

def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def next_step_distribution(model, history_tokens: list[int],
                           rhythm_vec: np.ndarray) -> np.ndarray:
    """256-probability vector for the next step, unmasked."""
    if model.kind == "mlp5":
        history = [START_INDEX] * max(0, MLP_WINDOW - len(history_tokens)) + \
            list(history_tokens)[-MLP_WINDOW:]
        x = np.concatenate([bag_of_arrows(t) for t in history] +
                           [rhythm_vec]).astype(np.float32)
        logits = model.logits(nn.tensor(x[None]), False, _NO_RNG)
        return _softmax_np(logits.data[0])
    state = model.zero_state(1)
    prev = [START_INDEX] + list(history_tokens)
    # rhythm of intermediate steps is unknown here; this path is for tests
    logits = None
    for i, p in enumerate(prev):
        vec = rhythm_vec if i == len(prev) - 1 else np.zeros_like(rhythm_vec)
        x = np.concatenate([bag_of_arrows(p), vec]).astype(np.float32)
        logits, state = model.step(nn.tensor(x[None]), state, False, _NO_RNG)
        state = model.detach_state(state)
    return _softmax_np(logits.data[0])


def sequence_distributions(model, steps: list[TimedStep],
                           unroll: int = 64) -> np.ndarray:
    """(L, 256) next-step distributions under teacher forcing.

    The LSTM resets state every `unroll` steps, matching training; the
    MLP is windowed and needs no reset.
    """
    if model.kind == "mlp5":
        x, _ = mlp_examples([steps], model.use_time, model.use_beat)
        logits = model.logits(nn.tensor(x), False, _NO_RNG)
        return _softmax_np(logits.data)
    (x, _), = lstm_sequences([steps], model.use_time, model.use_beat)
    dists = []
    state = model.zero_state(1)
    for i in range(len(x)):
        if i % unroll == 0:
            state = model.zero_state(1)
        logits, state = model.step(nn.tensor(x[i][None]), state, False, _NO_RNG)
        state = model.detach_state(state)
        dists.append(_softmax_np(logits.data[0]))
    return np.asarray(dists)


# ---------------------------------------------------------------------------
# generation

def _token_states(token: int) -> list[int]:
    return [int(s) for s in combo_from_index(token)]


def valid_token_mask(held: list[bool]) -> np.ndarray:
    """Boolean mask over the 256 combos given currently held arrows.

    All-Off is always invalid; a held arrow admits only Off or HoldEnd; an
    idle arrow admits anything but HoldEnd.
    """
    mask = np.ones(EMISSION_SIZE, dtype=bool)
    mask[0] = False  # all-Off
    for token in range(EMISSION_SIZE):
        for arrow, state in enumerate(_token_states(token)):
            if held[arrow] and state in (int(ArrowState.TAP),
                                         int(ArrowState.HOLD_START)):
                mask[token] = False
                break
            if not held[arrow] and state == int(ArrowState.HOLD_END):
                mask[token] = False
                break
    return mask


def generate(model, times: np.ndarray, beats: np.ndarray | None,
             rng: np.random.Generator, validity_mask: bool = True,
             temperature: float = 1.0) -> list[StepCombo]:
    """Sample one combo per placed timestamp.

    Rhythm features come from the placed grid itself. With the validity
    mask on, combos violating hold rules (and the all-Off combo) get zero
    probability; if the mask empties the distribution, the unmasked argmax
    is used and a warning logged. Dangling holds are converted to taps.
    """
    if model.use_beat and beats is None:
        raise ValueError("model requires beat features but no beats given")
    times = np.asarray(times, dtype=np.float64)
    n = len(times)
    if n == 0:
        return []
    beat_arr = np.zeros(n) if beats is None else np.asarray(beats, dtype=np.float64)
    grid = [TimedStep(beat=beat_arr[i], time=times[i],
                      combo=combo_from_index(0)) for i in range(n)]
    rhythm = _rhythm_matrix(grid, model.use_time, model.use_beat)

    held = [False] * NUM_ARROWS
    hold_started_at = [-1] * NUM_ARROWS
    chosen: list[list[int]] = []
    tokens: list[int] = []
    state = model.zero_state(1) if model.kind == "lstm" else None

    for i in range(n):
        if model.kind == "lstm":
            prev = tokens[-1] if tokens else START_INDEX
            x = np.concatenate([bag_of_arrows(prev), rhythm[i]]).astype(np.float32)
            logits, state = model.step(nn.tensor(x[None]), state, False, _NO_RNG)
            state = model.detach_state(state)
            dist = _softmax_np(logits.data[0])
        else:
            dist = next_step_distribution(model, tokens, rhythm[i])

        if temperature != 1.0:
            warped = np.power(np.clip(dist, 1e-300, None), 1.0 / temperature)
            dist = warped / warped.sum()
        if validity_mask:
            masked = np.where(valid_token_mask(held), dist, 0.0)
            total = masked.sum()
            if total <= 0.0:
                log.warning("validity mask removed all probability mass at "
                            "step %d; falling back to unmasked argmax", i)
                token = int(dist.argmax())
            else:
                token = int(rng.choice(EMISSION_SIZE, p=masked / total))
        else:
            token = int(rng.choice(EMISSION_SIZE, p=dist / dist.sum()))

        states = _token_states(token)
        for arrow, st in enumerate(states):
            if st == int(ArrowState.HOLD_START):
                held[arrow] = True
                hold_started_at[arrow] = i
            elif st == int(ArrowState.HOLD_END):
                held[arrow] = False
        tokens.append(token)
        chosen.append(states)

    for arrow in range(NUM_ARROWS):
        if held[arrow]:
            chosen[hold_started_at[arrow]][arrow] = int(ArrowState.TAP)
            log.warning("dangling hold on arrow %d converted to a tap", arrow)

    return [tuple(ArrowState(s) for s in states) for states in chosen]


# ---------------------------------------------------------------------------
# checkpoints

def save_selection_model(path, model, cfg: SelectionTrainConfig | None = None,
                         extra: dict | None = None) -> None:
    params = {name: p.data for name, p in
              zip(model.param_names(), model.parameters())}
    arch = model.arch()
    if cfg is not None:
        arch["unroll"] = cfg.unroll
    nn.save_checkpoint(path, arch, params,
                       seed=cfg.seed if cfg is not None else None, extra=extra)


def load_selection_model(path):
    ckpt = nn.load_checkpoint(path)
    arch = ckpt["arch"]
    rng = np.random.Generator(np.random.PCG64(0))
    model = build_selection_model(arch["kind"], arch["use_time"],
                                  arch["use_beat"], rng,
                                  arch.get("dropout", 0.5))
    for name, p in zip(model.param_names(), model.parameters()):
        loaded = ckpt["params"][name]
        if loaded.shape != p.data.shape:
            raise ValueError(f"parameter {name} shape {loaded.shape} does not "
                             f"match architecture {p.data.shape}")
        p.data = loaded
    return model, ckpt
