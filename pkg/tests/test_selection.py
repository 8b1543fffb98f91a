"""Tests for selection features, the Kneser-Ney n-gram, and neural models."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import choreo.nnkit as nn
import choreo.selection as sel
from choreo.selection.neural import (
    lstm_sequences,
    mlp_examples,
    save_selection_model,
    sequence_distributions,
    valid_token_mask,
)
from choreo.selection.ngram import kn_distribution, kn_sequence_logprobs
from choreo.simfile import (
    ALL_OFF,
    ArrowState,
    MirrorAxis,
    TimedStep,
    check_hold_states,
    combo_from_index,
    combo_index,
    mirror_combo,
)
from kn_oracle import oracle_prob

START = sel.START_INDEX


def steps_from_tokens(tokens, bpm=120.0, beat_gap=1.0):
    steps = []
    for i, t in enumerate(tokens):
        beat = i * beat_gap
        steps.append(TimedStep(beat=beat, time=beat * 60.0 / bpm,
                               combo=combo_from_index(t)))
    return steps


# ---------------------------------------------------------------------------
# bag-of-arrows and rhythm features

def test_bag_has_exactly_one_state_bit_per_arrow():
    for token in range(256):
        bag = sel.bag_of_arrows(token)
        assert bag.shape == (17,)
        assert bag[-1] == 0.0
        for arrow in range(4):
            assert bag[arrow * 4:(arrow + 1) * 4].sum() == 1.0


def test_bag_bits_match_combo_digits():
    for token in (0, 1, 4, 16, 64, 85, 170, 255, 27):
        combo = combo_from_index(token)
        bag = sel.bag_of_arrows(token)
        for arrow, state in enumerate(combo):
            assert bag[arrow * 4 + int(state)] == 1.0


def test_bag_start_sets_only_flag():
    bag = sel.bag_of_arrows(START)
    assert bag[-1] == 1.0
    assert bag[:-1].sum() == 0.0


def test_bag_rejects_out_of_range():
    with pytest.raises(ValueError):
        sel.bag_of_arrows(-1)
    with pytest.raises(ValueError):
        sel.bag_of_arrows(257)


def test_bag_mirror_permutes_arrow_blocks():
    for token in (3, 27, 140, 201):
        for axis in MirrorAxis:
            mirrored = combo_index(mirror_combo(combo_from_index(token), axis))
            blocks = sorted(tuple(sel.bag_of_arrows(token)[a * 4:a * 4 + 4])
                            for a in range(4))
            mblocks = sorted(tuple(sel.bag_of_arrows(mirrored)[a * 4:a * 4 + 4])
                             for a in range(4))
            assert blocks == mblocks


@pytest.mark.parametrize("beat,idx", [
    (3.0, 0), (3.25, 1), (3.5, 2), (3.75, 3),
    (3.13, 1),       # round(0.52) -> 1
    (2.9, 0),        # round(3.6) -> 4 wraps to 0
    (0.124, 0),      # 0.996 floors to 0
    (0.126, 1),
])
def test_beat_phase_rounds_to_nearest_sixteenth(beat, idx):
    phase = sel.beat_phase(beat)
    assert phase.shape == (4,)
    assert phase.sum() == 1.0
    assert phase[idx] == 1.0


def test_rhythm_interior_deltas():
    steps = steps_from_tokens([1, 4, 16], beat_gap=0.5)  # 120 BPM
    f = sel.rhythm_features(steps, 1)
    assert f.db_prev == 0.5 and f.db_next == 0.5
    assert f.dt_prev == pytest.approx(0.25) and f.dt_next == pytest.approx(0.25)
    assert f.phase[2] == 1.0  # beat 0.5 -> eighth-note offset


def test_rhythm_boundary_copies_opposite_side():
    steps = steps_from_tokens([1, 4, 16], beat_gap=0.5)
    first = sel.rhythm_features(steps, 0)
    assert first.dt_prev == first.dt_next == pytest.approx(0.25)
    assert first.db_prev == first.db_next == 0.5
    last = sel.rhythm_features(steps, 2)
    assert last.dt_prev == last.dt_next == pytest.approx(0.25)
    assert last.db_prev == last.db_next == 0.5


def test_rhythm_single_step_is_zero_deltas():
    steps = steps_from_tokens([5])
    f = sel.rhythm_features(steps, 0)
    assert f.dt_prev == f.dt_next == f.db_prev == f.db_next == 0.0
    assert f.phase[0] == 1.0


def test_rhythm_clamps_large_gaps():
    steps = [TimedStep(beat=0.0, time=0.0, combo=combo_from_index(1)),
             TimedStep(beat=500.0, time=100.0, combo=combo_from_index(4))]
    f = sel.rhythm_features(steps, 1)
    assert f.dt_prev == 60.0
    assert f.db_prev == 120.0


def test_rhythm_vector_layout_and_widths():
    from choreo.selection.features import rhythm_dims
    assert rhythm_dims(True, False) == 2
    assert rhythm_dims(False, True) == 6
    assert rhythm_dims(True, True) == 8
    steps = steps_from_tokens([1, 4, 16], beat_gap=0.5)
    f = sel.rhythm_features(steps, 1)
    both = f.vector(True, True)
    assert both.shape == (8,)
    assert both[0] == f.dt_prev and both[1] == f.dt_next
    assert both[2] == f.db_prev and both[3] == f.db_next
    assert np.array_equal(both[4:], f.phase)
    assert f.vector(True, False).shape == (2,)
    assert f.vector(False, False).shape == (0,)


# ---------------------------------------------------------------------------
# Kneser-Ney n-gram vs direct-formula oracle

TOY_VOCAB = [0, 1]
TOY_CORPUS = [[0, 1, 1, 0, 1], [1, 1, 0, 0], [0, 0, 1, 0, 1, 1, 0]]


def toy_model():
    return sel.kn_train(TOY_CORPUS, TOY_VOCAB, n=5)


def all_toy_contexts():
    for length in range(5):
        for ctx in itertools.product(TOY_VOCAB, repeat=length):
            yield list(ctx)
    for length in range(4):
        for ctx in itertools.product(TOY_VOCAB, repeat=length):
            yield [START] + list(ctx)


def test_kn_matches_oracle_on_every_context():
    model = toy_model()
    for ctx in all_toy_contexts():
        for token in TOY_VOCAB:
            got = sel.kn_prob(model, ctx, token)
            want = oracle_prob(TOY_CORPUS, ctx, token, TOY_VOCAB, n=5,
                               start=START)
            assert got == pytest.approx(want, abs=1e-9), (ctx, token)


def test_kn_distributions_sum_to_one():
    model = toy_model()
    for ctx in all_toy_contexts():
        dist = kn_distribution(model, ctx)
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9), ctx


def test_kn_full_vocab_distribution_sums_to_one():
    rng = np.random.default_rng(7)
    corpus = [rng.integers(0, 256, size=40).tolist() for _ in range(3)]
    model = sel.kn_train(corpus, list(range(256)), n=5)
    for ctx in ([], [corpus[0][0]], corpus[0][:4], [9999 % 256] * 4):
        dist = kn_distribution(model, ctx)
        assert len(dist) == 256
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)


def test_kn_unseen_token_gets_positive_probability():
    model = sel.kn_train([[0, 1, 0, 1, 1]], [0, 1, 2], n=5)
    assert sel.kn_prob(model, [0, 1], 2) > 0.0
    assert sel.kn_prob(model, [], 2) > 0.0


def test_kn_long_context_truncates_to_order():
    model = toy_model()
    assert sel.kn_prob(model, [0] * 10, 1) == sel.kn_prob(model, [0] * 4, 1)


def test_kn_train_rejects_bad_input():
    with pytest.raises(ValueError):
        sel.kn_train([], TOY_VOCAB)
    with pytest.raises(ValueError):
        sel.kn_train([[0, START, 1]], TOY_VOCAB)
    with pytest.raises(ValueError):
        sel.kn_train([[0, 1]], [0, 1, START])
    with pytest.raises(ValueError):
        sel.kn_train([[0, 7]], [0, 1])
    model = toy_model()
    with pytest.raises(ValueError):
        sel.kn_prob(model, [], START)
    with pytest.raises(ValueError):
        sel.kn_prob(model, [], 9)


def test_kn_degenerate_corpus_falls_back_to_default_discounts():
    # one repeated symbol: no count-of-count mass for D1/D3 at order 1
    model = sel.kn_train([[0, 0, 0, 0, 0, 0]], [0, 1], n=3)
    d1, d2, d3 = model.discounts[1]
    assert d1 == 0.5 and d3 == 1.5
    for ctx in ([], [0], [1], [0, 0]):
        dist = kn_distribution(model, ctx)
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)
        assert dist[1] > 0.0
        got = sel.kn_prob(model, ctx, 0)
        want = oracle_prob([[0, 0, 0, 0, 0, 0]], ctx, 0, [0, 1], n=3,
                           start=START)
        assert got == pytest.approx(want, abs=1e-9)


def test_kn_sequence_logprobs_match_chain():
    model = toy_model()
    tokens = [0, 1, 1, 0]
    logs = kn_sequence_logprobs(model, tokens)
    history = [START]
    for t, lp in zip(tokens, logs):
        assert lp == pytest.approx(math.log(sel.kn_prob(model, history, t)))
        history.append(t)


def test_kn_model_file_round_trip(tmp_path):
    model = toy_model()
    path = tmp_path / "model.kn"
    sel.save_kn_model(path, model)
    loaded = sel.load_kn_model(path)
    assert loaded.n == model.n and loaded.vocab == model.vocab
    assert loaded.counts == model.counts
    for ctx in ([], [0], [1, 1], [START, 0]):
        for t in TOY_VOCAB:
            assert sel.kn_prob(loaded, ctx, t) == sel.kn_prob(model, ctx, t)


def test_kn_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.kn"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ValueError):
        sel.load_kn_model(path)


@settings(max_examples=25, deadline=None)
@given(
    corpus=st.lists(st.lists(st.integers(0, 2), max_size=8),
                    min_size=1, max_size=4),
    ctx=st.lists(st.integers(0, 2), max_size=4),
    token=st.integers(0, 2),
)
def test_kn_matches_oracle_on_random_corpora(corpus, ctx, token):
    model = sel.kn_train(corpus, [0, 1, 2], n=4)
    got = sel.kn_prob(model, ctx, token)
    want = oracle_prob(corpus, ctx, token, [0, 1, 2], n=4, start=START)
    assert got == pytest.approx(want, abs=1e-9)
    assert sum(kn_distribution(model, ctx).values()) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# neural model shapes and data assembly

def rng_of(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def test_mlp5_layer_shapes():
    model = sel.build_selection_model("mlp5", True, True, rng_of())
    assert model.in_dim == 4 * 17 + 8 == 76
    assert model.fc1_w.shape == (76, 256)
    assert model.fc2_w.shape == (256, 128)
    assert model.out_w.shape == (128, 256)
    bare = sel.build_selection_model("mlp5", False, False, rng_of())
    assert bare.in_dim == 68


def test_lstm_layer_shapes():
    model = sel.build_selection_model("lstm", True, False, rng_of())
    assert model.in_dim == 19
    assert model.l1.wx.shape == (19, 512)
    assert model.l1.wh.shape == (128, 512)
    assert model.l2.wx.shape == (128, 512)
    assert model.out_w.shape == (128, 256)
    beat_only = sel.build_selection_model("lstm", False, True, rng_of())
    assert beat_only.in_dim == 23


def test_build_rejects_unknown_kind():
    with pytest.raises(ValueError):
        sel.build_selection_model("transformer", True, True, rng_of())


def test_mlp_examples_window_padding():
    steps = steps_from_tokens([7, 11, 13])
    x, y = mlp_examples([steps], True, False)
    assert x.shape == (3, 70) and y.tolist() == [7, 11, 13]
    start_bag = sel.bag_of_arrows(START)
    # first row: four START bags
    for w in range(4):
        assert np.array_equal(x[0, w * 17:(w + 1) * 17], start_bag)
    # second row: three STARTs then bag(7)
    assert np.array_equal(x[1, 3 * 17:4 * 17], sel.bag_of_arrows(7))
    assert np.array_equal(x[1, 2 * 17:3 * 17], start_bag)
    # third row: bags of (START, START, 7, 11)
    assert np.array_equal(x[2, 2 * 17:3 * 17], sel.bag_of_arrows(7))
    assert np.array_equal(x[2, 3 * 17:4 * 17], sel.bag_of_arrows(11))


def test_lstm_sequences_shift_tokens():
    steps = steps_from_tokens([7, 11, 13])
    (x, y), = lstm_sequences([steps], True, False)
    assert x.shape == (3, 19) and y.tolist() == [7, 11, 13]
    assert np.array_equal(x[0, :17], sel.bag_of_arrows(START))
    assert np.array_equal(x[1, :17], sel.bag_of_arrows(7))
    assert np.array_equal(x[2, :17], sel.bag_of_arrows(11))


def chart_perplexity(model, steps, unroll=64):
    dists = sequence_distributions(model, steps, unroll=unroll)
    targets = [combo_index(s.combo) for s in steps]
    logs = [math.log(dists[i][t]) for i, t in enumerate(targets)]
    return math.exp(-sum(logs) / len(logs))


def test_untrained_models_near_uniform():
    steps = steps_from_tokens(list(rng_of(3).integers(0, 256, size=40)))
    for kind in ("mlp5", "lstm"):
        model = sel.build_selection_model(kind, True, False, rng_of(1))
        ppl = chart_perplexity(model, steps)
        assert 150.0 < ppl < 400.0


def test_next_step_distribution_is_normalized():
    model = sel.build_selection_model("mlp5", True, False, rng_of(2))
    steps = steps_from_tokens([1, 4, 16, 64, 1])
    vec = sel.rhythm_features(steps, 4).vector(True, False)
    dist = sel.next_step_distribution(model, [1, 4, 16, 64], vec)
    assert dist.shape == (256,)
    assert dist.sum() == pytest.approx(1.0, abs=1e-6)
    assert (dist > 0.0).all()


def test_lstm_chunked_eval_resets_state():
    model = sel.build_selection_model("lstm", True, False, rng_of(4))
    steps = steps_from_tokens(list(rng_of(5).integers(0, 256, size=20)))
    dists = sequence_distributions(model, steps, unroll=8)
    (x, _), = lstm_sequences([steps], True, False)
    # rows 8.. should be reproducible from a fresh zero state
    state = model.zero_state(1)
    for i in range(8, 12):
        logits, state = model.step(nn.tensor(x[i][None]), state, False, rng_of())
        probs = np.exp(logits.data[0].astype(np.float64))
        probs /= probs.sum()
        assert np.allclose(probs, dists[i], atol=1e-6)


# ---------------------------------------------------------------------------
# training convergence

def test_mlp_learns_repeating_cycle():
    cycle = [1, 4, 16, 64]
    tokens = (cycle * 10)[:40]
    charts = [steps_from_tokens(tokens) for _ in range(4)]
    cfg = sel.SelectionTrainConfig(learning_rate=0.5, dropout=0.0,
                                   max_epochs=200, patience=30,
                                   use_time=True, use_beat=False, seed=0)
    model, history = sel.train_selection("mlp5", charts, charts, cfg)
    assert history, "no epochs recorded"
    ppl = chart_perplexity(model, charts[0])
    assert ppl < 1.02


def test_lstm_learns_alternation():
    tokens = [1, 4] * 24
    charts = [steps_from_tokens(tokens) for _ in range(4)]
    cfg = sel.SelectionTrainConfig(learning_rate=0.5, dropout=0.0,
                                   batch_size=4, unroll=16,
                                   max_epochs=250, patience=40,
                                   use_time=True, use_beat=False, seed=1)
    model, history = sel.train_selection("lstm", charts, charts, cfg)
    ppl = chart_perplexity(model, charts[0], unroll=16)
    assert ppl < 1.05
    dists = sequence_distributions(model, charts[0], unroll=16)
    acc = np.mean(dists.argmax(axis=1) == np.array(tokens))
    assert acc == 1.0


def test_training_restores_best_epoch():
    tokens = ([1, 4, 16, 64] * 8)[:30]
    charts = [steps_from_tokens(tokens)]
    cfg = sel.SelectionTrainConfig(learning_rate=0.5, dropout=0.0,
                                   max_epochs=40, patience=40,
                                   use_time=True, use_beat=False, seed=0)
    model, history = sel.train_selection("mlp5", charts, charts, cfg)
    best = min(h["valid_ce"] for h in history)
    got = math.log(chart_perplexity(model, charts[0]))
    assert got == pytest.approx(best, abs=1e-6)


def test_train_rejects_empty_split():
    with pytest.raises(ValueError):
        sel.train_selection("mlp5", [], [steps_from_tokens([1])],
                            sel.SelectionTrainConfig())


# ---------------------------------------------------------------------------
# generation

def test_valid_token_mask_counts():
    none_held = valid_token_mask([False] * 4)
    # Off/Tap/HoldStart per arrow, minus the all-Off combo
    assert none_held.sum() == 3 ** 4 - 1
    assert not none_held[0]
    one_held = valid_token_mask([True, False, False, False])
    # held arrow: Off or HoldEnd; others: Off/Tap/HoldStart; minus all-Off
    assert one_held.sum() == 2 * 27 - 1
    # ending the hold alone is legal: combo "3000" = 3 * 64
    assert one_held[3 * 64]
    # tapping the held arrow is not: combo "1000"
    assert not one_held[1 * 64]


@pytest.mark.parametrize("kind", ["mlp5", "lstm"])
def test_generation_respects_hold_rules(kind):
    model = sel.build_selection_model(kind, True, False, rng_of(11))
    times = np.arange(120) * 0.25
    combos = sel.generate(model, times, None, rng_of(12), validity_mask=True)
    assert len(combos) == 120
    assert all(c != ALL_OFF for c in combos)
    assert check_hold_states(combos) is None
    # dangling holds were repaired: every arrow ends released
    held = [False] * 4
    for combo in combos:
        for a, st_ in enumerate(combo):
            if st_ == ArrowState.HOLD_START:
                held[a] = True
            elif st_ == ArrowState.HOLD_END:
                held[a] = False
    assert held == [False] * 4


def test_generation_deterministic_per_seed():
    model = sel.build_selection_model("lstm", True, False, rng_of(21))
    times = np.arange(60) * 0.2
    a = sel.generate(model, times, None, rng_of(5))
    b = sel.generate(model, times, None, rng_of(5))
    c = sel.generate(model, times, None, rng_of(6))
    assert a == b
    assert a != c


def test_generation_unmasked_can_emit_anything():
    model = sel.build_selection_model("mlp5", True, False, rng_of(31))
    times = np.arange(300) * 0.1
    combos = sel.generate(model, times, None, rng_of(7), validity_mask=False)
    # unmasked sampling from a near-uniform model violates hold rules fast
    assert check_hold_states(combos) is not None


def test_generation_requires_beats_for_beat_features():
    model = sel.build_selection_model("lstm", False, True, rng_of(41))
    with pytest.raises(ValueError):
        sel.generate(model, np.arange(4) * 0.5, None, rng_of(1))
    beats = np.arange(4) * 1.0
    combos = sel.generate(model, np.arange(4) * 0.5, beats, rng_of(1))
    assert len(combos) == 4


def test_generation_empty_times():
    model = sel.build_selection_model("mlp5", True, False, rng_of(51))
    assert sel.generate(model, np.array([]), None, rng_of(1)) == []


class _SaturatedAllOff:
    """Stub whose softmax underflows to exactly [1, 0, ..., 0]."""
    kind = "mlp5"
    use_time = True
    use_beat = False

    def logits(self, x, training, rng):
        out = np.full((x.data.shape[0], 256), -2000.0, dtype=np.float32)
        out[:, 0] = 0.0
        return nn.tensor(out)


def test_generation_empty_mask_falls_back_to_argmax(caplog):
    times = np.arange(3) * 0.5
    with caplog.at_level("WARNING", logger="choreo.selection.neural"):
        combos = sel.generate(_SaturatedAllOff(), times, None, rng_of(1))
    assert "falling back" in caplog.text
    assert combos[0] == ALL_OFF


def test_generation_temperature_still_valid():
    model = sel.build_selection_model("lstm", True, False, rng_of(61))
    times = np.arange(50) * 0.3
    combos = sel.generate(model, times, None, rng_of(2), temperature=0.7)
    assert check_hold_states(combos) is None


# ---------------------------------------------------------------------------
# checkpoints

def test_selection_model_checkpoint_round_trip(tmp_path):
    cfg = sel.SelectionTrainConfig(use_time=True, use_beat=False, seed=9)
    model = sel.build_selection_model("lstm", cfg.use_time, cfg.use_beat,
                                      rng_of(cfg.seed))
    path = tmp_path / "sel.ckpt"
    save_selection_model(path, model, cfg, extra={"note": "test"})
    loaded, ckpt = sel.load_selection_model(path)
    assert ckpt["arch"]["kind"] == "lstm"
    assert ckpt["extra"] == {"note": "test"}
    steps = steps_from_tokens(list(rng_of(1).integers(0, 256, size=12)))
    a = sequence_distributions(model, steps)
    b = sequence_distributions(loaded, steps)
    assert np.array_equal(a, b)


def test_selection_checkpoint_shape_mismatch(tmp_path):
    model = sel.build_selection_model("mlp5", True, False, rng_of(3))
    path = tmp_path / "sel.ckpt"
    params = {name: p.data for name, p in
              zip(model.param_names(), model.parameters())}
    arch = model.arch()
    arch["use_beat"] = True  # widths no longer match the stored blobs
    nn.save_checkpoint(path, arch, params)
    with pytest.raises(ValueError):
        sel.load_selection_model(path)
