"""Gradient checks and unit tests for the autodiff kernel.

Every differentiable op is checked against central finite differences in
float64 (eps = 1e-5, elementwise rtol 1e-4) on randomized shapes.
"""

import numpy as np
import pytest

from choreo import nnkit as nn
from choreo.nnkit.autodiff import Tensor


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def t64(data):
    return nn.tensor(data, requires_grad=True, dtype=np.float64)


def check_grads(build, wrt, eps=1e-5, rtol=1e-4, atol=1e-6):
    """Compare analytic gradients of build() (a fresh scalar loss) to
    central finite differences for each tensor in `wrt`."""
    nn.zero_grad(wrt)  # tensors may be reused across checks
    loss = build()
    nn.backward(loss)
    analytic = [w.grad.copy() for w in wrt]
    for w, a in zip(wrt, analytic):
        numeric = np.zeros_like(w.data)
        flat = w.data.reshape(-1)
        nf = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(build().data)
            flat[i] = orig - eps
            fm = float(build().data)
            flat[i] = orig
            nf[i] = (fp - fm) / (2.0 * eps)
        assert np.allclose(a, numeric, rtol=rtol, atol=atol), \
            f"gradient mismatch: max diff {np.max(np.abs(a - numeric))}"


def project(out: Tensor, seed: int) -> Tensor:
    r = rng(seed + 1000).normal(size=out.shape)
    return nn.total_sum(nn.mul(out, nn.tensor(r, dtype=np.float64)))


SEEDS = list(range(10))


# ---------------------------------------------------------------------------
# elementwise and linear ops

@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_sub_mul(seed):
    g = rng(seed)
    shape = tuple(g.integers(1, 6, size=g.integers(1, 4)))
    a, b = t64(g.normal(size=shape)), t64(g.normal(size=shape))
    check_grads(lambda: project(nn.add(a, b), seed), [a, b])
    check_grads(lambda: project(nn.sub(a, b), seed), [a, b])
    check_grads(lambda: project(nn.mul(a, b), seed), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_bias_add(seed):
    g = rng(seed)
    rows, cols = int(g.integers(1, 7)), int(g.integers(1, 7))
    a, b = t64(g.normal(size=(rows, cols))), t64(g.normal(size=cols))
    check_grads(lambda: project(nn.add(a, b), seed), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    g = rng(seed)
    m, k, n = (int(v) for v in g.integers(1, 8, size=3))
    a, b = t64(g.normal(size=(m, k))), t64(g.normal(size=(k, n)))
    check_grads(lambda: project(nn.matmul(a, b), seed), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_activations(seed):
    g = rng(seed)
    shape = tuple(g.integers(1, 6, size=2))
    x = t64(g.normal(size=shape) * 2.0)
    # keep relu inputs away from the kink
    x.data[np.abs(x.data) < 0.05] += 0.1
    check_grads(lambda: project(nn.relu(x), seed), [x])
    check_grads(lambda: project(nn.sigmoid(x), seed), [x])
    check_grads(lambda: project(nn.tanh(x), seed), [x])
    check_grads(lambda: project(nn.exp(x), seed), [x])
    pos = t64(np.abs(g.normal(size=shape)) + 0.5)
    check_grads(lambda: project(nn.log(pos), seed), [pos])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax(seed):
    g = rng(seed)
    x = t64(g.normal(size=(int(g.integers(1, 5)), int(g.integers(2, 9)))))
    check_grads(lambda: project(nn.softmax(x), seed), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_shape_ops(seed):
    g = rng(seed)
    x = t64(g.normal(size=(3, 4)))
    check_grads(lambda: nn.total_sum(x), [x])
    check_grads(lambda: nn.mean(x), [x])
    check_grads(lambda: project(nn.reshape(x, (2, 6)), seed), [x])
    check_grads(lambda: project(nn.slice_axis(x, 1, 1, 3), seed), [x])
    check_grads(lambda: project(nn.index_axis(x, 0, 1), seed), [x])
    y = t64(g.normal(size=(3, 2)))
    check_grads(lambda: project(nn.concat([x, y], axis=1), seed), [x, y])
    check_grads(lambda: project(nn.scale(x, -1.7), seed), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_dropout(seed):
    g = rng(seed)
    x = t64(g.normal(size=(4, 5)))
    check_grads(
        lambda: project(nn.dropout(x, 0.5, True, rng(seed + 99)), seed), [x])
    check_grads(lambda: project(nn.dropout(x, 0.5, False, rng(0)), seed), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    g = rng(seed)
    b, c_in, c_out = (int(v) for v in g.integers(1, 4, size=3))
    kh, kw = int(g.integers(1, 4)), int(g.integers(1, 4))
    h, w = kh + int(g.integers(0, 4)), kw + int(g.integers(0, 4))
    x = t64(g.normal(size=(b, c_in, h, w)))
    k = t64(g.normal(size=(c_out, c_in, kh, kw)))
    bias = t64(g.normal(size=c_out))
    check_grads(lambda: project(nn.conv2d(x, k, bias), seed), [x, k, bias])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_maxpool_freq(seed):
    g = rng(seed)
    shape = (int(g.integers(1, 3)), int(g.integers(1, 4)), int(g.integers(3, 13)))
    x = t64(g.normal(size=shape) * 10.0)
    check_grads(lambda: project(nn.maxpool_freq(x), seed), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_lstm_step(seed):
    g = rng(seed)
    batch, in_dim, hidden = int(g.integers(1, 4)), int(g.integers(1, 5)), \
        int(g.integers(1, 5))
    p = nn.init_lstm_params(in_dim, hidden, g)
    for tns in p.tensors():
        tns.data = tns.data.astype(np.float64)
    x = t64(g.normal(size=(batch, in_dim)))
    h = t64(g.normal(size=(batch, hidden)))
    c = t64(g.normal(size=(batch, hidden)))

    def build():
        h_t, c_t = nn.lstm_step(x, h, c, p)
        return nn.add(project(h_t, seed), project(c_t, seed + 1))
    check_grads(build, [x, h, c, p.wx, p.wh, p.b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_losses(seed):
    g = rng(seed)
    n = int(g.integers(2, 8))
    y = (g.random(n) > 0.5).astype(np.float64)
    p = t64(g.uniform(0.05, 0.95, size=n))
    check_grads(lambda: nn.bce_mean(p, y), [p])
    z = t64(g.normal(size=n) * 2.0)
    check_grads(lambda: nn.bce_with_logits_mean(z, y), [z])
    k = int(g.integers(2, 7))
    logits = t64(g.normal(size=(n, k)))
    labels = g.integers(0, k, size=n)
    check_grads(lambda: nn.softmax_cross_entropy(logits, labels), [logits])
    check_grads(
        lambda: project(nn.softmax_cross_entropy(logits, labels, reduce="none"),
                        seed), [logits])


def test_grad_accumulates_across_shared_use():
    # the same parameter used at two unrolled steps collects both terms
    w = t64(np.array([[2.0]]))
    x = t64(np.array([[3.0]]))
    y1 = nn.matmul(x, w)
    y2 = nn.matmul(y1, w)
    nn.backward(nn.total_sum(y2))
    # d/dw (w^2 x) = 2wx = 12
    assert w.grad == pytest.approx(np.array([[12.0]]))


# ---------------------------------------------------------------------------
# forward semantics

def test_relu_sigmoid_values():
    x = nn.tensor([-1.0, 0.0, 2.0])
    assert np.allclose(nn.relu(x).data, [0.0, 0.0, 2.0])
    assert nn.sigmoid(nn.tensor([0.0])).data[0] == pytest.approx(0.5)


def test_conv_and_pool_shapes():
    g = rng(0)
    x = nn.tensor(g.normal(size=(2, 3, 15, 80)))
    k, b = nn.tensor(g.normal(size=(10, 3, 7, 3))), nn.tensor(np.zeros(10))
    out = nn.conv2d(x, k, b)
    assert out.shape == (2, 10, 9, 78)
    pooled = nn.maxpool_freq(out)
    assert pooled.shape == (2, 10, 9, 26)
    k2, b2 = nn.tensor(g.normal(size=(20, 10, 3, 3))), nn.tensor(np.zeros(20))
    out2 = nn.maxpool_freq(nn.conv2d(pooled, k2, b2))
    assert out2.shape == (2, 20, 7, 8)


def test_lstm_step_zero_params_zero_state():
    p = nn.init_lstm_params(3, 4, rng(0))
    for tns in p.tensors():
        tns.data = np.zeros_like(tns.data)
    x = nn.tensor(np.zeros((2, 3)))
    h = nn.tensor(np.zeros((2, 4)))
    c = nn.tensor(np.zeros((2, 4)))
    h_t, c_t = nn.lstm_step(x, h, c, p)
    assert np.all(h_t.data == 0.0)
    assert np.all(c_t.data == 0.0)


def test_lstm_forget_bias_initialized_to_one():
    p = nn.init_lstm_params(3, 4, rng(0))
    assert np.all(p.b.data[4:8] == 1.0)
    assert np.all(p.b.data[:4] == 0.0)
    assert np.all(p.b.data[8:] == 0.0)


def test_shape_errors_name_both_shapes():
    a, b = nn.tensor(np.zeros((2, 3))), nn.tensor(np.zeros((4, 5)))
    with pytest.raises(nn.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nn.matmul(a, b)
    with pytest.raises(nn.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nn.add(a, b)


def test_backward_rejects_non_scalar():
    x = nn.tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(nn.ShapeError, match="scalar"):
        nn.backward(nn.relu(x))


def test_softmax_sums_to_one_and_shift_invariant():
    g = rng(1)
    x = g.normal(size=(6, 11)) * 3.0
    y1 = nn.softmax(nn.tensor(x, dtype=np.float64)).data
    assert np.allclose(y1.sum(axis=1), 1.0, atol=1e-9)
    y2 = nn.softmax(nn.tensor(x + 123.4, dtype=np.float64)).data
    assert np.allclose(y1, y2, atol=1e-9)


def test_dropout_inverted_expectation():
    g = rng(2)
    x = nn.tensor(np.ones((200, 200)))
    out = nn.dropout(x, 0.5, True, g)
    assert abs(out.data.mean() - 1.0) < 0.01
    kept = out.data[out.data != 0]
    assert np.allclose(kept, 2.0)


def test_dropout_eval_is_identity():
    x = nn.tensor(rng(3).normal(size=(5, 5)))
    out = nn.dropout(x, 0.5, False, rng(4))
    assert np.array_equal(out.data, x.data)


def test_dense_grad_equals_weight_column_sums():
    g = rng(5)
    w = t64(g.normal(size=(4, 3)))
    b = t64(g.normal(size=3))
    x = t64(g.normal(size=(1, 4)))
    nn.backward(nn.total_sum(nn.add(nn.matmul(x, w), b)))
    assert np.allclose(x.grad, w.data.sum(axis=1)[None, :])


def test_debug_nan_check():
    x = nn.tensor(np.array([1.0, -1.0]))
    with np.errstate(invalid="ignore"):
        with nn.DebugNanCheck():
            with pytest.raises(FloatingPointError, match="log"):
                nn.log(x)
        nn.log(x)  # outside debug mode: allowed to produce nan silently


# ---------------------------------------------------------------------------
# losses: values

def test_bce_values():
    p = nn.tensor([0.5], dtype=np.float64)
    assert float(nn.bce_mean(p, np.array([1.0])).data) == pytest.approx(np.log(2.0))
    # minimized at p == y
    ps = np.linspace(0.01, 0.99, 99)
    losses = [float(nn.bce_mean(nn.tensor([v], dtype=np.float64),
                                np.array([1.0])).data) for v in ps]
    assert np.argmin(losses) == len(ps) - 1


def test_bce_clamps_extremes():
    p = nn.tensor([0.0, 1.0], dtype=np.float64)
    val = float(nn.bce_mean(p, np.array([1.0, 0.0])).data)
    assert val == pytest.approx(-np.log(1e-7), rel=1e-6)
    assert np.isfinite(val)


def test_bce_with_logits_matches_composed():
    g = rng(6)
    z = g.normal(size=50) * 3
    y = (g.random(50) > 0.5).astype(np.float64)
    fused = float(nn.bce_with_logits_mean(nn.tensor(z, dtype=np.float64), y).data)
    p = 1.0 / (1.0 + np.exp(-z))
    composed = np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))
    assert fused == pytest.approx(composed, rel=1e-9)


def test_cross_entropy_uniform_256():
    logits = nn.tensor(np.zeros((1, 256)), dtype=np.float64)
    val = float(nn.softmax_cross_entropy(logits, np.array([37])).data)
    assert val == pytest.approx(np.log(256.0))


# ---------------------------------------------------------------------------
# initializer

def test_glorot_bound_and_variance():
    bound = np.sqrt(6.0 / 6.0)
    w = nn.glorot_init(3, 3, rng(7), shape=(100, 1000))
    assert np.all(np.abs(w) <= bound)
    var = w.astype(np.float64).var()
    assert abs(var - 2.0 / 6.0) / (2.0 / 6.0) < 0.05


def test_glorot_deterministic():
    a = nn.glorot_init(10, 20, rng(42))
    b = nn.glorot_init(10, 20, rng(42))
    assert np.array_equal(a, b)


def test_glorot_rejects_bad_fans():
    with pytest.raises(ValueError):
        nn.glorot_init(0, 5, rng(0))


# ---------------------------------------------------------------------------
# optimizer

def test_clip_scales_to_norm():
    p = nn.tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([6.0, 8.0], dtype=np.float32)  # norm 10
    cfg = nn.SgdConfig(learning_rate=1.0, clip_norm=5.0)
    norm = nn.clip_and_step([p], cfg)
    assert norm == pytest.approx(10.0)
    assert np.allclose(p.data, [-3.0, -4.0])  # scaled by 0.5


def test_clip_leaves_small_grads():
    p = nn.tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 3.0], dtype=np.float32)  # norm ~4.24 < 5
    nn.clip_and_step([p], nn.SgdConfig(learning_rate=0.1))
    assert np.allclose(p.data, [-0.3, -0.3])


def test_post_clip_norm_bounded():
    g = rng(8)
    for _ in range(20):
        params = [nn.tensor(np.zeros(5), requires_grad=True) for _ in range(3)]
        for p in params:
            p.grad = (g.normal(size=5) * g.uniform(0.1, 10)).astype(np.float32)
        norm = nn.global_grad_norm(params)
        scale = min(1.0, 5.0 / norm)
        assert norm * scale <= 5.0 + 1e-9


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        nn.SgdConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        nn.SgdConfig(clip_norm=-1.0)


def test_zero_grad():
    p = nn.tensor(np.zeros(3), requires_grad=True)
    p.grad = np.ones(3, dtype=np.float32)
    nn.zero_grad([p])
    assert p.grad is None


# ---------------------------------------------------------------------------
# determinism

def train_tiny(seed: int) -> bytes:
    g = rng(seed)
    w, b = nn.dense_params(4, 2, g)
    data = rng(123).normal(size=(32, 4))
    labels = rng(124).integers(0, 2, size=32)
    cfg = nn.SgdConfig(learning_rate=0.1, batch_size=8)
    for epoch in range(3):
        for i in range(0, 32, 8):
            x = nn.tensor(data[i:i + 8])
            loss = nn.softmax_cross_entropy(
                nn.add(nn.matmul(x, w), b), labels[i:i + 8])
            nn.backward(loss)
            nn.clip_and_step([w, b], cfg)
            nn.zero_grad([w, b])
    return w.data.tobytes() + b.data.tobytes()


def test_training_bitwise_deterministic():
    assert train_tiny(9) == train_tiny(9)
    assert train_tiny(9) != train_tiny(10)


# ---------------------------------------------------------------------------
# checkpoint

def test_checkpoint_round_trip(tmp_path):
    g = rng(11)
    params = {"w1": g.normal(size=(4, 3)).astype(np.float32),
              "b1": g.normal(size=3).astype(np.float32)}
    arch = {"kind": "mlp", "hidden": [256, 128]}
    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(path, arch, params, norm_stats={"mean": [0.0]},
                       seed=7, extra={"epoch": 3})
    loaded = nn.load_checkpoint(path)
    assert loaded["arch"] == arch
    assert loaded["seed"] == 7
    assert loaded["extra"]["epoch"] == 3
    assert list(loaded["params"]) == ["w1", "b1"]
    for k in params:
        assert np.array_equal(loaded["params"][k], params[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"WHAT" + b"\x00" * 64)
    with pytest.raises(ValueError, match="not a checkpoint"):
        nn.load_checkpoint(path)


def test_checkpoint_rejects_truncated_payload(tmp_path):
    path = tmp_path / "trunc.ckpt"
    nn.save_checkpoint(path, {}, {"w": np.zeros((8, 8), dtype=np.float32)})
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValueError, match="truncated"):
        nn.load_checkpoint(path)


def test_checkpoint_byte_identical_on_rewrite(tmp_path):
    params = {"w": rng(12).normal(size=(5, 5)).astype(np.float32)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    nn.save_checkpoint(p1, {"kind": "x"}, params, seed=1)
    nn.save_checkpoint(p2, {"kind": "x"}, params, seed=1)
    assert p1.read_bytes() == p2.read_bytes()
