"""Parameter initialization for dense, convolutional, and LSTM layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from choreo.nnkit.autodiff import Tensor


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator,
                shape=None) -> np.ndarray:
    """Uniform on +/- sqrt(6 / (fan_in + fan_out)), float32.

    `shape` defaults to (fan_in, fan_out); conv kernels pass their own
    shape with the matching fan counts.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got ({fan_in}, {fan_out})")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def dense_params(in_dim: int, out_dim: int, rng: np.random.Generator):
    w = Tensor(glorot_init(in_dim, out_dim, rng), requires_grad=True)
    b = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)
    return w, b


def conv_params(c_out: int, c_in: int, kh: int, kw: int, rng: np.random.Generator):
    fan_in = c_in * kh * kw
    fan_out = c_out * kh * kw
    k = Tensor(glorot_init(fan_in, fan_out, rng, shape=(c_out, c_in, kh, kw)),
               requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
    return k, b


@dataclass
class LstmParams:
    """Fused LSTM weights; columns hold the input, forget, output, and
    candidate blocks in that order. Forget-gate bias starts at 1.0."""

    wx: Tensor  # (in_dim, 4*hidden)
    wh: Tensor  # (hidden, 4*hidden)
    b: Tensor  # (4*hidden,)
    hidden: int

    def tensors(self) -> list[Tensor]:
        return [self.wx, self.wh, self.b]


def init_lstm_params(in_dim: int, hidden: int, rng: np.random.Generator) -> LstmParams:
    wx = np.concatenate(
        [glorot_init(in_dim, hidden, rng) for _ in range(4)], axis=1)
    wh = np.concatenate(
        [glorot_init(hidden, hidden, rng) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden, dtype=np.float32)
    b[hidden:2 * hidden] = 1.0  # forget gate starts open
    return LstmParams(wx=Tensor(wx, requires_grad=True),
                      wh=Tensor(wh, requires_grad=True),
                      b=Tensor(b, requires_grad=True),
                      hidden=hidden)
