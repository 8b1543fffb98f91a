"""Smoothed n-gram step model: interpolated modified Kneser-Ney.

Counts follow Chen & Goodman's modified scheme: raw counts at the top
order, continuation counts (number of distinct predecessors) at lower
orders, except that grams beginning with the start sentinel keep raw
counts since nothing can precede them. Each order gets three discounts
(for counts of 1, 2, and 3+) estimated from that order's count-of-count
statistics:

    Y  = n1 / (n1 + 2*n2)
    D1 = 1 - 2*Y*n2/n1 ; D2 = 2 - 3*Y*n3/n2 ; D3 = 3 - 4*Y*n4/n3

A discount whose denominator statistic is zero (n1 for D1, n2 for D2, n3
for D3, or n1+2*n2 for Y) falls back to 0.5/1.0/1.5; all discounts are
floored at 1e-4 and capped at 1/2/3 so probabilities stay positive and
each level still sums to one. The
interpolation chain terminates in a uniform distribution over the
emission vocabulary (START excluded), and a context with zero total mass
backs off with weight 1.
"""

from __future__ import annotations

import json
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from choreo.selection.features import START_INDEX

KN_MAGIC = b"KNLM"
KN_VERSION = 1

DISCOUNT_DEFAULTS = (0.5, 1.0, 1.5)
DISCOUNT_FLOOR = 1e-4
DISCOUNT_CAPS = (1.0, 2.0, 3.0)


@dataclass
class KnModel:
    n: int
    vocab: list[int]  # emission tokens (START excluded)
    counts: dict[int, dict[tuple, int]]  # order -> gram -> adjusted count
    discounts: dict[int, tuple[float, float, float]]
    ctx_totals: dict[int, dict[tuple, int]] = field(default_factory=dict)
    ctx_n123: dict[int, dict[tuple, tuple[int, int, int]]] = field(default_factory=dict)

    def __post_init__(self):
        self.vocab_set = set(self.vocab)
        if not self.ctx_totals:
            self._index()

    def _index(self):
        self.ctx_totals = {}
        self.ctx_n123 = {}
        for order, table in self.counts.items():
            totals: dict[tuple, int] = defaultdict(int)
            n123: dict[tuple, list[int]] = defaultdict(lambda: [0, 0, 0])
            for gram, count in table.items():
                ctx = gram[:-1]
                totals[ctx] += count
                n123[ctx][min(count, 3) - 1] += 1
            self.ctx_totals[order] = dict(totals)
            self.ctx_n123[order] = {k: tuple(v) for k, v in n123.items()}


def _estimate_discounts(counts: dict[tuple, int]) -> tuple[float, float, float]:
    freq = Counter(counts.values())
    n1, n2, n3, n4 = freq[1], freq[2], freq[3], freq[4]
    ds = list(DISCOUNT_DEFAULTS)
    if n1 + 2 * n2 > 0:
        y = n1 / (n1 + 2.0 * n2)
        if n1 > 0:
            ds[0] = 1.0 - 2.0 * y * n2 / n1
        if n2 > 0:
            ds[1] = 2.0 - 3.0 * y * n3 / n2
        if n3 > 0:
            ds[2] = 3.0 - 4.0 * y * n4 / n3
    return tuple(min(max(d, DISCOUNT_FLOOR), cap)
                 for d, cap in zip(ds, DISCOUNT_CAPS))


def kn_train(sequences: list[list[int]], vocab: list[int], n: int = 5) -> KnModel:
    """Count-based training over token sequences.

    Each sequence is prepended with the START sentinel unless it already
    begins with it; START anywhere else is rejected. `vocab` fixes the
    emission vocabulary (production: range(256); tests may pass toy
    alphabets).
    """
    if not sequences:
        raise ValueError("empty corpus")
    vocab = list(vocab)
    vocab_set = set(vocab)
    if START_INDEX in vocab_set:
        raise ValueError("START belongs to the input side only, not the vocab")
    padded = []
    for seq in sequences:
        seq = list(seq)
        if not seq or seq[0] != START_INDEX:
            seq = [START_INDEX] + seq
        if any(t == START_INDEX for t in seq[1:]):
            raise ValueError("START sentinel inside a sequence")
        unknown = [t for t in seq[1:] if t not in vocab_set]
        if unknown:
            raise ValueError(f"tokens outside the vocabulary: {unknown[:5]}")
        padded.append(tuple(seq))

    # raw gram counts, orders 1..n, targets restricted to emission tokens
    raw: dict[int, Counter] = {k: Counter() for k in range(1, n + 1)}
    for seq in padded:
        for k in range(1, n + 1):
            for i in range(len(seq) - k + 1):
                gram = seq[i:i + k]
                if gram[-1] != START_INDEX:
                    raw[k][gram] += 1

    # adjusted counts: continuation counts below the top order, except for
    # grams that begin with START (nothing can precede them)
    counts: dict[int, dict[tuple, int]] = {}
    for k in range(1, n + 1):
        if k == n:
            counts[k] = dict(raw[k])
            continue
        table: dict[tuple, int] = {}
        continuation: dict[tuple, set] = defaultdict(set)
        for gram in raw[k + 1]:
            continuation[gram[1:]].add(gram[0])
        for gram, c in raw[k].items():
            if gram[0] == START_INDEX:
                table[gram] = c
            else:
                table[gram] = len(continuation[gram])
        counts[k] = table

    discounts = {k: _estimate_discounts(counts[k]) for k in range(1, n + 1)}
    return KnModel(n=n, vocab=vocab, counts=counts, discounts=discounts)


def kn_prob(model: KnModel, context, token: int) -> float:
    """P(token | context) under the interpolated modified-KN chain."""
    if token == START_INDEX or token not in model.vocab_set:
        raise ValueError(f"token {token} is not an emission token")
    ctx = tuple(context)[max(0, len(context) - (model.n - 1)):]
    return _chain_prob(model, ctx, token)


def _chain_prob(model: KnModel, ctx: tuple, w: int) -> float:
    order = len(ctx) + 1
    total = model.ctx_totals.get(order, {}).get(ctx, 0)
    if total == 0:
        # unseen context: pure backoff (uniform when nothing is left)
        if order == 1:
            return 1.0 / len(model.vocab)
        return _chain_prob(model, ctx[1:], w)
    d1, d2, d3 = model.discounts[order]
    c = model.counts[order].get(ctx + (w,), 0)
    disc = d1 if c == 1 else d2 if c == 2 else d3 if c >= 3 else 0.0
    n1, n2, n3p = model.ctx_n123[order][ctx]
    gamma = (d1 * n1 + d2 * n2 + d3 * n3p) / total
    lower = (1.0 / len(model.vocab)) if order == 1 else _chain_prob(model, ctx[1:], w)
    return max(c - disc, 0.0) / total + gamma * lower


def kn_distribution(model: KnModel, context) -> dict[int, float]:
    return {w: kn_prob(model, context, w) for w in model.vocab}


def kn_sequence_logprobs(model: KnModel, tokens: list[int]) -> list[float]:
    """Natural-log P of each token given its (start-padded) history."""
    import math
    history = [START_INDEX]
    out = []
    for t in tokens:
        out.append(math.log(kn_prob(model, history, t)))
        history.append(t)
    return out


# ---------------------------------------------------------------------------
# serialization

def save_kn_model(path, model: KnModel) -> None:
    payload = {
        "n": model.n,
        "vocab": model.vocab,
        "counts": {str(k): {",".join(map(str, g)): c for g, c in table.items()}
                   for k, table in model.counts.items()},
        "discounts": {str(k): list(d) for k, d in model.discounts.items()},
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", KN_MAGIC, KN_VERSION, len(blob)))
        f.write(blob)


def load_kn_model(path) -> KnModel:
    with open(path, "rb") as f:
        head = f.read(struct.calcsize("<4sII"))
        if len(head) < struct.calcsize("<4sII"):
            raise ValueError(f"truncated n-gram model file {path}")
        magic, version, length = struct.unpack("<4sII", head)
        if magic != KN_MAGIC:
            raise ValueError(f"not an n-gram model file: {path}")
        if version != KN_VERSION:
            raise ValueError(f"unsupported n-gram model version {version}")
        blob = f.read(length)
        if len(blob) != length:
            raise ValueError(f"truncated n-gram model file {path}")
    payload = json.loads(blob.decode("utf-8"))
    counts = {int(k): {tuple(int(x) for x in g.split(",")): c
                       for g, c in table.items()}
              for k, table in payload["counts"].items()}
    discounts = {int(k): tuple(d) for k, d in payload["discounts"].items()}
    return KnModel(n=payload["n"], vocab=payload["vocab"], counts=counts,
                   discounts=discounts)
