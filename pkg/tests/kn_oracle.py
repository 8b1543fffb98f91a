"""Direct-formula oracle for the modified Kneser-Ney n-gram model.

Every quantity is recomputed per query straight from the padded token
sequences: raw gram counts by window scanning, continuation counts by
enumerating candidate predecessors, count-of-counts and discounts per
order, and the interpolation chain by explicit recursion. It shares the
documented definition with the production code but none of its code or
precomputed tables.
"""

from collections import Counter


def pad(sequences, start):
    out = []
    for seq in sequences:
        seq = list(seq)
        if not seq or seq[0] != start:
            seq = [start] + seq
        out.append(tuple(seq))
    return out


def raw_count(padded, gram):
    gram = tuple(gram)
    k = len(gram)
    total = 0
    for seq in padded:
        for i in range(len(seq) - k + 1):
            if seq[i:i + k] == gram:
                total += 1
    return total


def adjusted_count(padded, gram, n, start, vocab):
    gram = tuple(gram)
    if len(gram) == n or gram[0] == start:
        return raw_count(padded, gram)
    predecessors = 0
    for v in list(vocab) + [start]:
        if raw_count(padded, (v,) + gram) > 0:
            predecessors += 1
    return predecessors


def present_grams(padded, k, start):
    grams = set()
    for seq in padded:
        for i in range(len(seq) - k + 1):
            if seq[i + k - 1] != start:
                grams.add(seq[i:i + k])
    return grams


def order_discounts(padded, k, n, start, vocab):
    counts = Counter(adjusted_count(padded, g, n, start, vocab)
                     for g in present_grams(padded, k, start))
    n1, n2, n3, n4 = counts[1], counts[2], counts[3], counts[4]
    d1, d2, d3 = 0.5, 1.0, 1.5
    if n1 + 2 * n2 > 0:
        y = n1 / (n1 + 2.0 * n2)
        if n1 > 0:
            d1 = 1.0 - 2.0 * y * n2 / n1
        if n2 > 0:
            d2 = 2.0 - 3.0 * y * n3 / n2
        if n3 > 0:
            d3 = 3.0 - 4.0 * y * n4 / n3
    clamp = lambda d, cap: min(max(d, 1e-4), cap)
    return clamp(d1, 1.0), clamp(d2, 2.0), clamp(d3, 3.0)


def oracle_prob(sequences, context, token, vocab, n=5, start=None):
    assert start is not None, "pass the start sentinel explicitly"
    padded = pad(sequences, start)
    ctx = tuple(context)
    if len(ctx) > n - 1:
        ctx = ctx[len(ctx) - (n - 1):]
    return _prob(padded, ctx, token, vocab, n, start)


def _prob(padded, ctx, w, vocab, n, start):
    order = len(ctx) + 1
    per_token = {v: adjusted_count(padded, ctx + (v,), n, start, vocab)
                 for v in vocab}
    total = sum(per_token.values())
    if total == 0:
        if order == 1:
            return 1.0 / len(vocab)
        return _prob(padded, ctx[1:], w, vocab, n, start)
    d1, d2, d3 = order_discounts(padded, order, n, start, vocab)
    c = per_token[w]
    disc = d1 if c == 1 else d2 if c == 2 else d3 if c >= 3 else 0.0
    n1 = sum(1 for v in per_token.values() if v == 1)
    n2 = sum(1 for v in per_token.values() if v == 2)
    n3p = sum(1 for v in per_token.values() if v >= 3)
    gamma = (d1 * n1 + d2 * n2 + d3 * n3p) / total
    if order == 1:
        lower = 1.0 / len(vocab)
    else:
        lower = _prob(padded, ctx[1:], w, vocab, n, start)
    return max(c - disc, 0.0) / total + gamma * lower
