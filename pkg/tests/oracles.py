"""Brute-force reference implementations used to pin the fast code paths."""

import itertools
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def alignments(n: int, m: int) -> tuple[tuple[str, ...], ...]:
    """Every monotone alignment of n reference and m hypothesis tokens.

    Ops: "M" consumes one of each, "D" a reference token, "I" a hypothesis token.
    """
    if n == 0 and m == 0:
        return ((),)
    out = []
    if n and m:
        out += [("M",) + a for a in alignments(n - 1, m - 1)]
    if n:
        out += [("D",) + a for a in alignments(n - 1, m)]
    if m:
        out += [("I",) + a for a in alignments(n, m - 1)]
    return tuple(out)


@lru_cache(maxsize=None)
def _alignment_tables(n: int, m: int):
    ops = alignments(n, m)
    pairs = np.full((len(ops), max(min(n, m), 1), 2), -1)
    indels = np.zeros(len(ops), dtype=int)
    ins = np.zeros(len(ops), dtype=int)
    for a, seq in enumerate(ops):
        i = j = k = 0
        for op in seq:
            if op == "M":
                pairs[a, k] = (i, j)
                i, j, k = i + 1, j + 1, k + 1
            elif op == "D":
                i += 1
                indels[a] += 1
            else:
                j += 1
                indels[a] += 1
                ins[a] += 1
    return pairs, indels, ins


def wer_oracle(ref, hyp):
    """Score every alignment, keep the cheapest, break ties toward more substitutions."""
    n, m = len(ref), len(hyp)
    pairs, indels, ins = _alignment_tables(n, m)
    r = np.asarray([hash(t) for t in ref] + [0])
    h = np.asarray([hash(t) for t in hyp] + [1])
    valid = pairs[..., 0] >= 0
    miss = (r[pairs[..., 0]] != h[pairs[..., 1]]) & valid
    subs = miss.sum(axis=1)
    cost = subs + indels
    best = cost.min()
    cand = np.flatnonzero(cost == best)
    pick = cand[np.argmin(indels[cand])]
    s, i = int(subs[pick]), int(ins[pick])
    d = int(indels[pick]) - i
    return best / n, s, i, d


def ctc_oracle(log_probs: np.ndarray, blank: int = 0) -> dict[tuple[int, ...], float]:
    """-log p(y) for every label sequence y reachable in T frames, by summing
    the probabilities of all T-step paths that collapse to y."""
    T, C = log_probs.shape
    groups: dict[tuple[int, ...], list[float]] = {}
    for path in itertools.product(range(C), repeat=T):
        out, prev = [], None
        for p in path:
            if p != prev and p != blank:
                out.append(p)
            prev = p
        score = sum(log_probs[t, p] for t, p in enumerate(path))
        groups.setdefault(tuple(out), []).append(score)
    result = {}
    for y, scores in groups.items():
        a = np.asarray(scores)
        top = a.max()
        result[y] = -(top + float(np.log(np.exp(a - top).sum())))
    return result


def wer_oracle_batch(refs: np.ndarray, hyps: np.ndarray, chunk: int = 2048):
    """Vectorised ``wer_oracle`` over many pairs sharing lengths (n, m).

    Scores every alignment of every pair; returns (S, I, D) arrays.
    """
    P, n = refs.shape
    m = hyps.shape[1]
    pairs, indels, ins = _alignment_tables(n, m)
    valid = pairs[..., 0] >= 0
    ri, hj = np.where(valid, pairs[..., 0], 0), np.where(valid, pairs[..., 1], 0)
    out_s, out_i, out_d = (np.empty(P, dtype=int) for _ in range(3))
    for lo in range(0, P, chunk):
        r, h = refs[lo:lo + chunk], hyps[lo:lo + chunk]
        if n and m:
            miss = (r[:, ri] != h[:, hj]) & valid
            subs = miss.sum(-1)
        else:
            subs = np.zeros((len(r), len(indels)), dtype=int)
        cost = subs + indels
        # lexicographic (cost, indels)
        pick = np.argmin(cost * (n + m + 1) + indels, axis=1)
        out_s[lo:lo + chunk] = subs[np.arange(len(r)), pick]
        out_i[lo:lo + chunk] = ins[pick]
        out_d[lo:lo + chunk] = indels[pick] - ins[pick]
    return out_s, out_i, out_d
