"""Independent reference implementations used as test oracles.

They are written for clarity, not speed: explicit loops, plain Python and
math, no code shared with the package.
"""

import itertools
import math

import numpy as np


def brute_force_matches(dets, truths, duration, threshold):
    """Largest number of detection/truth pairs over all injective assignments."""
    dets, truths = list(dets), list(truths)
    if not dets or not truths:
        return 0
    small, large = (dets, truths) if len(dets) <= len(truths) else (truths, dets)
    best = 0
    for chosen in itertools.permutations(range(len(large)), len(small)):
        hits = sum(abs(small[i] - large[j]) / duration <= threshold for i, j in enumerate(chosen))
        best = max(best, hits)
    return best


def brute_force_f1(dets, truths, duration, threshold):
    m = brute_force_matches(dets, truths, duration, threshold)
    p = m / len(dets) if dets else 0.0
    r = m / len(truths) if truths else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def correlation_loops(ft, ft1, radius):
    """``out[y, x, i, j] = mean_c ft[c, y, x] * ft1[c, y+i-l, x+j-l]`` with zero outside."""
    C, H, W = ft.shape
    P = 2 * radius + 1
    out = np.zeros((H, W, P, P))
    for y in range(H):
        for x in range(W):
            for i in range(P):
                for j in range(P):
                    yy, xx = y + i - radius, x + j - radius
                    if 0 <= yy < H and 0 <= xx < W:
                        s = 0.0
                        for c in range(C):
                            s += float(ft[c, y, x]) * float(ft1[c, yy, xx])
                        out[y, x, i, j] = s / C
    return out


def soft_argmax_direct(scores, temperature, sigma):
    """Kernel soft-argmax at one position; ``scores`` is a (P, P) nested list/array."""
    P = len(scores)
    r = (P - 1) // 2
    flat = [(scores[i][j], i, j) for i in range(P) for j in range(P)]
    best = max(range(len(flat)), key=lambda k: (flat[k][0], -k))
    _, bi, bj = flat[best]
    logits = []
    for s, i, j in flat:
        g = math.exp(-((i - bi) ** 2 + (j - bj) ** 2) / (2 * sigma ** 2))
        logits.append(g * s / temperature)
    m = max(logits)
    w = [math.exp(v - m) for v in logits]
    z = sum(w)
    dx = sum(wk * (j - r) for wk, (_, i, j) in zip(w, flat)) / z
    dy = sum(wk * (i - r) for wk, (_, i, j) in zip(w, flat)) / z
    return dx, dy


def info_nce_direct(q, p, negatives, temperature):
    """Closed-form InfoNCE evaluated with plain floats."""
    dot = lambda a, b: sum(float(x) * float(y) for x, y in zip(a, b))  # noqa: E731
    pos = math.exp(dot(q, p) / temperature)
    neg = sum(math.exp(dot(q, n) / temperature) for n in negatives)
    return -math.log(pos / (pos + neg))


class ListQueue:
    """FIFO oracle over a Python list."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.items = []

    def push(self, keys):
        if len(keys) > self.capacity:
            raise ValueError("too many keys")
        self.items.extend(keys)
        self.items = self.items[-self.capacity:]
