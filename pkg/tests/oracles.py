"""Slow, independent reference implementations used to check the fast code paths."""
import itertools
import math

import numpy as np


def inclusion_probs(weights, m):
    """Exact keep probability per token for sequential weighted draws without replacement.

    Enumerates every ordered draw sequence; a step whose remaining weight is
    zero picks uniformly among the remaining tokens.
    """
    w = [float(x) for x in weights]
    L = len(w)
    p = [0.0] * L
    for seq in itertools.permutations(range(L), m):
        prob = 1.0
        remaining = set(range(L))
        for i in seq:
            total = sum(w[j] for j in remaining)
            prob *= w[i] / total if total > 0 else 1.0 / len(remaining)
            remaining.discard(i)
        for i in seq:
            p[i] += prob
    return np.array(p)


def head_average_attention(z_cls, Z, w_q, w_k, heads):
    """Plain-python loop over heads and keys."""
    C = len(z_cls)
    d = C // heads
    q = [sum(w_q[o][i] * z_cls[i] for i in range(C)) for o in range(C)]
    keys = [[sum(w_k[o][i] * z[i] for i in range(C)) for o in range(C)] for z in Z]
    out = [0.0] * len(Z)
    for h in range(heads):
        sl = range(h * d, (h + 1) * d)
        logits = [sum(q[c] * k[c] for c in sl) / math.sqrt(d) for k in keys]
        mx = max(logits)
        e = [math.exp(x - mx) for x in logits]
        for j, v in enumerate(e):
            out[j] += v / sum(e) / heads
    return out


def info_nce(v, t, tau):
    logits = np.asarray(v) @ np.asarray(t).T / tau

    def ce(lg):
        lg = lg - lg.max(axis=1, keepdims=True)
        logp = lg - np.log(np.exp(lg).sum(axis=1, keepdims=True))
        return -np.mean(np.diag(logp))

    return 0.5 * (ce(logits) + ce(logits.T))


def adam_scalar(p, grads, lr, wd=0.0, b1=0.9, b2=0.95, eps=1e-8):
    """Textbook AdamW on one scalar; returns the parameter after every step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out
