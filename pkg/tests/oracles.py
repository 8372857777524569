"""Independent reference implementations used to check the library."""

import math

import numpy as np


def set_counts(p, g):
    P = {tuple(x) for x in np.argwhere(p)}
    G = {tuple(x) for x in np.argwhere(g)}
    return P, G


def dsc_oracle(p, g):
    P, G = set_counts(p, g)
    if not P and not G:
        return 1.0
    return 2 * len(P & G) / (len(P) + len(G))


def iou_oracle(p, g):
    P, G = set_counts(p, g)
    if not P | G:
        return 1.0
    return len(P & G) / len(P | G)


def assd_oracle(p, g):
    """All-pairs nearest distances, O(|P||G|)."""
    P = np.argwhere(p).astype(float)
    G = np.argwhere(g).astype(float)
    if len(P) == 0 and len(G) == 0:
        return 0.0
    if len(P) == 0 or len(G) == 0:
        return math.hypot(*np.shape(p))
    d = np.sqrt(((P[:, None, :] - G[None, :, :]) ** 2).sum(-1))
    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(P) + len(G))


def contrastive_oracle(P, R, valid, tau, cosine=True):
    """Loop-based NT-Xent-style prompt loss in float64."""
    idx = [i for i in range(3) if valid[i]]
    if not idx:
        return 0.0

    def sim(a, b):
        if cosine:
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        return float(a @ b)

    total = 0.0
    for l in idx:
        num = math.exp(sim(P[l], R[l]) / tau)
        den = sum(math.exp(sim(P[l], R[k]) / tau) for k in idx)
        total += -math.log(num / den)
    return total / len(idx)
