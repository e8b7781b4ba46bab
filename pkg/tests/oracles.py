"""Independent reference computations used by the tests.

Nothing here imports the code paths it checks.
"""
from __future__ import annotations

from collections import Counter

import numpy as np


def wl_distinguishable(g1, g2, directed=True):
    """1-WL colour refinement on the disjoint union, so colour ids are shared.

    Graphs are ``(num_nodes, edges, labels)``. Directed refinement keys on
    the multisets of in- and out-neighbour colours.
    """
    n1, e1, l1 = g1
    n2, e2, l2 = g2
    edges = list(e1) + [(s + n1, d + n1) for s, d in e2]
    labels = list(l1) + list(l2)
    n = n1 + n2
    colors = [0] * n if labels is None else labels
    ins = [[] for _ in range(n)]
    outs = [[] for _ in range(n)]
    for s, d in edges:
        outs[s].append(d)
        ins[d].append(s)
        if not directed:
            outs[d].append(s)
            ins[s].append(d)
    palette = {}
    for _ in range(n):
        sigs = [(colors[v], tuple(sorted(colors[u] for u in ins[v])),
                 tuple(sorted(colors[u] for u in outs[v]))) for v in range(n)]
        colors = [palette.setdefault(s, len(palette)) for s in sigs]
    return Counter(colors[:n1]) != Counter(colors[n1:])


def dense_gcn_adjacency(num_nodes, edges):
    A = np.zeros((num_nodes, num_nodes))
    for s, d in edges:
        if s != d:
            A[s, d] = A[d, s] = 1.0
    A += np.eye(num_nodes)
    dinv = 1.0 / np.sqrt(A.sum(axis=1))
    return dinv[:, None] * A * dinv[None, :]


def brute_force_split(X, g, h, lam, gamma):
    """Best single split by explicit masks; ties to lowest feature then threshold."""
    best = None
    G, H = g.sum(), h.sum()
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = (a + b) / 2.0
            left = X[:, f] < thr
            GL, HL = g[left].sum(), h[left].sum()
            GR, HR = G - GL, H - HL
            gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam)) - gamma
            if best is None or gain > best[0]:
                best = (gain, f, thr)
    if best is None or not best[0] > 0:
        return None
    return best


def central_difference(f, x, step=1e-5):
    x = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    flat, oflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        oflat[i] = (fp - fm) / (2 * step)
    return out
