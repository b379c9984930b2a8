"""Independent reference computations used by the tests.

These deliberately avoid the package's vectorized paths: plain loops,
``math.fsum`` and direct formula evaluation.
"""

import math

import numpy as np


def brute_force_split(X, g, h, rows, lam, gamma, min_child_weight, tie_tol=1e-12):
    """Enumerate every (feature, midpoint) pair; return (feature1, threshold, gain) or None.

    Candidates whose gain is within ``tie_tol`` (relative) of the best are
    ties, resolved by lowest feature then lowest threshold. A best gain
    below ``tie_tol`` times the node score ``G^2/(H+lam)`` counts as no split.
    """
    rows = list(rows)
    G = math.fsum(g[i] for i in rows)
    H = math.fsum(h[i] for i in rows)
    cands = []
    for j in range(X.shape[1]):
        distinct = sorted(set(float(X[i, j]) for i in rows))
        for a, b in zip(distinct, distinct[1:]):
            thr = (a + b) / 2
            left = [i for i in rows if X[i, j] < thr]
            gl = math.fsum(g[i] for i in left)
            hl = math.fsum(h[i] for i in left)
            gr, hr = G - gl, H - hl
            if hl < min_child_weight or hr < min_child_weight:
                continue
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G * G / (H + lam)) - gamma
            cands.append((j + 1, thr, gain))
    if not cands:
        return None
    best = max(c[2] for c in cands)
    if not best > tie_tol * max(1.0, G * G / (H + lam)):
        return None
    tol = tie_tol * max(1.0, abs(best))
    tied = [c for c in cands if c[2] >= best - tol]
    return min(tied, key=lambda c: (c[0], c[1]))


def central_difference(f, params, step=1e-6):
    """Numerical gradient of scalar ``f(params)`` for every array in ``params.arrays()``."""
    grads = []
    for arr in params.arrays():
        out = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gout = out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(params)
            flat[i] = orig - step
            down = f(params)
            flat[i] = orig
            gout[i] = (up - down) / (2 * step)
        grads.append(out)
    return grads


def scalar_adam(w, grad_fn, steps, alpha, beta1, beta2, eps):
    """Textbook Adam on a list of python floats."""
    w = list(w)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t in range(1, steps + 1):
        g = grad_fn(w)
        for i in range(len(w)):
            m[i] = beta1 * m[i] + (1 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i]
            mhat = m[i] / (1 - beta1**t)
            vhat = v[i] / (1 - beta2**t)
            w[i] = w[i] - alpha * mhat / (math.sqrt(vhat) + eps)
    return w


def naive_metric(task, margins, labels):
    """Two-pass reference: accuracy by counting, MSE by summing squared errors."""
    n = len(labels)
    if task == "classification":
        hits = 0
        for m, y in zip(margins, labels):
            hits += int((1.0 if m > 0 else 0.0) == y)
        return hits / n
    total = 0.0
    for m, y in zip(margins, labels):
        total += (m - y) ** 2
    return total / n


def check_nodes_against_oracle(train_fn, X, y, task):
    """Train via ``train_fn(on_node)`` and compare every node to :func:`brute_force_split`.

    Gradients are replayed from the finished ensemble tree by tree, so the
    oracle never sees the trainer's internal state. Returns
    ``(nodes_checked, mismatches)``.
    """
    per_tree = []

    def hook(depth, rows, cand):
        if depth == 0:
            per_tree.append([])
        per_tree[-1].append((depth, np.array(rows), cand))

    ens = train_fn(hook)
    cfg = ens.config
    margins = np.full(len(y), cfg.base_score)
    checked, mismatches = 0, []
    for t, (tree, nodes) in enumerate(zip(ens.trees, per_tree)):
        if task == "regression":
            g, h = margins - y, np.ones_like(y)
        else:
            p = 1.0 / (1.0 + np.exp(-margins))
            g, h = p - y, p * (1.0 - p)
        for depth, rows, cand in nodes:
            if len(rows) < 2:
                continue
            want = brute_force_split(X, g, h, rows, cfg.reg_lambda, cfg.gamma,
                                     cfg.min_child_weight)
            checked += 1
            if cand is None:
                # below the depth cap a leaf means the oracle finds no split either
                if want is not None and depth < cfg.max_depth:
                    mismatches.append((t, rows.tolist(), None, want))
                continue
            got = (cand.feature, cand.threshold)
            if want is None or got != want[:2] or not math.isclose(
                    cand.gain, want[2], rel_tol=1e-12, abs_tol=1e-12):
                mismatches.append((t, rows.tolist(), (got, cand.gain), want))
        margins = margins + cfg.eta * tree.predict(X)
    return checked, mismatches

