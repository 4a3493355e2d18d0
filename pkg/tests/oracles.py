"""Independent brute-force reference computations used as test oracles.

Everything here is written in plain numpy loops against the mathematical
definitions, deliberately sharing no code with the library's vectorized
implementations.
"""

import numpy as np


def softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gaussian_mixture_embedding(n, mu, sigma, embed):
    """Per-slot additive encoding: row-softmax of the range log-weights
    times the range embedding matrix."""
    b = np.zeros((n, len(mu)))
    for i in range(n):
        for j in range(len(mu)):
            b[i, j] = -((i - mu[j]) ** 2) / (2.0 * sigma[j] ** 2) - np.log(sigma[j])
    return softmax_rows(b) @ embed


def dense_masked_attention(x, node_of_row, window_of_row, pad_row, time_of_row,
                           n, heads, w_q, w_k, w_v, w_o, w_t, omega, phi,
                           mu=None, sigma=None, embed=None):
    """Full-sequence attention with the admissibility mask built per pair:
    same identity AND same-or-previous chunk AND window(j) <= window(i)
    AND key not a pad row.  Logits are q.k plus the q.(w_t Phi(dt)) time
    bias, no scaling; pad query rows give zero output."""
    r, d = x.shape
    dh = d // heads
    k_in = x.copy()
    if embed is not None:
        g = gaussian_mixture_embedding(n, mu, sigma, embed)
        for row in range(r):
            k_in[row] += g[row % n]
    q_full = x @ w_q
    k_full = k_in @ w_k
    v_full = x @ w_v
    out = np.zeros((r, d))
    for i in range(r):
        if pad_row[i]:
            continue
        ci, cj_lo = i // n, max(0, i // n - 1)
        merged = np.zeros(d)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            logits, keys = [], []
            for j in range(r):
                if pad_row[j]:
                    continue
                if node_of_row[j] != node_of_row[i]:
                    continue
                if not cj_lo <= j // n <= ci:
                    continue
                if window_of_row[j] > window_of_row[i]:
                    continue
                dt = time_of_row[i] - time_of_row[j]
                tb = np.cos(omega * dt + phi) @ w_t
                logits.append(q_full[i, sl] @ k_full[j, sl] + q_full[i, sl] @ tb[sl])
                keys.append(j)
            w = softmax_rows(np.array(logits))
            merged[sl] = sum(wk * v_full[j, sl] for wk, j in zip(w, keys))
        out[i] = merged @ w_o
    return out


def average_precision_bruteforce(scores, labels):
    """Definitional AP: stable descending sort, precision at each positive."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    # stable: python sort is stable, preserving input order on ties
    hits = 0
    precisions = []
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / hits


def roc_auc_bruteforce(scores, labels):
    """Pairwise definition with ties counting one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def chi2_sf_by_integration(stat, dof, steps=100_000):
    """Upper-tail chi-square probability via Simpson integration.

    Integrates the lower tail under the substitution x = u^2, which keeps
    the integrand smooth at the origin for every dof (including the
    dof=1 singularity), then subtracts from 1.
    """
    from math import lgamma

    if stat <= 0:
        return 1.0

    log_norm = -(dof / 2) * np.log(2.0) - lgamma(dof / 2)

    def integrand(u):
        # pdf(u^2) * 2u with the u factors folded into the log
        if u <= 0:
            return 2.0 * np.exp(log_norm) if dof == 1 else 0.0
        logp = (dof - 2) * np.log(u) - u * u / 2 + log_norm + np.log(2.0 * u)
        return float(np.exp(logp))

    us = np.linspace(0.0, np.sqrt(stat), steps + 1)
    ys = np.array([integrand(u) for u in us])
    h = us[1] - us[0]
    area = h / 3 * (ys[0] + ys[-1] + 4 * ys[1:-1:2].sum() + 2 * ys[2:-1:2].sum())
    return float(max(0.0, min(1.0, 1.0 - area)))
