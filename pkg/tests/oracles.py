"""Independent reference computations used to pin down expected values.

These are deliberately written against plain python/math or elementwise
numpy loops, not the library's vectorized paths, so the two sides of
each comparison share no code.
"""

from __future__ import annotations

import math

import numpy as np

from soupkit import tinynet


def fd_gradient(params, X, targets, inv_temperature=1.0, h=1e-3):
    """Central-difference gradient of the mean loss, coordinate by coordinate."""

    def loss_at(p):
        logits = tinynet.forward(p, X)
        return tinynet.cross_entropy_from_targets(logits, targets, inv_temperature)

    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value, dtype=np.float64)
        flat_v = value.ravel()
        flat_g = g.ravel()
        for j in range(flat_v.size):
            for sign in (+1.0, -1.0):
                probe = {k: v.copy() for k, v in params.items()}
                probe[name].ravel()[j] = flat_v[j] + sign * h
                flat_g[j] += sign * loss_at(probe)
            flat_g[j] /= 2.0 * h
        grads[name] = g
    return grads


def per_example_eval(logits, labels):
    """Loss, error via plain math loops (stable logsumexp per row)."""
    losses, wrong = [], 0
    for row, y in zip(logits, labels):
        row = [float(v) for v in row]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        losses.append(lse - row[int(y)])
        best, best_idx = -math.inf, -1
        for idx, v in enumerate(row):
            if v > best:  # strict: ties keep the earliest index
                best, best_idx = v, idx
        if best_idx != int(y):
            wrong += 1
    return sum(losses) / len(losses), wrong / len(losses)


def explicit_hessian_quadratic_form(logit_row, v):
    """v' (diag(p) - p p') v with the full matrix materialized."""
    row = np.asarray(logit_row, dtype=np.float64)
    e = np.exp(row - row.max())
    p = e / e.sum()
    H = np.diag(p) - np.outer(p, p)
    return float(np.asarray(v, dtype=np.float64) @ H @ np.asarray(v, dtype=np.float64))


def simpson_integral(values, grid):
    """Composite Simpson over an odd, evenly spaced grid (scalar oracle)."""
    n = len(grid)
    assert n % 2 == 1 and n >= 3
    h = (grid[-1] - grid[0]) / (n - 1)
    total = values[0] + values[-1]
    for i in range(1, n - 1):
        total += values[i] * (4.0 if i % 2 == 1 else 2.0)
    return total * h / 3.0


def ece_equal_mass_oracle(confidences, correct, num_bins):
    """Equal-mass ECE via plain-python stable sort and explicit chunking.

    First (n mod num_bins) bins take the extra element, matching
    contiguous chunks whose sizes differ by at most one.
    """
    n = len(confidences)
    order = sorted(range(n), key=lambda i: confidences[i])  # timsort: stable
    base, extra = divmod(n, num_bins)
    total, start = 0.0, 0
    for b in range(num_bins):
        size = base + (1 if b < extra else 0)
        if size == 0:
            continue
        chunk = order[start : start + size]
        start += size
        acc = sum(float(correct[i]) for i in chunk) / size
        conf = sum(float(confidences[i]) for i in chunk) / size
        total += (size / n) * abs(acc - conf)
    return total


def greedy_pool_oracle(subset_score, individual_scores, presort=True):
    """Transliteration of greedy grow-if-not-worse selection.

    ``subset_score`` maps a list of indices (in visit order) to the
    pooled score.  Returns the accepted indices in acceptance order.
    """
    count = len(individual_scores)
    order = list(range(count))
    if presort:
        order = sorted(order, key=lambda i: -individual_scores[i])
    pool, best = [], -math.inf
    for i in order:
        candidate = pool + [i]
        score = subset_score(candidate)
        if score >= best:
            pool, best = candidate, score
    return pool
