"""Weight-space merging of fine-tuned models.

All recipes assume the ingredients were fine-tuned from one shared base
so that plain parameter averaging lands in the same loss basin.

* uniform: average everything with weight 1/k.
* greedy: sort candidates by held-out accuracy (descending, ties keep
  input order), then grow the pool, keeping each candidate iff the
  average of pool + candidate does not lower held-out accuracy.  The
  comparison is >= with an empty-pool score of -inf, so the single best
  model always enters and the pooled score never decreases.
* learned: gradient-optimized mixing weights and logit scale.  Raw
  scores a (one vector per mixing group) pass through softmax to give
  simplex coefficients; the logit scale is beta = exp(b); a and b start
  at zero (uniform mix, beta 1).  Optimized by three full-batch steps of
  the decoupled-Adam rule at constant lr 0.1 on a held-out split.  The
  gradient w.r.t. a follows the chain d loss/d alpha_i = <grad_theta
  loss, theta_i> restricted to the group, then softmax backward.  With
  ``by_layer`` every ``layer{i}.`` prefix is its own group (the head
  layer included, on its own).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fileio import atomic_write_text
from .tensorstore import Checkpoint, combine, content_digest, save as save_checkpoint
from .tinynet import (
    arch_of,
    as_params,
    evaluate,
    forward,
    grad64,
    loss_ce,
    smoothed_targets,
    softmax,
)

LEARNED_SOUP_LR = 0.1
LEARNED_SOUP_EPOCHS = 3
_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class SoupResult:
    """A merged checkpoint plus the recipe that produced it.

    ``temperature`` is the logit scale beta to apply at prediction time
    (1.0 unless the recipe learned one).  ``coefficients`` maps each
    mixing group to its per-ingredient weights; recipes that mix all
    tensors together use the single group "all".
    """

    checkpoint: Checkpoint
    ingredient_indices: list[int]
    coefficients: dict[str, list[float]]
    temperature: float = 1.0
    loss_trace: list[float] | None = None


def accuracy_fn(X: np.ndarray, y: np.ndarray) -> Callable[[Checkpoint], float]:
    """Val-accuracy scorer over a fixed split, for greedy selection."""

    def score(ckpt: Checkpoint) -> float:
        return evaluate(ckpt, X, y).accuracy

    return score


def uniform_soup(models: Sequence[Checkpoint]) -> SoupResult:
    """Equal-weight average of all models."""
    if not models:
        raise ValueError("uniform_soup needs at least one model")
    k = len(models)
    ckpt = combine([1.0 / k] * k, models)
    ckpt.meta.update({"role": "soup", "soup.kind": "uniform", "soup.size": str(k)})
    return SoupResult(
        checkpoint=ckpt,
        ingredient_indices=list(range(k)),
        coefficients={"all": [1.0 / k] * k},
    )


def greedy_select(
    count: int,
    subset_score: Callable[[list[int]], float],
    candidate_scores: Sequence[float] | None,
    presort: bool = True,
) -> tuple[list[int], float]:
    """Shared greedy-growth control flow over model indices.

    Visits candidates (sorted by their individual score when presort is
    on, ties keeping input order) and keeps each one iff the pooled
    score does not drop.  Starts from the empty pool at -inf.
    """
    order = list(range(count))
    if presort:
        if candidate_scores is None:
            raise ValueError("presort requires per-candidate scores")
        order.sort(key=lambda i: -candidate_scores[i])  # stable: ties keep index order
    pool: list[int] = []
    best = -math.inf
    for i in order:
        score = subset_score(pool + [i])
        if score >= best:
            pool = pool + [i]
            best = score
    return pool, best


def greedy_soup(
    models: Sequence[Checkpoint],
    val_accuracy_fn: Callable[[Checkpoint], float],
    presort: bool = True,
) -> SoupResult:
    """Greedy ingredient selection with uniform averaging of the pool."""
    if not models:
        raise ValueError("greedy_soup needs at least one model")

    def subset_score(indices: list[int]) -> float:
        size = len(indices)
        avg = combine([1.0 / size] * size, [models[i] for i in indices])
        return val_accuracy_fn(avg)

    scores = [val_accuracy_fn(m) for m in models] if presort else None
    pool, _ = greedy_select(len(models), subset_score, scores, presort)
    k = len(pool)
    ckpt = combine([1.0 / k] * k, [models[i] for i in pool])
    ckpt.meta.update(
        {
            "role": "soup",
            "soup.kind": "greedy",
            "soup.size": str(k),
            "soup.ingredients": ",".join(str(i) for i in pool),
        }
    )
    return SoupResult(
        checkpoint=ckpt,
        ingredient_indices=pool,
        coefficients={"all": [1.0 / k] * k},
    )


def _mixing_groups(names: Sequence[str], by_layer: bool) -> dict[str, list[str]]:
    if not by_layer:
        return {"all": list(names)}
    groups: dict[str, list[str]] = {}
    for name in names:
        prefix = name.split(".", 1)[0] + "."
        groups.setdefault(prefix, []).append(name)
    return groups


def learned_soup(
    models: Sequence[Checkpoint],
    X_val: np.ndarray,
    y_val: np.ndarray,
    by_layer: bool = False,
) -> SoupResult:
    """Optimize mixing weights and a logit scale on a held-out split."""
    if not models:
        raise ValueError("learned_soup needs at least one model")
    k = len(models)
    params_list = [as_params(m) for m in models]
    names = list(params_list[0])
    groups = _mixing_groups(names, by_layer)
    group_keys = list(groups)
    num_classes = arch_of(params_list[0]).num_classes
    targets = smoothed_targets(np.asarray(y_val), num_classes, 0.0)

    # Raw optimizer variables: one score vector per group plus the log scale.
    raw = {key: np.zeros(k) for key in group_keys}
    raw["__logscale__"] = np.zeros(1)
    m_state = {key: np.zeros_like(v) for key, v in raw.items()}
    v_state = {key: np.zeros_like(v) for key, v in raw.items()}

    def alphas() -> dict[str, np.ndarray]:
        return {key: softmax(raw[key]) for key in group_keys}

    def mixed_params(alpha: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        mixed = {}
        for key in group_keys:
            for name in groups[key]:
                acc = alpha[key][0] * params_list[0][name]
                for i in range(1, k):
                    acc = acc + alpha[key][i] * params_list[i][name]
                mixed[name] = acc
        return {name: mixed[name] for name in names}

    trace: list[float] = []
    t = 0
    for step in range(LEARNED_SOUP_EPOCHS):
        alpha = alphas()
        beta = float(np.exp(raw["__logscale__"][0]))
        theta = mixed_params(alpha)
        loss, theta_grad = grad64(theta, X_val, targets, inv_temperature=beta)
        trace.append(loss)

        grads = {}
        for key in group_keys:
            # d loss / d alpha_i restricted to this group's tensors
            d_alpha = np.array(
                [
                    sum(
                        float(np.sum(theta_grad[name] * params_list[i][name]))
                        for name in groups[key]
                    )
                    for i in range(k)
                ]
            )
            a = alpha[key]
            grads[key] = a * (d_alpha - float(np.dot(a, d_alpha)))  # softmax backward
        logits = forward(theta, X_val)
        probs = softmax(beta * logits)
        d_beta = float(np.mean(np.sum((probs - targets) * logits, axis=1)))
        grads["__logscale__"] = np.array([d_beta * beta])

        t += 1
        bc1 = 1.0 - _ADAM_B1**t
        bc2 = 1.0 - _ADAM_B2**t
        for key in raw:
            g = grads[key]
            m_state[key] = _ADAM_B1 * m_state[key] + (1.0 - _ADAM_B1) * g
            v_state[key] = _ADAM_B2 * v_state[key] + (1.0 - _ADAM_B2) * g * g
            raw[key] -= LEARNED_SOUP_LR * (
                (m_state[key] / bc1) / (np.sqrt(v_state[key] / bc2) + _ADAM_EPS)
            )

    alpha = alphas()
    beta = float(np.exp(raw["__logscale__"][0]))
    theta = mixed_params(alpha)
    trace.append(loss_ce(forward(theta, X_val), np.asarray(y_val), 0.0, beta))

    ckpt = Checkpoint.from_arrays(
        {name: theta[name].astype(np.float32) for name in names},
        {
            "role": "soup",
            "soup.kind": "learned-by-layer" if by_layer else "learned",
            "soup.size": str(k),
            "soup.temperature": repr(beta),
        },
    )
    return SoupResult(
        checkpoint=ckpt,
        ingredient_indices=list(range(k)),
        coefficients={key: [float(a) for a in alpha[key]] for key in group_keys},
        temperature=beta,
        loss_trace=trace,
    )


def wise_ft_curve(
    theta0: Checkpoint, theta1: Checkpoint, alphas: Sequence[float]
) -> list[tuple[float, Checkpoint]]:
    """Interpolation sweep (1 - a) * theta0 + a * theta1 over alphas."""
    out = []
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
        out.append((float(a), combine([1.0 - a, a], [theta0, theta1])))
    return out


def save_soup(result: SoupResult, path: str | Path) -> None:
    """Persist the merged checkpoint plus a JSON sidecar of the recipe."""
    path = Path(path)
    save_checkpoint(result.checkpoint, path)
    sidecar = {
        "digest": content_digest(result.checkpoint),
        "ingredient_indices": result.ingredient_indices,
        "coefficients": result.coefficients,
        "temperature": result.temperature,
    }
    if result.loss_trace is not None:
        sidecar["loss_trace"] = result.loss_trace
    atomic_write_text(str(path) + ".soup.json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
