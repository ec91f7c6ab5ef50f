"""Quantitative comparisons of weight averaging and logit ensembling.

Contents: interpolation curves and the midpoint-advantage statistic,
weight-space angles, 2-D loss/error landscapes over an orthonormal
plane, an endpoint-pair study over a hyperparameter axis, a
second-order approximation of the soup-vs-ensemble loss gap, and an
exact integral identity used as the approximation's numerical oracle.

Numerical conventions
---------------------
* All weight-space interpolation inside this module happens on float64
  parameter maps (no float32 round-trip), so finite differences are
  not polluted by storage quantization.  Entry points accept
  checkpoints and convert once.
* The alpha second derivative uses a central difference with step
  ``h_alpha`` (default 0.05); alphas closer than ``h_alpha`` to 0 or 1
  fall back to the one-sided second difference anchored at the
  endpoint, so every probe stays inside [0, 1].
* The tau-integral uses composite Simpson quadrature on an odd,
  evenly spaced node grid (default 33 nodes).

The approximated quantity, for a pair (theta0, theta1), mixing weight
alpha and logit scale beta, is

    L_soup - L_ens  ~=  c_alpha * (-d2/dalpha2 L_soup
                                   + beta^2 * E_x Var_Y[delta_f_Y])

with c_alpha = alpha * (1 - alpha) / 2, Y drawn from
softmax(beta * f(x; theta_alpha)) and delta_f = f(x; theta1) -
f(x; theta0).  The exact counterpart it approximates is the logit-space
identity

    f_ens - f_soup = integral_0^1 (delta' H f(theta_tau) delta)
                     * min{(1 - alpha) tau, alpha (1 - tau)} dtau,

whose kernel integrates to alpha * (1 - alpha) / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ensembles import fit_temperature
from .errors import DegenerateBasisError, NonFiniteError
from .fileio import atomic_write_text
from .tensorstore import (
    Checkpoint,
    DEFAULT_ANGLE_FILTER,
    ParamFilter,
    angle_between,
    combine,
    subtract,
)
from .tinynet import (
    Params,
    _forward_cached,
    arch_of,
    as_params,
    evaluate,
    forward,
    hessian_quadratic_form,
    logit_second_directional,
    loss_ce,
    params_axpy,
    predictions,
)

ALPHA_FD_STEP = 0.05
SIMPSON_NODES = 33
BETA_MODES = ("fixed-1", "calibrate-soup")
PLANE_METRICS = ("loss", "error")


# ----------------------------------------------------------- small helpers


def _delta_params(p0: Params, p1: Params) -> Params:
    return {name: p1[name] - p0[name] for name in p0}


def _error_rate(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predictions(logits) != labels))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Pearson correlation; None when either side has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size:
        raise ValueError("correlation needs equal-length inputs")
    if x.size < 2:
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        return None
    return float(np.dot(xc, yc)) / denom


def sign_agreement(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Fraction of positions where the two sequences share their sign.

    Zero counts as its own sign, so exact zeros only agree with zeros.
    """
    x = np.sign(np.asarray(xs, dtype=np.float64))
    y = np.sign(np.asarray(ys, dtype=np.float64))
    if x.size != y.size or x.size == 0:
        raise ValueError("sign agreement needs equal-length nonempty inputs")
    return float(np.mean(x == y))


# -------------------------------------------------------- curves and angle


def interpolation_advantage(
    theta1: Checkpoint, theta2: Checkpoint, X: np.ndarray, labels: np.ndarray
) -> float:
    """Accuracy of the midpoint average minus the mean endpoint accuracy."""
    midpoint = combine([0.5, 0.5], [theta1, theta2])
    acc_mid = evaluate(midpoint, X, labels).accuracy
    acc1 = evaluate(theta1, X, labels).accuracy
    acc2 = evaluate(theta2, X, labels).accuracy
    return acc_mid - 0.5 * (acc1 + acc2)


def pair_angle(
    theta0: Checkpoint,
    theta1: Checkpoint,
    theta2: Checkpoint,
    param_filter: ParamFilter = DEFAULT_ANGLE_FILTER,
) -> float:
    """Angle (degrees) between theta1 - theta0 and theta2 - theta0."""
    return angle_between(
        subtract(theta1, theta0), subtract(theta2, theta0), param_filter
    )


def interpolation_curve(
    theta0: Checkpoint,
    theta1: Checkpoint,
    alphas: Sequence[float],
    splits: Mapping[str, tuple[np.ndarray, np.ndarray]],
) -> list[dict]:
    """Loss/error along (1-a) theta0 + a theta1, one row per (alpha, split).

    Interpolates through checkpoint averaging (so alpha 0 and 1 evaluate
    the untouched endpoints bit for bit).
    """
    rows = []
    for alpha in alphas:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        point = combine([1.0 - alpha, alpha], [theta0, theta1])
        for split_name, (X, y) in splits.items():
            report = evaluate(point, X, y)
            rows.append(
                {
                    "alpha": float(alpha),
                    "split": split_name,
                    "loss": report.loss,
                    "top1_error": report.top1_error,
                }
            )
    return rows


def write_curve_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    lines = ["alpha,split,loss,top1_error"]
    for r in rows:
        lines.append(f"{r['alpha']!r},{r['split']},{r['loss']!r},{r['top1_error']!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------ 2-D landscape


@dataclass(frozen=True)
class PlaneBasis:
    """Orthonormal 2-D frame spanned by three anchor checkpoints.

    u1 points from the origin (theta0) toward theta1; u2 is the
    Gram-Schmidt remainder of theta2 - theta0.  Coordinates locate the
    three anchors in the (u1, u2) frame, origin first.
    """

    origin: Checkpoint
    u1: Checkpoint
    u2: Checkpoint
    coords0: tuple[float, float]
    coords1: tuple[float, float]
    coords2: tuple[float, float]


def _plane_frame(
    theta0: Checkpoint, theta1: Checkpoint, theta2: Checkpoint
) -> tuple[Params, Params, Params, PlaneBasis]:
    p0 = as_params(theta0)
    d1 = _delta_params(p0, as_params(theta1))
    d2 = _delta_params(p0, as_params(theta2))

    def norm(d: Params) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in d.values()))

    def dot(a: Params, b: Params) -> float:
        return sum(float(np.sum(a[k] * b[k])) for k in a)

    n1 = norm(d1)
    if n1 == 0.0:
        raise DegenerateBasisError("theta1 equals theta0; no direction to span")
    u1 = {k: v / n1 for k, v in d1.items()}
    proj = dot(d2, u1)
    resid = {k: d2[k] - proj * u1[k] for k in d2}
    n2 = norm(resid)
    # Relative threshold: exact parallels cancel only up to rounding.
    if n2 <= 1e-9 * norm(d2):
        raise DegenerateBasisError("theta2 - theta0 is parallel to theta1 - theta0")
    u2 = {k: v / n2 for k, v in resid.items()}
    basis = PlaneBasis(
        origin=theta0,
        u1=Checkpoint.from_arrays(
            {k: v.astype(np.float32) for k, v in u1.items()}, {"role": "plane-u1"}
        ),
        u2=Checkpoint.from_arrays(
            {k: v.astype(np.float32) for k, v in u2.items()}, {"role": "plane-u2"}
        ),
        coords0=(0.0, 0.0),
        coords1=(n1, 0.0),
        coords2=(proj, n2),
    )
    return p0, u1, u2, basis


def plane_basis(
    theta0: Checkpoint, theta1: Checkpoint, theta2: Checkpoint
) -> PlaneBasis:
    """The orthonormal frame alone, without evaluating any grid."""
    return _plane_frame(theta0, theta1, theta2)[3]


def plane_landscape(
    theta0: Checkpoint,
    theta1: Checkpoint,
    theta2: Checkpoint,
    xs: Sequence[float],
    ys: Sequence[float],
    X: np.ndarray,
    labels: np.ndarray,
    metric: str = "loss",
) -> tuple[np.ndarray, PlaneBasis]:
    """Metric values over theta0 + x*u1 + y*u2; matrix[i, j] = (ys[i], xs[j])."""
    if metric not in PLANE_METRICS:
        raise ValueError(f"metric must be one of {PLANE_METRICS}")
    p0, u1, u2, basis = _plane_frame(theta0, theta1, theta2)
    matrix = np.empty((len(ys), len(xs)), dtype=np.float64)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            point = {k: p0[k] + x * u1[k] + y * u2[k] for k in p0}
            report = evaluate(point, X, labels)
            matrix[i, j] = report.loss if metric == "loss" else report.top1_error
    return matrix, basis


def write_plane_csv(
    matrix: np.ndarray, xs: Sequence[float], ys: Sequence[float],
    basis: PlaneBasis, metric: str, path: str | Path,
) -> None:
    """Rectangular matrix: header row of x coords, one row per y coord."""
    lines = [
        "# metric={} coords0={!r} coords1={!r} coords2={!r}".format(
            metric, basis.coords0, basis.coords1, basis.coords2
        ),
        "y\\x," + ",".join(repr(float(x)) for x in xs),
    ]
    for i, y in enumerate(ys):
        lines.append(
            repr(float(y)) + "," + ",".join(repr(float(v)) for v in matrix[i])
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


# ------------------------------------------------------ endpoint-pair study


@dataclass(frozen=True)
class GridStudyCell:
    """One (a, b) index range: endpoint-average accuracy vs best inside."""

    a: int
    b: int
    pair_accuracy: float
    best_in_range: float
    advantage: float


def grid_endpoint_study(
    models: Sequence[Checkpoint], X: np.ndarray, labels: np.ndarray
) -> list[GridStudyCell]:
    """All index ranges [a, b]: Acc(avg(theta_a, theta_b)) - max Acc inside.

    Models must arrive ordered along one hyperparameter axis; the cell
    set is upper-triangular (a <= b) and diagonal cells are exactly 0.
    """
    if len(models) < 2:
        raise ValueError("need at least two models along the axis")
    accs = [evaluate(m, X, labels).accuracy for m in models]
    cells = []
    for a in range(len(models)):
        for b in range(a, len(models)):
            pair = combine([0.5, 0.5], [models[a], models[b]])
            pair_acc = evaluate(pair, X, labels).accuracy
            best = max(accs[a : b + 1])
            cells.append(
                GridStudyCell(
                    a=a,
                    b=b,
                    pair_accuracy=pair_acc,
                    best_in_range=best,
                    advantage=pair_acc - best,
                )
            )
    return cells


def write_grid_study_csv(cells: Sequence[GridStudyCell], path: str | Path) -> None:
    lines = ["a,b,pair_accuracy,best_in_range,advantage"]
    for c in cells:
        lines.append(
            f"{c.a},{c.b},{c.pair_accuracy!r},{c.best_in_range!r},{c.advantage!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------- soup vs ensemble, second order


@dataclass(frozen=True)
class ApproxRecord:
    """One evaluation of the second-order loss-gap approximation.

    ``approx_value`` is composed exactly as
    c_alpha * (-second_derivative_term + beta**2 * variance_term)
    with c_alpha = alpha * (1 - alpha) / 2.  ``true_loss_diff`` is
    L_soup - L_ens at the same beta; ``true_err_diff`` the 0-1 error
    difference (independent of beta).
    """

    pair_id: str
    split: str
    alpha: float
    beta: float
    approx_value: float
    true_loss_diff: float
    true_err_diff: float
    second_derivative_term: float
    variance_term: float


def _alpha_second_derivative(loss_at, alpha: float, h: float) -> float:
    """d2 loss / d alpha2 by second differences staying inside [0, 1]."""
    if alpha - h < 0.0:
        return (loss_at(alpha) - 2.0 * loss_at(alpha + h) + loss_at(alpha + 2.0 * h)) / (h * h)
    if alpha + h > 1.0:
        return (loss_at(alpha) - 2.0 * loss_at(alpha - h) + loss_at(alpha - 2.0 * h)) / (h * h)
    return (loss_at(alpha - h) - 2.0 * loss_at(alpha) + loss_at(alpha + h)) / (h * h)


def soup_vs_ensemble_approx(
    theta0: Checkpoint,
    theta1: Checkpoint,
    alpha: float,
    X: np.ndarray,
    labels: np.ndarray,
    beta_mode: str = "calibrate-soup",
    pair_id: str = "pair",
    split: str = "",
    h_alpha: float = ALPHA_FD_STEP,
) -> ApproxRecord:
    """Second-order estimate of L_soup - L_ens for one (pair, alpha)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if beta_mode not in BETA_MODES:
        raise ValueError(f"beta_mode must be one of {BETA_MODES}")
    if not 0.0 < h_alpha <= 0.5:
        raise ValueError("h_alpha must lie in (0, 0.5]")
    p0 = as_params(theta0)
    p1 = as_params(theta1)
    delta = _delta_params(p0, p1)
    labels = np.asarray(labels)

    f0 = forward(p0, X)
    f1 = forward(p1, X)
    delta_f = f1 - f0
    f_soup = forward(params_axpy(p0, delta, alpha), X)
    f_ens = (1.0 - alpha) * f0 + alpha * f1

    if beta_mode == "fixed-1":
        beta = 1.0
    else:
        beta = fit_temperature(f_soup, labels).beta

    def loss_at(a: float) -> float:
        return loss_ce(forward(params_axpy(p0, delta, a), X), labels, 0.0, beta)

    second_derivative = _alpha_second_derivative(loss_at, alpha, h_alpha)
    variance = float(np.mean(hessian_quadratic_form(beta * f_soup, delta_f)))
    c_alpha = alpha * (1.0 - alpha) / 2.0
    approx = c_alpha * (-second_derivative + beta**2 * variance)

    true_loss_diff = loss_ce(f_soup, labels, 0.0, beta) - loss_ce(f_ens, labels, 0.0, beta)
    true_err_diff = _error_rate(f_soup, labels) - _error_rate(f_ens, labels)

    values = (approx, true_loss_diff, true_err_diff, second_derivative, variance)
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteError(f"non-finite analysis value for pair {pair_id!r} at alpha {alpha}")
    return ApproxRecord(
        pair_id=pair_id,
        split=split,
        alpha=float(alpha),
        beta=beta,
        approx_value=approx,
        true_loss_diff=true_loss_diff,
        true_err_diff=true_err_diff,
        second_derivative_term=second_derivative,
        variance_term=variance,
    )


# -------------------------------------------------- exact integral identity


def interpolation_kernel(tau: np.ndarray | float, alpha: float) -> np.ndarray | float:
    """min{(1 - alpha) * tau, alpha * (1 - tau)}; integrates to alpha(1-alpha)/2."""
    return np.minimum((1.0 - alpha) * np.asarray(tau), alpha * (1.0 - np.asarray(tau)))


def ensemble_minus_soup_logits(
    theta0: Checkpoint | Params,
    theta1: Checkpoint | Params,
    alpha: float,
    X: np.ndarray,
) -> np.ndarray:
    """f_ens - f_soup per example and class, in float64 weight space."""
    p0 = as_params(theta0)
    p1 = as_params(theta1)
    f0 = forward(p0, X)
    f1 = forward(p1, X)
    f_soup = forward(params_axpy(p0, _delta_params(p0, p1), alpha), X)
    return (1.0 - alpha) * f0 + alpha * f1 - f_soup


def integral_oracle(
    theta0: Checkpoint | Params,
    theta1: Checkpoint | Params,
    alpha: float,
    X: np.ndarray,
    num_nodes: int = SIMPSON_NODES,
    curvature_step: float = 1e-3,
) -> np.ndarray:
    """|Simpson integral - (f_ens - f_soup)| per example and class.

    The integrand is the directional logit curvature along delta at
    theta_tau, weighted by the interpolation kernel; Simpson quadrature
    runs over ``num_nodes`` (odd, >= 3) evenly spaced tau nodes.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if num_nodes < 3 or num_nodes % 2 == 0:
        raise ValueError("num_nodes must be odd and >= 3")
    p0 = as_params(theta0)
    p1 = as_params(theta1)
    delta = _delta_params(p0, p1)

    taus = np.linspace(0.0, 1.0, num_nodes)
    h = 1.0 / (num_nodes - 1)
    integral = np.zeros((X.shape[0], arch_of(p0).num_classes))
    for j, tau in enumerate(taus):
        curvature = logit_second_directional(
            params_axpy(p0, delta, float(tau)), delta, X, h=curvature_step
        )
        simpson_w = 1.0 if j in (0, num_nodes - 1) else (4.0 if j % 2 == 1 else 2.0)
        integral += (h / 3.0) * simpson_w * float(interpolation_kernel(tau, alpha)) * curvature

    direct = ensemble_minus_soup_logits(p0, p1, alpha, X)
    return np.abs(integral - direct)


def relu_flip_count(
    theta0: Checkpoint | Params,
    theta1: Checkpoint | Params,
    X: np.ndarray,
    num_nodes: int = SIMPSON_NODES,
) -> int:
    """Hidden units whose activation state changes along the segment.

    Counts (example, layer, unit) positions whose preactivation sign at
    some tau node differs from its sign at tau = 0.  Zero means the
    integral identity's smoothness assumption holds on the path.
    """
    p0 = as_params(theta0)
    p1 = as_params(theta1)
    delta = _delta_params(p0, p1)
    baseline = None
    changed = None
    for tau in np.linspace(0.0, 1.0, num_nodes):
        cache, _ = _forward_cached(params_axpy(p0, delta, float(tau)), X)
        states = [cache[i]["u"] > 0.0 for i in range(len(cache) - 1)]
        if baseline is None:
            baseline = states
            changed = [np.zeros_like(s) for s in states]
        else:
            for c, s, b in zip(changed, states, baseline):
                c |= s != b
    return int(sum(c.sum() for c in changed))


# ------------------------------------------------------- validation report


@dataclass(frozen=True)
class PairSpec:
    """One (theta0, theta1) endpoint pair for the validation scatter.

    ``learning_rate`` tags the pair for the highest-lr exclusion (use
    the larger of the endpoints' rates); None means never excluded.
    """

    pair_id: str
    theta0: Checkpoint
    theta1: Checkpoint
    learning_rate: float | None = None


@dataclass(frozen=True)
class ApproxSummary:
    pearson: float | None
    sign_agreement: float | None
    count: int
    degenerate: bool


@dataclass
class ApproxValidationReport:
    records: list[ApproxRecord]
    summary_all: ApproxSummary
    summary_excluding_highest_lr: ApproxSummary
    excluded_learning_rate: float | None
    beta_mode: str


def _summarize(records: Sequence[ApproxRecord]) -> ApproxSummary:
    if not records:
        return ApproxSummary(pearson=None, sign_agreement=None, count=0, degenerate=True)
    approx = [r.approx_value for r in records]
    true = [r.true_loss_diff for r in records]
    corr = pearson(approx, true)
    return ApproxSummary(
        pearson=corr,
        sign_agreement=sign_agreement(approx, true),
        count=len(records),
        degenerate=corr is None,
    )


def approx_validation_report(
    pairs: Sequence[PairSpec],
    alpha_grid: Sequence[float],
    splits: Mapping[str, tuple[np.ndarray, np.ndarray]],
    beta_mode: str = "calibrate-soup",
    h_alpha: float = ALPHA_FD_STEP,
) -> ApproxValidationReport:
    """One record per (pair, split, alpha) plus scatter summaries.

    Summaries correlate approx_value with true_loss_diff, overall and
    with the highest-learning-rate pairs removed.
    """
    if len(pairs) < 2:
        raise ValueError("need at least two pairs")
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("pair_id values must be unique")
    records = []
    for pair in pairs:
        for split_name, (X, y) in splits.items():
            for alpha in alpha_grid:
                records.append(
                    soup_vs_ensemble_approx(
                        pair.theta0,
                        pair.theta1,
                        float(alpha),
                        X,
                        y,
                        beta_mode=beta_mode,
                        pair_id=pair.pair_id,
                        split=split_name,
                        h_alpha=h_alpha,
                    )
                )
    rates = [p.learning_rate for p in pairs if p.learning_rate is not None]
    excluded_rate = max(rates) if rates else None
    if excluded_rate is None:
        kept_ids = {p.pair_id for p in pairs}
    else:
        kept_ids = {p.pair_id for p in pairs if p.learning_rate != excluded_rate}
    kept_records = [r for r in records if r.pair_id in kept_ids]
    return ApproxValidationReport(
        records=records,
        summary_all=_summarize(records),
        summary_excluding_highest_lr=_summarize(kept_records),
        excluded_learning_rate=excluded_rate,
        beta_mode=beta_mode,
    )


def write_approx_csv(report: ApproxValidationReport, path: str | Path) -> None:
    def fmt(summary: ApproxSummary) -> str:
        return "pearson={} sign_agreement={} count={} degenerate={}".format(
            "NA" if summary.pearson is None else repr(summary.pearson),
            "NA" if summary.sign_agreement is None else repr(summary.sign_agreement),
            summary.count,
            summary.degenerate,
        )

    lines = [
        "# beta_mode={} all: {} excluding_highest_lr: {} excluded_learning_rate={}".format(
            report.beta_mode,
            fmt(report.summary_all),
            fmt(report.summary_excluding_highest_lr),
            "NA"
            if report.excluded_learning_rate is None
            else repr(report.excluded_learning_rate),
        ),
        "pair,split,alpha,beta,approx_value,true_loss_diff,true_err_diff,"
        "second_derivative_term,variance_term",
    ]
    for r in report.records:
        lines.append(
            f"{r.pair_id},{r.split},{r.alpha!r},{r.beta!r},{r.approx_value!r},"
            f"{r.true_loss_diff!r},{r.true_err_diff!r},"
            f"{r.second_derivative_term!r},{r.variance_term!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
