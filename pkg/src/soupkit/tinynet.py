"""A small fully-connected classifier with an analytic backward pass.

Architecture: ``layer_widths = (input_dim, h1, ..., num_classes)`` with
at least one hidden layer.  Hidden layer ``i`` computes

    a = relu(gain_i * (x @ W_i + b_i))

where ``gain_i`` is an elementwise vector applied before the activation;
the final layer is affine with no gain.  Parameters are named
``layer{i}.weight``, ``layer{i}.bias`` and, for hidden layers only,
``layer{i}.gain``.

Checkpoints store float32, but every computation here runs in float64:
operations accept either a :class:`~soupkit.tensorstore.Checkpoint` or a
plain ``{name: float64 array}`` mapping, and analyses that need exact
derivative probes pass float64 mappings straight through.  The relu
subgradient at exactly zero is taken to be zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeMismatchError
from .rng import PortableRng, derive_seed
from .tensorstore import Checkpoint

Params = dict[str, np.ndarray]

_INIT_STREAM_TAG = 0x494E4954  # distinct substream for weight init draws


@dataclass(frozen=True)
class ArchSpec:
    """Full width chain, input through hidden layers to class count."""

    layer_widths: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.layer_widths) < 3:
            raise ValueError("need at least one hidden layer: (in, hidden..., classes)")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1


def as_params(theta: Checkpoint | Mapping[str, np.ndarray]) -> Params:
    """Float64 parameter map from a checkpoint or array mapping."""
    if isinstance(theta, Checkpoint):
        return theta.astype64()
    return {k: np.asarray(v, dtype=np.float64) for k, v in theta.items()}


def _structure(params: Params) -> int:
    """Validate the layer{i}.* naming scheme; return the layer count."""
    layers = set()
    for name in params:
        head, _, leaf = name.partition(".")
        if not head.startswith("layer") or leaf not in ("weight", "bias", "gain"):
            raise ShapeMismatchError(f"unrecognized parameter name {name!r}")
        try:
            layers.add(int(head[5:]))
        except ValueError as exc:
            raise ShapeMismatchError(f"unrecognized parameter name {name!r}") from exc
    count = max(layers) + 1
    if layers != set(range(count)):
        raise ShapeMismatchError(f"non-contiguous layer indices {sorted(layers)}")
    for i in range(count):
        for leaf in ("weight", "bias") + (("gain",) if i < count - 1 else ()):
            if f"layer{i}.{leaf}" not in params:
                raise ShapeMismatchError(f"missing parameter layer{i}.{leaf}")
    return count


def arch_of(theta: Checkpoint | Mapping[str, np.ndarray]) -> ArchSpec:
    """Recover the width chain from parameter shapes."""
    params = as_params(theta)
    count = _structure(params)
    widths = [params["layer0.weight"].shape[0]]
    for i in range(count):
        widths.append(params[f"layer{i}.weight"].shape[1])
    return ArchSpec(tuple(widths))


def init_checkpoint(arch: ArchSpec, seed: int) -> Checkpoint:
    """He-style gaussian init, drawn from a dedicated portable substream.

    Hidden weights ~ N(0, 2/fan_in), head weights ~ N(0, 1/fan_in),
    biases zero, gains one.  Weights are drawn layer by layer in
    row-major order.
    """
    rng = PortableRng(derive_seed(seed, _INIT_STREAM_TAG))
    arrays: dict[str, np.ndarray] = {}
    for i in range(arch.num_layers):
        fan_in, fan_out = arch.layer_widths[i], arch.layer_widths[i + 1]
        hidden = i < arch.num_layers - 1
        std = np.sqrt((2.0 if hidden else 1.0) / fan_in)
        arrays[f"layer{i}.weight"] = std * rng.normals(fan_in * fan_out).reshape(fan_in, fan_out)
        arrays[f"layer{i}.bias"] = np.zeros(fan_out)
        if hidden:
            arrays[f"layer{i}.gain"] = np.ones(fan_out)
    meta = {
        "role": "init",
        "arch": ",".join(str(w) for w in arch.layer_widths),
        "seed": str(seed),
    }
    return Checkpoint.from_arrays(arrays, meta)


def _forward_cached(params: Params, X: np.ndarray) -> tuple[list[dict], np.ndarray]:
    count = _structure(params)
    x = np.asarray(X, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params["layer0.weight"].shape[0]:
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match layer0.weight {params['layer0.weight'].shape}"
        )
    cache: list[dict] = []
    for i in range(count - 1):
        z = x @ params[f"layer{i}.weight"] + params[f"layer{i}.bias"]
        u = params[f"layer{i}.gain"] * z
        a = np.maximum(u, 0.0)
        cache.append({"x": x, "z": z, "u": u})
        x = a
    logits = x @ params[f"layer{count - 1}.weight"] + params[f"layer{count - 1}.bias"]
    cache.append({"x": x})
    return cache, logits


def forward(theta: Checkpoint | Mapping[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    """Float64 logits, shape [n, num_classes]."""
    _, logits = _forward_cached(as_params(theta), X)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    g = np.asarray(logits, dtype=np.float64)
    g = g - np.max(g, axis=-1, keepdims=True)
    e = np.exp(g)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    g = np.asarray(logits, dtype=np.float64)
    m = np.max(g, axis=-1, keepdims=True)
    return g - m - np.log(np.sum(np.exp(g - m), axis=-1, keepdims=True))


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    """(1 - s) * onehot + s / C target rows."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels out of range for {num_classes} classes")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    targets = np.full((labels.size, num_classes), smoothing / num_classes, dtype=np.float64)
    targets[np.arange(labels.size), labels] += 1.0 - smoothing
    return targets


def cross_entropy_from_targets(
    logits: np.ndarray, targets: np.ndarray, inv_temperature: float = 1.0
) -> float:
    """Mean of -sum_c targets[c] * log softmax(beta * logits)[c]."""
    if inv_temperature <= 0.0:
        raise ValueError("inv_temperature must be positive")
    ls = log_softmax(inv_temperature * np.asarray(logits, dtype=np.float64))
    return float(-np.mean(np.sum(targets * ls, axis=1)))


def loss_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    smoothing: float = 0.0,
    inv_temperature: float = 1.0,
) -> float:
    """Mean label-smoothed cross-entropy of beta * logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = smoothed_targets(labels, logits.shape[1], smoothing)
    return cross_entropy_from_targets(logits, targets, inv_temperature)


def grad64(
    params: Params,
    X: np.ndarray,
    targets: np.ndarray,
    inv_temperature: float = 1.0,
) -> tuple[float, Params]:
    """Loss and its gradient w.r.t. every parameter, all float64.

    Loss is the batch mean of the target-distribution cross-entropy of
    ``inv_temperature * logits``.
    """
    count = _structure(params)
    cache, logits = _forward_cached(params, X)
    n = logits.shape[0]
    probs = softmax(inv_temperature * logits)
    loss = cross_entropy_from_targets(logits, targets, inv_temperature)
    grads: Params = {}
    upstream = inv_temperature * (probs - targets) / n  # d loss / d logits
    for i in range(count - 1, -1, -1):
        layer_in = cache[i]["x"]
        if i == count - 1:
            d_z = upstream
        else:
            mask = cache[i]["u"] > 0.0
            d_u = upstream * mask
            grads[f"layer{i}.gain"] = np.sum(d_u * cache[i]["z"], axis=0)
            d_z = d_u * params[f"layer{i}.gain"]
        grads[f"layer{i}.weight"] = layer_in.T @ d_z
        grads[f"layer{i}.bias"] = np.sum(d_z, axis=0)
        if i > 0:
            upstream = d_z @ params[f"layer{i}.weight"].T
    ordered = {name: grads[name] for name in params}
    return loss, ordered


def grad(
    theta: Checkpoint | Mapping[str, np.ndarray],
    X: np.ndarray,
    labels: np.ndarray,
    smoothing: float = 0.0,
    inv_temperature: float = 1.0,
) -> Checkpoint:
    """Mean-loss gradient packaged as a checkpoint with theta's shapes."""
    params = as_params(theta)
    num_classes = arch_of(params).num_classes
    targets = smoothed_targets(labels, num_classes, smoothing)
    _, grads = grad64(params, X, targets, inv_temperature)
    return Checkpoint.from_arrays(grads, {"role": "gradient"})


def hessian_quadratic_form(logits: np.ndarray, v: np.ndarray) -> np.ndarray | float:
    """v' H v for the cross-entropy Hessian in logit space.

    Equals the variance of v[Y] under Y ~ softmax(logits); accepts a
    single row or a batch of rows.
    """
    f = np.asarray(logits, dtype=np.float64)
    w = np.asarray(v, dtype=np.float64)
    if f.shape != w.shape:
        raise ShapeMismatchError(f"logits shape {f.shape} != direction shape {w.shape}")
    p = softmax(f)
    mean = np.sum(p * w, axis=-1)
    second = np.sum(p * w * w, axis=-1)
    out = second - mean * mean
    return float(out) if out.ndim == 0 else out


def logit_second_directional(
    theta: Checkpoint | Mapping[str, np.ndarray],
    delta: Checkpoint | Mapping[str, np.ndarray],
    X: np.ndarray,
    h: float = 1e-3,
) -> np.ndarray:
    """Central second difference of logits along delta, per class.

    Returns (f(theta + h*delta) - 2 f(theta) + f(theta - h*delta)) / h**2
    with shape [n, num_classes], computed entirely in float64.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    params = as_params(theta)
    d = as_params(delta)
    if set(params) != set(d):
        raise ShapeMismatchError("delta names do not match theta names")
    plus = {k: params[k] + h * d[k] for k in params}
    minus = {k: params[k] - h * d[k] for k in params}
    f0 = forward(params, X)
    fp = forward(plus, X)
    fm = forward(minus, X)
    return (fp - 2.0 * f0 + fm) / (h * h)


@dataclass
class EvalReport:
    """Scalar metrics of one model (or merged model) on one split."""

    count: int
    loss: float
    top1_error: float
    calibrated_loss: float | None = None
    ece: float | None = None

    @property
    def accuracy(self) -> float:
        return 1.0 - self.top1_error


def predictions(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def evaluate(
    theta: Checkpoint | Mapping[str, np.ndarray],
    X: np.ndarray,
    labels: np.ndarray,
    inv_temperature: float | None = None,
) -> EvalReport:
    """Loss and top-1 error on a split; calibrated loss when beta given."""
    logits = forward(theta, X)
    labels = np.asarray(labels)
    loss = loss_ce(logits, labels)
    err = float(np.mean(predictions(logits) != labels))
    calibrated = None
    if inv_temperature is not None:
        calibrated = loss_ce(logits, labels, inv_temperature=inv_temperature)
    return EvalReport(count=len(labels), loss=loss, top1_error=err, calibrated_loss=calibrated)


def params_axpy(base: Params, direction: Params, t: float) -> Params:
    """base + t * direction, a float64 point on a weight-space line."""
    return {k: base[k] + t * direction[k] for k in base}
