"""Deterministic training: base-model pretraining and fine-tuning sweeps.

Given the same inputs, every function here reproduces its outputs bit
for bit.  All stochastic choices come from portable substreams:

* weight init: handled by :func:`soupkit.tinynet.init_checkpoint`,
* data order: one stream per epoch, seeded ``derive_seed(h.seed, epoch)``;
  its draws are consumed as (1) the epoch permutation, then per batch
  (2) input-noise normals when ``input_noise_std > 0``, then (3) the
  mixup lambda and batch permutation when ``mixup_alpha > 0``,
* random hyperparameter search: one stream per candidate index.

Training math runs in float64; weights round to float32 only when a
checkpoint is materialized.  The recorded validation accuracy is always
computed from the rounded checkpoint, so reloading a saved file and
re-evaluating reproduces the manifest value exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset
from .errors import ConfigError, DivergenceError, SoupkitError
from .fileio import atomic_write_text
from .rng import PortableRng, derive_seed
from .tensorstore import Checkpoint, content_digest, load as load_checkpoint, save as save_checkpoint
from .tinynet import (
    ArchSpec,
    Params,
    as_params,
    evaluate,
    forward,
    grad64,
    init_checkpoint,
    loss_ce,
    smoothed_targets,
)

OPTIMIZERS = ("sgd", "adamw")
SCHEDULES = ("constant", "cosine")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class HyperConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 8
    batch_size: int = 64
    seed: int = 0
    label_smoothing: float = 0.0
    mixup_alpha: float = 0.0
    input_noise_std: float = 0.0
    optimizer: str = "adamw"
    schedule: str = "cosine"
    ema_decay: float | None = None
    sam_rho: float | None = None

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.mixup_alpha < 0:
            raise ConfigError("mixup_alpha must be nonnegative")
        if self.input_noise_std < 0:
            raise ConfigError("input_noise_std must be nonnegative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.sam_rho is not None and self.sam_rho < 0.0:
            raise ConfigError("sam_rho must be nonnegative; zero disables the ascent step")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "HyperConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """base * 0.5 * (1 + cos(pi * step / total_steps))."""
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def schedule_lr(h: HyperConfig, step: int, total_steps: int) -> float:
    if h.schedule == "constant":
        return h.learning_rate
    return cosine_lr(h.learning_rate, step, total_steps)


def mixup_batch(
    X: np.ndarray, targets: np.ndarray, alpha: float, rng: PortableRng
) -> tuple[np.ndarray, np.ndarray]:
    """Convexly blend the batch with a shuffled copy of itself.

    lambda ~ Beta(alpha, alpha); alpha == 0 is the identity and consumes
    no draws.  Target rows blend with the same lambda as the inputs.
    """
    if alpha == 0.0:
        return X, targets
    lam = rng.beta(alpha, alpha)
    perm = rng.permutation(len(X))
    return lam * X + (1.0 - lam) * X[perm], lam * targets + (1.0 - lam) * targets[perm]


def sgd_step(params: Params, grads: Params, lr: float, weight_decay: float) -> None:
    """In-place w -= lr * (g + wd * w)."""
    for name in params:
        params[name] -= lr * (grads[name] + weight_decay * params[name])


@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: Params, grads: Params, state: AdamState, lr: float, weight_decay: float
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    m and v use betas (0.9, 0.999) with bias correction; decay is applied
    directly to the weights, scaled by lr, never through the moments.
    """
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name in params:
        g = grads[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] -= lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + weight_decay * params[name])


def _global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def _split_loss(params: Params, X: np.ndarray, y: np.ndarray, smoothing: float) -> float:
    return loss_ce(forward(params, X), y, smoothing=smoothing)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    ema: Checkpoint | None
    train_loss_initial: float
    train_loss_final: float


def _train_loop(params0: Params, h: HyperConfig, dataset: Dataset) -> tuple[Params, Params | None, float, float]:
    train = dataset.train
    num_classes = int(train.y.max()) + 1
    if dataset.config is not None:
        num_classes = dataset.config.num_classes
    X_all = train.x.astype(np.float64)
    base_targets = smoothed_targets(train.y, num_classes, h.label_smoothing)

    params = {k: v.copy() for k, v in params0.items()}
    ema = {k: v.copy() for k, v in params0.items()} if h.ema_decay is not None else None
    adam = AdamState.zeros_like(params) if h.optimizer == "adamw" else None

    n = len(train.y)
    steps_per_epoch = (n + h.batch_size - 1) // h.batch_size
    total_steps = h.epochs * steps_per_epoch
    loss_initial = _split_loss(params, X_all, train.y, h.label_smoothing)

    step = 0
    for epoch in range(h.epochs):
        rng = PortableRng(derive_seed(h.seed, epoch))
        order = rng.permutation(n)
        for start in range(0, n, h.batch_size):
            batch_idx = order[start : start + h.batch_size]
            xb = X_all[batch_idx]
            tb = base_targets[batch_idx]
            if h.input_noise_std > 0.0:
                noise = rng.normals(xb.size).reshape(xb.shape)
                xb = xb + h.input_noise_std * noise
            if h.mixup_alpha > 0.0:
                xb, tb = mixup_batch(xb, tb, h.mixup_alpha, rng)

            lr = schedule_lr(h, step, total_steps)
            # Divergence is detected explicitly below, so let overflow
            # reach the isfinite check instead of warning.
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = grad64(params, xb, tb)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at step {step}")
            if h.sam_rho:
                norm = _global_norm(grads)
                if norm > 0.0:
                    ascended = {k: params[k] + h.sam_rho * grads[k] / norm for k in params}
                    loss, grads = grad64(ascended, xb, tb)
                    if not math.isfinite(loss):
                        raise DivergenceError(f"non-finite perturbed loss at step {step}")
            if h.optimizer == "sgd":
                sgd_step(params, grads, lr, h.weight_decay)
            else:
                adamw_step(params, grads, adam, lr, h.weight_decay)
            if ema is not None:
                d = h.ema_decay
                for k in params:
                    ema[k] = d * ema[k] + (1.0 - d) * params[k]
            step += 1

    loss_final = _split_loss(params, X_all, train.y, h.label_smoothing)
    return params, ema, loss_initial, loss_final


def _finalize(
    params: Params, meta: dict[str, str], dataset: Dataset
) -> tuple[Checkpoint, float]:
    ckpt = Checkpoint.from_arrays({k: v.astype(np.float32) for k, v in params.items()})
    report = evaluate(ckpt, dataset.val.x, dataset.val.y)
    meta = dict(meta)
    meta["val_accuracy"] = repr(report.accuracy)
    ckpt.meta.update(meta)
    return ckpt, report.accuracy


def pretrain(arch: ArchSpec, dataset: Dataset, cfg: HyperConfig) -> Checkpoint:
    """Train a fresh base model from a seeded init; returns theta0."""
    cfg.validate()
    init = init_checkpoint(arch, cfg.seed)
    params, _, loss_init, loss_final = _train_loop(init.astype64(), cfg, dataset)
    meta = {
        "role": "pretrain",
        "arch": ",".join(str(w) for w in arch.layer_widths),
        "hyper": cfg.to_json(),
        "config_digest": cfg.digest(),
        "train_loss_initial": repr(loss_init),
        "train_loss_final": repr(loss_final),
    }
    ckpt, _ = _finalize(params, meta, dataset)
    return ckpt


def finetune(theta0: Checkpoint, h: HyperConfig, dataset: Dataset) -> TrainResult:
    """Fine-tune from a shared base; deterministic in (theta0, h, dataset)."""
    h.validate()
    base_digest = content_digest(theta0)
    params, ema, loss_init, loss_final = _train_loop(as_params(theta0), h, dataset)
    meta = {
        "role": "finetune",
        "hyper": h.to_json(),
        "config_digest": h.digest(),
        "base_digest": base_digest,
        "train_loss_initial": repr(loss_init),
        "train_loss_final": repr(loss_final),
    }
    ckpt, _ = _finalize(params, meta, dataset)
    ema_ckpt = None
    if ema is not None:
        ema_ckpt, _ = _finalize(ema, {**meta, "role": "finetune-ema"}, dataset)
    return TrainResult(
        checkpoint=ckpt, ema=ema_ckpt, train_loss_initial=loss_init, train_loss_final=loss_final
    )


# ------------------------------------------------------------- random search


@dataclass(frozen=True)
class SearchSpace:
    """Sampling ranges for random hyperparameter search.

    Draw order per candidate, from PortableRng(derive_seed(master, i)):
    lr exponent, wd exponent, smoothing coin + value, epochs, mixup coin
    + value, noise coin + value (only when a noise range is configured),
    then one raw draw whose top 53 bits become the training seed.
    """

    lr_exponent_range: tuple[float, float] = (1.5, 4.0)
    wd_exponent_range: tuple[float, float] = (0.2, 4.0)
    smoothing_max: float = 0.25
    smoothing_off_probability: float = 0.5
    epochs_range: tuple[int, int] = (4, 16)
    mixup_max: float = 0.9
    mixup_off_probability: float = 0.5
    noise_std_max: float = 0.0
    noise_off_probability: float = 0.5
    batch_size: int = 64
    optimizer: str = "adamw"
    schedule: str = "cosine"


def random_search_configs(
    count: int, master_seed: int, space: SearchSpace = SearchSpace()
) -> list[HyperConfig]:
    """Independent random-search candidates; lr/wd are log-uniform."""
    configs = []
    for i in range(count):
        rng = PortableRng(derive_seed(master_seed, i))
        lo, hi = space.lr_exponent_range
        lr = 10.0 ** -(lo + (hi - lo) * rng.uniforms(1)[0])
        lo, hi = space.wd_exponent_range
        wd = 10.0 ** -(lo + (hi - lo) * rng.uniforms(1)[0])
        coin, value = rng.uniforms(2)
        smoothing = 0.0 if coin < space.smoothing_off_probability else value * space.smoothing_max
        e_lo, e_hi = space.epochs_range
        epochs = e_lo + rng.below(e_hi - e_lo + 1)
        coin, value = rng.uniforms(2)
        mixup = 0.0 if coin < space.mixup_off_probability else value * space.mixup_max
        noise = 0.0
        if space.noise_std_max > 0.0:
            coin, value = rng.uniforms(2)
            noise = 0.0 if coin < space.noise_off_probability else value * space.noise_std_max
        seed = int(rng.raw(1)[0] >> np.uint64(11))
        configs.append(
            HyperConfig(
                learning_rate=float(lr),
                weight_decay=float(wd),
                epochs=int(epochs),
                batch_size=space.batch_size,
                seed=seed,
                label_smoothing=float(smoothing),
                mixup_alpha=float(mixup),
                input_noise_std=float(noise),
                optimizer=space.optimizer,
                schedule=space.schedule,
            )
        )
    return configs


# ------------------------------------------------------------- sweeps


@dataclass
class SweepEntry:
    index: int
    config: HyperConfig
    path: str | None = None
    val_accuracy: float | None = None
    ema_path: str | None = None
    ema_val_accuracy: float | None = None
    error: str | None = None


@dataclass
class SweepManifest:
    entries: list[SweepEntry]
    theta0_digest: str = ""
    directory: str = ""

    def successful(self) -> list[SweepEntry]:
        return [e for e in self.entries if e.error is None]

    def checkpoint_path(self, entry: SweepEntry) -> Path:
        return Path(self.directory) / entry.path

    def load_checkpoints(self) -> list[Checkpoint]:
        return [load_checkpoint(self.checkpoint_path(e)) for e in self.successful()]


def effective_workers(requested: int | None) -> int:
    """Worker count for sweep execution, capped by SOUPKIT_THREADS."""
    cap = os.environ.get("SOUPKIT_THREADS")
    workers = requested if requested is not None else 1
    if cap is not None:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"SOUPKIT_THREADS must be an integer, got {cap!r}") from exc
    return max(1, workers)


def run_sweep(
    theta0: Checkpoint,
    configs: Sequence[HyperConfig],
    dataset: Dataset,
    out_dir: str | Path,
    max_workers: int | None = None,
) -> SweepManifest:
    """Fine-tune every config, saving checkpoints and a manifest.

    Failures are recorded per entry (error string, no path); the other
    entries still complete.  Entry order always follows config order, so
    the manifest is identical regardless of worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run_one(index: int) -> SweepEntry:
        h = configs[index]
        entry = SweepEntry(index=index, config=h)
        try:
            result = finetune(theta0, h, dataset)
        except SoupkitError as exc:
            entry.error = f"{type(exc).__name__}: {exc}"
            return entry
        name = f"model_{index:03d}.ckpt"
        save_checkpoint(result.checkpoint, out_dir / name)
        entry.path = name
        entry.val_accuracy = float(result.checkpoint.meta["val_accuracy"])
        if result.ema is not None:
            ema_name = f"model_{index:03d}.ema.ckpt"
            save_checkpoint(result.ema, out_dir / ema_name)
            entry.ema_path = ema_name
            entry.ema_val_accuracy = float(result.ema.meta["val_accuracy"])
        return entry

    workers = effective_workers(max_workers)
    if workers == 1:
        entries = [run_one(i) for i in range(len(configs))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run_one, range(len(configs))))

    manifest = SweepManifest(
        entries=entries, theta0_digest=content_digest(theta0), directory=str(out_dir)
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def save_manifest(manifest: SweepManifest, path: str | Path) -> None:
    doc = {
        "theta0_digest": manifest.theta0_digest,
        "entries": [
            {
                "index": e.index,
                "config": asdict(e.config),
                "path": e.path,
                "val_accuracy": e.val_accuracy,
                "ema_path": e.ema_path,
                "ema_val_accuracy": e.ema_val_accuracy,
                "error": e.error,
            }
            for e in manifest.entries
        ],
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> SweepManifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    entries = [
        SweepEntry(
            index=e["index"],
            config=HyperConfig.from_dict(e["config"]),
            path=e["path"],
            val_accuracy=e["val_accuracy"],
            ema_path=e.get("ema_path"),
            ema_val_accuracy=e.get("ema_val_accuracy"),
            error=e.get("error"),
        )
        for e in raw["entries"]
    ]
    return SweepManifest(
        entries=entries, theta0_digest=raw.get("theta0_digest", ""), directory=str(path.parent)
    )
