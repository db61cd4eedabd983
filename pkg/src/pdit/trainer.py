"""Return-conditioned supervised training and evaluation rollouts."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .dataset import OfflineDataset
from .engine import (
    OptimizerState,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    ops,
    optimizer_step,
    zero_grads,
)
from .envs import make_env, obs_arrays
from .network import PDiTConfig, TrajectoryContext, forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-3
    clip_norm: float | None = 0.25
    eval_episodes: int = 50
    eval_interval: int = 1
    target_return: float | None = None  # None: dataset max return x multiplier
    target_multiplier: float = 1.0
    seed: int = 0
    steps_per_epoch: int | None = None  # None: one shuffled pass over all decision points
    lr_schedule: str = "cosine"  # constant | cosine
    warmup_steps: int = 50

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_episodes < 0 or self.eval_interval < 1:
            raise ValueError("epochs, batch_size, eval_episodes and eval_interval must be positive")
        if self.target_return is not None and not math.isfinite(self.target_return):
            raise ValueError("target_return must be finite")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Batch:
    ctx: TrajectoryContext
    targets: np.ndarray  # (B,) ids or (B, dim)
    mask: np.ndarray  # (B,) bool


@dataclass
class TrainResult:
    metrics: list[dict[str, Any]]
    params: dict[str, Tensor]
    best_params: dict[str, np.ndarray]
    best_eval: float | None


# -------------------------------------------------------------------- windows
def window_indices(t: int, context: int) -> tuple[np.ndarray, np.ndarray]:
    ks = np.arange(t - context, t + 1)
    return ks, ks >= 0


def build_context(
    items: list[tuple[np.ndarray, np.ndarray | None, np.ndarray, np.ndarray, int]],
    config: PDiTConfig,
) -> TrajectoryContext:
    """Stack windows ending at ``t`` for each ``(obs, words, rtg, actions, t)``.

    ``obs``/``words``/``rtg`` need entries for ``0..t``; ``actions`` for
    ``0..t-1``.  Positions before the episode start are zero and flagged.
    """
    k = config.context
    b = len(items)
    w = k + 1
    obs = np.zeros((b, w, *config.obs_shape))
    rtg = np.zeros((b, w))
    valid = np.zeros((b, w), dtype=bool)
    words = np.zeros((b, w, config.n_words), dtype=np.int64) if config.modality == "hybrid" else None
    if config.discrete:
        actions = np.zeros((b, k), dtype=np.int64)
    else:
        actions = np.zeros((b, k, config.action_dim))
    for i, (o, wd, r, a, t) in enumerate(items):
        ks, ok = window_indices(t, k)
        src = ks[ok]
        dst = np.nonzero(ok)[0]
        obs[i, dst] = o[src]
        rtg[i, dst] = r[src]
        valid[i, dst] = True
        if words is not None:
            words[i, dst] = wd[src]
        asrc = src[src < t]
        actions[i, dst[: len(asrc)]] = a[asrc]
    return TrajectoryContext(rtg, obs, actions, valid, words)


def decision_points(ds: OfflineDataset) -> np.ndarray:
    """All ``(trajectory, t)`` pairs, shape ``(M, 2)``."""
    return np.array([(i, t) for i, tr in enumerate(ds.trajectories) for t in range(len(tr))], dtype=np.int64)


def batch_from_pairs(ds: OfflineDataset, pairs: np.ndarray, config: PDiTConfig) -> Batch:
    items, targets = [], []
    for i, t in pairs:
        tr = ds.trajectories[int(i)]
        items.append((tr.observations, tr.words, tr.rtg, tr.actions, int(t)))
        targets.append(tr.actions[int(t)])
    ctx = build_context(items, config)
    return Batch(ctx, np.asarray(targets), np.ones(len(pairs), dtype=bool))


def sample_batch(ds: OfflineDataset, config: PDiTConfig, batch_size: int, rng: np.random.Generator,
                 pairs: np.ndarray | None = None) -> Batch:
    """Uniform over decision points, with replacement."""
    if len(ds) == 0:
        raise ValueError("cannot sample from an empty dataset")
    pairs = decision_points(ds) if pairs is None else pairs
    pick = rng.integers(len(pairs), size=batch_size)
    return batch_from_pairs(ds, pairs[pick], config)


# ----------------------------------------------------------------------- loss
def loss_fn(pred: Tensor, target: np.ndarray, mask: np.ndarray, discrete: bool) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss over an all-masked batch")
    weights = Tensor(mask.astype(pred.dtype) / n, dtype=pred.dtype)
    if discrete:
        nll = ops.mul(ops.pick(ops.log_softmax(pred, axis=-1), np.asarray(target, dtype=np.int64)), -1.0)
        return ops.sum(ops.mul(nll, weights))
    diff = ops.sub(pred, Tensor(np.asarray(target), dtype=pred.dtype))
    per = ops.mean(ops.mul(diff, diff), axis=-1)
    return ops.sum(ops.mul(per, weights))


def check_compatible(config: PDiTConfig, ds: OfflineDataset) -> None:
    tr = ds.trajectories[0]
    if tr.modality != config.modality:
        raise CompatibilityError(f"dataset modality {tr.modality!r} does not match network modality {config.modality!r}")
    if tuple(tr.observations.shape[1:]) != config.obs_shape:
        raise CompatibilityError(f"dataset observations {tr.observations.shape[1:]} do not match {config.obs_shape}")
    discrete = tr.actions.dtype.kind in "iu"
    if discrete != config.discrete:
        raise CompatibilityError("dataset action space does not match network action space")
    if not discrete and tr.actions.shape[1] != config.action_dim:
        raise CompatibilityError(f"dataset action dim {tr.actions.shape[1]} != {config.action_dim}")


# ----------------------------------------------------------------- evaluation
@dataclass
class EvalResult:
    mean: float
    std: float
    returns: list[float]
    target_return: float
    episodes: int

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "std": self.std, "episodes": self.episodes, "target_return": self.target_return}


def _select_action(out: np.ndarray, discrete: bool):
    return [int(a) for a in out.argmax(axis=-1)] if discrete else [np.asarray(a, dtype=np.float64) for a in out]


def evaluate(
    params: dict[str, Tensor],
    config: PDiTConfig,
    env_config: dict[str, Any] | str,
    target_return: float,
    episodes: int,
    seed: int = 0,
) -> EvalResult:
    """Roll out ``episodes`` in lockstep, conditioning on a decrementing return."""
    probe = make_env(env_config)
    if probe.modality != config.modality or tuple(probe.obs_shape) != config.obs_shape:
        raise CompatibilityError(
            f"env {probe.name!r} ({probe.modality}, {tuple(probe.obs_shape)}) does not match the network "
            f"({config.modality}, {config.obs_shape})"
        )
    if (probe.action_type == "discrete") != config.discrete:
        raise CompatibilityError("env action space does not match the network")
    seeds = np.random.SeedSequence([seed, 7919]).generate_state(max(episodes, 1))[:episodes]
    envs, hist = [], []
    for s in seeds:
        env = make_env(env_config)
        o = env.reset(int(s))
        arr, words = obs_arrays(o)
        envs.append(env)
        hist.append({"obs": [arr], "words": [words], "rtg": [float(target_return)], "actions": [], "ret": 0.0})
    with no_grad():
        while True:
            live = [i for i, e in enumerate(envs) if not e.done]
            if not live:
                break
            items = []
            for i in live:
                h = hist[i]
                t = len(h["actions"])
                items.append((
                    np.asarray(h["obs"]),
                    np.asarray(h["words"]) if config.modality == "hybrid" else None,
                    np.asarray(h["rtg"]),
                    np.asarray(h["actions"]) if h["actions"] else np.zeros((0,) if config.discrete else (0, config.action_dim)),
                    t,
                ))
            ctx = build_context(items, config)
            out = forward(ctx, params, config).data
            for i, a in zip(live, _select_action(out, config.discrete)):
                o, r, _ = envs[i].step(a)
                h = hist[i]
                arr, words = obs_arrays(o)
                h["obs"].append(arr)
                h["words"].append(words)
                h["actions"].append(a)
                h["rtg"].append(h["rtg"][-1] - r)
                h["ret"] += r
    rets = [h["ret"] for h in hist]
    return EvalResult(
        float(np.mean(rets)) if rets else 0.0,
        float(np.std(rets)) if rets else 0.0,
        rets,
        float(target_return),
        episodes,
    )


def default_target_return(ds: OfflineDataset, multiplier: float = 1.0) -> float:
    return float(ds.returns().max() * multiplier)


# ------------------------------------------------------------------- training
def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def scheduled_lr(tc: TrainConfig, step: int, total: int) -> float:
    """Learning rate for the 0-based optimizer ``step`` of ``total``."""
    if step < tc.warmup_steps:
        return tc.lr * (step + 1) / tc.warmup_steps
    if tc.lr_schedule == "constant":
        return tc.lr
    span = max(1, total - tc.warmup_steps)
    frac = min(1.0, (step - tc.warmup_steps) / span)
    return tc.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _train_step(params, config, batch: Batch, state: OptimizerState, rng) -> float:
    zero_grads(params)
    pred = forward(batch.ctx, params, config, rng=rng if config.dropout > 0 else None)
    loss = loss_fn(pred, batch.targets, batch.mask, config.discrete)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at optimizer step {state.step + 1}")
    backward(loss)
    grads = {k: p.grad for k, p in params.items()}
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDiverged(f"non-finite gradients in {bad[:5]} at optimizer step {state.step + 1}")
    optimizer_step(params, grads, state)
    return value


def _scheduled_step(params, config, batch, state, rng, tc: TrainConfig, total: int) -> float:
    state.lr = scheduled_lr(tc, state.step, total)
    return _train_step(params, config, batch, state, rng)


def _run(
    params: dict[str, Tensor],
    config: PDiTConfig,
    tasks: list[OfflineDataset],
    tc: TrainConfig,
    on_epoch: Callable[[dict[str, Any]], None] | None,
) -> tuple[list[dict[str, Any]], dict[str, np.ndarray], float | None]:
    for ds in tasks:
        if len(ds) == 0:
            raise ValueError("cannot train on an empty dataset")
        check_compatible(config, ds)
    rng = np.random.default_rng(tc.seed)
    drop_rng = np.random.default_rng([tc.seed, 1])
    state = OptimizerState(lr=tc.lr, clip_norm=tc.clip_norm)
    pairs = [decision_points(ds) for ds in tasks]
    total = int(sum(len(p) for p in pairs))
    steps = tc.steps_per_epoch or max(1, math.ceil(total / tc.batch_size))
    total_steps = steps * tc.epochs
    targets = [
        tc.target_return if tc.target_return is not None else default_target_return(ds, tc.target_multiplier)
        for ds in tasks
    ]
    metrics: list[dict[str, Any]] = []
    best, best_eval = _snapshot(params), None
    start = time.perf_counter()
    for epoch in range(1, tc.epochs + 1):
        losses = []
        if len(tasks) == 1:
            order = rng.permutation(len(pairs[0]))
            if tc.steps_per_epoch is not None:
                order = np.resize(order, steps * tc.batch_size)
            chunks = [(0, order[i * tc.batch_size:(i + 1) * tc.batch_size]) for i in range(steps)]
            for task, idx in chunks:
                if len(idx) == 0:
                    continue
                batch = batch_from_pairs(tasks[task], pairs[task][idx], config)
                losses.append(_scheduled_step(params, config, batch, state, drop_rng, tc, total_steps))
        else:
            for _ in range(steps):
                batch = sample_mixture_batch(tasks, pairs, config, tc.batch_size, rng)
                losses.append(_scheduled_step(params, config, batch, state, drop_rng, tc, total_steps))
        record: dict[str, Any] = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if tc.eval_episodes and (epoch % tc.eval_interval == 0 or epoch == tc.epochs):
            evals = [
                evaluate(params, config, ds.env_config, targets[i], tc.eval_episodes, seed=tc.seed)
                for i, ds in enumerate(tasks)
            ]
            record["eval_mean"] = float(np.mean([e.mean for e in evals]))
            record["eval_std"] = float(np.mean([e.std for e in evals]))
            if len(tasks) > 1:
                record["tasks"] = [e.to_dict() for e in evals]
            if best_eval is None or record["eval_mean"] > best_eval:
                best_eval, best = record["eval_mean"], _snapshot(params)
        else:
            record["eval_mean"] = None
            record["eval_std"] = None
        record["wallclock_s"] = time.perf_counter() - start
        metrics.append(record)
        log.info("epoch %d loss %.4f eval %s", epoch, record["train_loss"], record["eval_mean"])
        if on_epoch is not None:
            on_epoch(record)
    return metrics, best, best_eval


def train(
    params: dict[str, Tensor],
    config: PDiTConfig,
    ds: OfflineDataset,
    tc: TrainConfig,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    """Train ``params`` in place; returns the metric log and the best snapshot."""
    metrics, best, best_eval = _run(params, config, [ds], tc, on_epoch)
    return TrainResult(metrics, params, best, best_eval)


def sample_mixture_batch(tasks, pairs, config, batch_size, rng) -> Batch:
    """Uniform over tasks, then uniform over that task's decision points."""
    which = rng.integers(len(tasks), size=batch_size)
    items, targets = [], []
    for task in which:
        i, t = pairs[task][rng.integers(len(pairs[task]))]
        tr = tasks[task].trajectories[int(i)]
        items.append((tr.observations, tr.words, tr.rtg, tr.actions, int(t)))
        targets.append(tr.actions[int(t)])
    return Batch(build_context(items, config), np.asarray(targets), np.ones(batch_size, dtype=bool))


def train_multitask(
    params: dict[str, Tensor],
    config: PDiTConfig,
    datasets: list[OfflineDataset],
    tc: TrainConfig,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    if not datasets:
        raise ValueError("no datasets given")
    first = datasets[0].trajectories[0]
    for ds in datasets[1:]:
        tr = ds.trajectories[0]
        if tr.modality != first.modality or tr.observations.shape[1:] != first.observations.shape[1:]:
            raise CompatibilityError("multi-task datasets must share modality and observation shape")
        if (tr.actions.dtype.kind in "iu") != (first.actions.dtype.kind in "iu"):
            raise CompatibilityError("multi-task datasets must share the action space")
    metrics, best, best_eval = _run(params, config, list(datasets), tc, on_epoch)
    return TrainResult(metrics, params, best, best_eval)


def metrics_without_wallclock(metrics: list[dict[str, Any]]) -> list[dict[str, Any]]:
    return [{k: v for k, v in m.items() if k != "wallclock_s"} for m in metrics]


def params_as_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data for k, p in params.items()}


def as_dtype(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    dtype = get_default_dtype()
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in arrays.items()}
