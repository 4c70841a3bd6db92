"""Gradient-based meta-learning over NSSM losses.

Supported algorithms:

``maml``
    inner loop on the context set, outer gradient differentiated through
    the inner loop (second order).
``fomaml``
    the outer gradient is the target-loss gradient at the adapted weights.
``anil``
    MAML whose inner loop touches only the layers in ``inner_mask``; set
    ``first_order`` for the first-order variant.
``reptile``
    move the initial weights towards the context-adapted weights.

A loss function has the signature ``loss_fn(weights, batch) -> scalar`` and
is evaluated with weights that may be tape tensors.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .layers import WeightSet, parse_mask

log = logging.getLogger(__name__)

ALGORITHMS = ("maml", "fomaml", "anil", "reptile")


class MetaLearningError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    """Hyperparameters of meta-training and meta-inference.

    ``inner_mask`` is a comma-separated list of layer paths or glob patterns
    (``None`` means every layer). ``inference_steps`` is the number of inner
    steps used at meta-inference, defaulting to ``M``.
    """

    algorithm: str = "maml"
    beta_in: float = 0.01
    beta_out: float = 0.001
    M: int = 5
    B: int = 4
    inner_mask: str | None = None
    epochs: int = 10
    val_fraction: float = 0.2
    seed: int = 0
    first_order: bool = False
    optimizer: str = "sgd"
    clip_norm: float | None = 10.0
    inference_steps: int | None = None
    context_size: float = 0.2
    target_size: float = 0.2

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not (self.beta_in > 0 and self.beta_out > 0):
            raise ValueError("learning rates must be positive")
        if self.M < 0 or (self.inference_steps is not None and self.inference_steps < 0):
            raise ValueError("inner step counts must be >= 0")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.algorithm in ("maml", "fomaml") and self.inner_mask is not None:
            raise ValueError(f"{self.algorithm} adapts every layer; use algorithm='anil' for a mask")
        if self.algorithm == "anil" and self.inner_mask is None:
            raise ValueError("anil needs an inner_mask selecting a proper subset of layers")

    def mask_paths(self, paths: Sequence[str]) -> list[str]:
        """Resolve ``inner_mask`` against the model's layer paths."""
        chosen = parse_mask(self.inner_mask, paths)
        if self.algorithm == "anil" and len(chosen) == len(paths):
            raise ValueError("anil inner_mask selects every layer; that is maml")
        return chosen

    @property
    def online_steps(self):
        return self.M if self.inference_steps is None else self.inference_steps

    @property
    def second_order(self):
        return self.algorithm == "maml" or (self.algorithm == "anil" and not self.first_order)

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------------
# task partitioning


@dataclass(frozen=True)
class TaskSplit:
    """Context and target sample ranges ``[start, stop)`` of one trajectory.

    ``context_batch`` and ``target_batch`` hold the loss batches once built.
    """

    context: tuple
    target: tuple
    system_id: str = ""
    context_batch: dict | None = field(default=None, compare=False, repr=False)
    target_batch: dict | None = field(default=None, compare=False, repr=False)

    def with_batches(self, windows: Callable, traj) -> "TaskSplit":
        """Build batches with ``windows(traj, start, stop)``."""
        return replace(self, context_batch=windows(traj, *self.context), target_batch=windows(traj, *self.target))


def _size(size, T):
    return int(round(size * T)) if isinstance(size, float) and size <= 1.0 else int(size)


def partition(traj, mode: str, H: int, H_p: int, context_size, seed: int | None = None,
              target_size=None, system_id: str = "") -> TaskSplit:
    """Split one trajectory into context and target blocks.

    Parameters
    ----------
    traj : Trajectory or int
        The trajectory (or just its length).
    mode : {"train", "inference"}
        ``train`` places the two blocks independently at random;
        ``inference`` uses the prefix as context and the rest as target.
    H, H_p : int
        History and horizon length; each block must hold at least one
        window of ``H + H_p`` samples.
    context_size, target_size : int or float
        Block lengths in samples, or fractions of the trajectory when a
        float in (0, 1]. ``target_size`` defaults to ``context_size`` and is
        ignored in inference mode.
    """
    T = traj if isinstance(traj, (int, np.integer)) else len(traj)
    need = H + H_p
    c = _size(context_size, T)
    if mode == "inference":
        if c < need or T - c < need:
            raise ValueError(f"trajectory of {T} samples too short for a {c}-sample context and "
                             f"windows of {need}")
        return TaskSplit((0, c), (c, T), system_id)
    if mode != "train":
        raise ValueError(f"unknown partition mode {mode!r}")
    t = c if target_size is None else _size(target_size, T)
    if min(c, t) < need or max(c, t) > T:
        raise ValueError(f"trajectory of {T} samples cannot hold blocks of {c} and {t} samples "
                         f"with windows of {need}")
    rng = np.random.default_rng(seed)
    cs = int(rng.integers(0, T - c + 1))
    ts = int(rng.integers(0, T - t + 1))
    return TaskSplit((cs, cs + c), (ts, ts + t), system_id)


# ----------------------------------------------------------------------------
# inner loop


def _check_finite(value, what, system_id=""):
    if not np.all(np.isfinite(ad.value_of(value))):
        tag = f" (task {system_id})" if system_id else ""
        raise MetaLearningError(f"non-finite {what}{tag}")


def inner_adapt(ws: WeightSet, context: dict, cfg: MetaConfig, loss_fn: Callable,
                mask: Sequence[str] | None = None, create_graph: bool = False,
                steps: int | None = None, system_id: str = "") -> WeightSet:
    """Run ``steps`` (default ``cfg.M``) gradient steps on the context loss.

    Only layers in ``mask`` move (``None``: all layers). With
    ``create_graph`` the weights must already be tensors on a tape and the
    result stays differentiable with respect to them.
    """
    if context is None or _batch_len(context) == 0:
        raise ValueError("empty context set")
    steps = cfg.M if steps is None else steps
    if steps < 0:
        raise ValueError("M must be >= 0")
    paths = ws.paths if mask is None else [p for p in ws.paths if p in set(mask)]
    if not paths:
        return ws
    cur = ws
    for m in range(steps):
        if create_graph:
            wrt = cur.tensors() if mask is None else cur.tensors(paths)
            loss = loss_fn(cur, context)
            if not isinstance(loss, ad.Tensor):
                raise MetaLearningError("create_graph needs weights recorded on a tape")
            grads = loss.tape.grad(loss, wrt, create_graph=True)
            new = [w - cfg.beta_in * g for w, g in zip(wrt, grads)]
        else:
            tape = ad.Tape()
            wv = cur.variables(tape, paths)
            loss = loss_fn(wv, context)
            grads = tape.grad(loss, wv.tensors(paths))
            new = [ad.value_of(w) - cfg.beta_in * g for w, g in zip(cur.tensors(paths), grads)]
        if not math.isfinite(float(ad.value_of(loss))):
            raise MetaLearningError(f"non-finite context loss at inner step {m}"
                                    + (f" (task {system_id})" if system_id else ""))
        for g in grads:
            _check_finite(g, f"inner gradient at step {m}", system_id)
        cur = cur.with_tensors(paths, new)
    return cur


def _batch_len(batch):
    if not batch:
        return 0
    first = np.asarray(next(iter(batch.values())))
    return len(first) if first.ndim else 1


# ----------------------------------------------------------------------------
# outer loop


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, flat, grad):
        return flat - self.lr * grad


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, flat, grad):
        if self.m is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return flat - self.lr * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(name, lr):
    return Adam(lr) if name == "adam" else Sgd(lr)


def clip_by_norm(g, max_norm):
    if max_norm is None:
        return g, float(np.linalg.norm(g))
    n = float(np.linalg.norm(g))
    return (g * (max_norm / n) if n > max_norm else g), n


def _flat_grads(grads):
    return np.concatenate([np.ravel(g) for g in grads])


def task_gradient(ws: WeightSet, task: TaskSplit, cfg: MetaConfig, loss_fn: Callable,
                  mask: Sequence[str] | None = None):
    """Outer gradient contribution ``(flat grad, target loss)`` of one task."""
    mask = None if cfg.algorithm != "anil" else mask
    if cfg.second_order:
        tape = ad.Tape()
        wv = ws.variables(tape)
        adapted = inner_adapt(wv, task.context_batch, cfg, loss_fn, mask, create_graph=True,
                              system_id=task.system_id)
        loss = loss_fn(adapted, task.target_batch)
        grads = tape.grad(loss, wv.tensors())
    else:
        adapted = inner_adapt(ws, task.context_batch, cfg, loss_fn, mask, system_id=task.system_id)
        tape = ad.Tape()
        av = adapted.variables(tape)
        loss = loss_fn(av, task.target_batch)
        grads = tape.grad(loss, av.tensors())
    g = _flat_grads(grads)
    if not np.all(np.isfinite(g)):
        raise MetaLearningError(f"non-finite outer gradient for task {task.system_id or '?'}")
    return g, float(ad.value_of(loss))


def meta_gradient(ws: WeightSet, tasks: Sequence[TaskSplit], cfg: MetaConfig, loss_fn: Callable,
                  mask: Sequence[str] | None = None):
    """Sum of task gradients in task order and the mean target loss."""
    if not tasks:
        raise ValueError("outer step needs at least one task")
    total, losses = None, []
    for task in tasks:
        g, L = task_gradient(ws, task, cfg, loss_fn, mask)
        total = g if total is None else total + g
        losses.append(L)
    return total, float(np.mean(losses))


def outer_step(ws: WeightSet, tasks: Sequence[TaskSplit], cfg: MetaConfig, loss_fn: Callable,
               optimizer=None, mask: Sequence[str] | None = None):
    """One meta-update over a batch of tasks; returns ``(new weights, info)``.

    ``info`` holds the mean target loss (or context loss for reptile) and
    the outer gradient norm before clipping.
    """
    if not tasks:
        raise ValueError("outer step needs at least one task")
    if mask is None and cfg.algorithm == "anil":
        mask = cfg.mask_paths(ws.paths)
    flat = ws.flat()
    if cfg.algorithm == "reptile":
        shift = np.zeros_like(flat)
        losses = []
        for task in tasks:
            adapted = inner_adapt(ws, task.context_batch, cfg, loss_fn, system_id=task.system_id)
            shift += adapted.flat() - flat
            losses.append(float(ad.value_of(loss_fn(adapted, task.context_batch))))
        if not np.all(np.isfinite(shift)):
            raise MetaLearningError("non-finite reptile update")
        new = flat + cfg.beta_out * shift / len(tasks)
        return ws.from_flat(new), {"loss": float(np.mean(losses)), "grad_norm": float(np.linalg.norm(shift))}
    g, loss = meta_gradient(ws, tasks, cfg, loss_fn, mask)
    g, norm = clip_by_norm(g, cfg.clip_norm)
    optimizer = optimizer or Sgd(cfg.beta_out)
    return ws.from_flat(optimizer.step(flat, g)), {"loss": loss, "grad_norm": norm}


# ----------------------------------------------------------------------------
# training driver


@dataclass
class SourceSystem:
    """One source trajectory plus the window builder for its loss batches."""

    traj: object
    windows: Callable
    system_id: str = ""


@dataclass
class TrainResult:
    weights: WeightSet
    log: list
    best_epoch: int
    initial_val_loss: float
    best_val_loss: float


def split_systems(n: int, val_fraction: float, seed: int):
    """Shuffle ``range(n)`` and hold out ``round(val_fraction n)`` (at least one if positive)."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0 and n_val == 0 and n > 1:
        n_val = 1
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def validation_loss(ws, systems, cfg, loss_fn, H, H_p, mask=None):
    """Mean target loss after context adaptation on inference-mode splits."""
    losses = []
    for s in systems:
        sp = partition(s.traj, "inference", H, H_p, cfg.context_size, system_id=s.system_id).with_batches(
            s.windows, s.traj)
        adapted = inner_adapt(ws, sp.context_batch, cfg, loss_fn, mask if cfg.algorithm == "anil" else None,
                              steps=cfg.online_steps, system_id=s.system_id)
        losses.append(float(ad.value_of(loss_fn(adapted, sp.target_batch))))
    return float(np.mean(losses))


def meta_train(ws0: WeightSet, sources: Sequence[SourceSystem], cfg: MetaConfig, loss_fn: Callable,
               H: int, H_p: int, log_path: str | Path | None = None,
               checkpoint_path: str | Path | None = None, validation: Sequence[SourceSystem] | None = None,
               on_checkpoint: Callable | None = None) -> TrainResult:
    """Meta-train from ``ws0`` over the source systems.

    Sources are split 80/20 (``cfg.val_fraction``) into training and
    validation systems unless ``validation`` is given. One epoch visits
    every training system once, ``cfg.B`` systems per outer step, with a
    fresh random context/target placement per visit. The returned weights
    are those with the lowest validation loss seen (the initial weights
    count as epoch 0).
    """
    if len(sources) < 1:
        raise ValueError("meta_train needs source systems")
    if validation is None:
        tr_idx, val_idx = split_systems(len(sources), cfg.val_fraction, cfg.seed)
        train = [sources[i] for i in tr_idx]
        validation = [sources[i] for i in val_idx] or train
    else:
        train = list(sources)
    if len(train) < cfg.B and cfg.epochs > 0:
        raise ValueError(f"{len(train)} training systems for tasks-per-batch B={cfg.B}")
    mask = cfg.mask_paths(ws0.paths) if cfg.algorithm == "anil" else None
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.beta_out)
    t0 = time.perf_counter()
    best = ws0
    best_val = init_val = validation_loss(ws0, validation, cfg, loss_fn, H, H_p, mask)
    best_epoch = 0
    rows = [{"epoch": 0, "train_loss": float("nan"), "val_loss": init_val,
             "wall_time": time.perf_counter() - t0, "checkpoint": 1}]
    if checkpoint_path is not None:
        ws0.save(checkpoint_path)
    if on_checkpoint:
        on_checkpoint(0, ws0)
    ws = ws0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for k in range(0, len(order) - cfg.B + 1, cfg.B):
            tasks = []
            for i in order[k:k + cfg.B]:
                s = train[i]
                sp = partition(s.traj, "train", H, H_p, cfg.context_size, int(rng.integers(2 ** 31)),
                               cfg.target_size, s.system_id)
                tasks.append(sp.with_batches(s.windows, s.traj))
            ws, info = outer_step(ws, tasks, cfg, loss_fn, opt, mask)
            losses.append(info["loss"])
        val = validation_loss(ws, validation, cfg, loss_fn, H, H_p, mask)
        improved = val < best_val
        if improved:
            best, best_val, best_epoch = ws, val, epoch
            if checkpoint_path is not None:
                ws.save(checkpoint_path)
            if on_checkpoint:
                on_checkpoint(epoch, ws)
        rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                     "val_loss": val, "wall_time": time.perf_counter() - t0, "checkpoint": int(improved)})
        log.debug("epoch %d train %.4g val %.4g", epoch, rows[-1]["train_loss"], val)
    if log_path is not None:
        write_log(log_path, rows)
    return TrainResult(best, rows, best_epoch, init_val, best_val)


def write_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "wall_time", "checkpoint"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


def meta_infer(ws: WeightSet, context: dict, cfg: MetaConfig, loss_fn: Callable,
               mask: Sequence[str] | None = None) -> WeightSet:
    """Adapt trained weights to a target context (no outer step).

    Runs ``cfg.online_steps`` first-order inner steps over the layers in
    ``mask`` (for anil, the configured inner mask; otherwise all layers).
    """
    if mask is None and cfg.algorithm == "anil":
        mask = cfg.mask_paths(ws.paths)
    return inner_adapt(ws, context, cfg, loss_fn, mask, steps=cfg.online_steps)


# ----------------------------------------------------------------------------
# supervised baselines


def fit_supervised(ws: WeightSet, batches: Sequence[dict], loss_fn: Callable, epochs: int, lr: float,
                   optimizer: str = "adam", mask: Sequence[str] | None = None,
                   clip_norm: float | None = 10.0, val_batches: Sequence[dict] | None = None):
    """Plain gradient training on a list of loss batches.

    One epoch takes one optimizer step per batch. With ``val_batches`` the
    weights of the best validation epoch are returned.
    """
    paths = ws.paths if mask is None else list(mask)
    opt = make_optimizer(optimizer, lr)
    best, best_val = ws, None
    if val_batches:
        best_val = _mean_loss(ws, val_batches, loss_fn)
    for _ in range(epochs):
        for b in batches:
            tape = ad.Tape()
            wv = ws.variables(tape, paths)
            loss = loss_fn(wv, b)
            g = _flat_grads(tape.grad(loss, wv.tensors(paths)))
            if not np.all(np.isfinite(g)):
                raise MetaLearningError("non-finite gradient in supervised training")
            g, _ = clip_by_norm(g, clip_norm)
            sub = WeightSet((p, ws[p]) for p in paths)
            ws = ws.replace(dict(sub.from_flat(opt.step(sub.flat(), g)).items()))
        if val_batches:
            v = _mean_loss(ws, val_batches, loss_fn)
            if v < best_val:
                best, best_val = ws, v
    return best if val_batches else ws


def _mean_loss(ws, batches, loss_fn):
    return float(np.mean([float(ad.value_of(loss_fn(ws, b))) for b in batches]))
