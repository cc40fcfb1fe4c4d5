"""Training windows and the optimization loop.

Every trajectory yields one window per split point t: the history is the
first t items (truncated to the most recent max_hist) and the targets are
the next H items.  Each window is conditioned on the objectives its own
targets realized (hindsight relabeling), so conditioned generation trains
as plain supervised sequence modeling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .objectives import FutureWindow, cumulative_rating, diversity, normalize


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainingWindow:
    user: int
    history: tuple
    targets: tuple
    point: object  # ObjectivePoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    grad_clip: float = 1.0
    lr_decay: float = 1.0  # per-epoch multiplicative decay; 1.0 = constant

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


def make_windows(dataset, horizon, max_hist):
    """Deterministic (trajectory order, t) list of training windows."""
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    windows = []
    for traj in dataset.trajectories:
        items = traj.items()
        ratings = traj.ratings()
        for t in range(1, len(items) - horizon + 1):
            targets = tuple(items[t:t + horizon])
            fw = FutureWindow(targets, tuple(ratings[t:t + horizon]))
            point = normalize(cumulative_rating(fw),
                              diversity(fw, dataset.catalog),
                              horizon, dataset.r_max)
            history = tuple(items[:t][-max_hist:])
            windows.append(TrainingWindow(traj.user, history, targets, point))
    return windows


def _clip_grads(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return grads, total


def _batch_loss(model, batch):
    pn = model.param_nodes()
    users = [w.user for w in batch]
    hists = [w.history for w in batch]
    points = [(w.point.o_rate, w.point.o_div) for w in batch]
    targets = np.array([w.targets for w in batch])
    loss = model_mod.nll_loss(model, pn, users, hists, points, targets)
    return loss, pn


def train(model, windows, cfg, checkpoint_dir=None):
    """Mini-batch Adam over shuffled windows; returns (model, loss curve).

    One mean-loss entry per epoch; a checkpoint epoch_{e}.npz is written per
    epoch when checkpoint_dir is given.  Storage order of the input windows
    does not matter: they are sorted canonically before the seeded shuffle.
    """
    if not windows:
        raise ValueError("no training windows")
    windows = sorted(windows, key=lambda w: (w.user, w.targets, w.history))
    rng = np.random.default_rng(cfg.seed)
    state = ad.adam_init(model.params)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for start in range(0, len(windows), cfg.batch_size):
            batch = [windows[i] for i in order[start:start + cfg.batch_size]]
            try:
                loss, pn = _batch_loss(model, batch)
            except ad.DivergenceError as e:
                raise DivergenceError(
                    f"divergence at epoch {epoch}, batch {start // cfg.batch_size}: {e}")
            if not np.isfinite(loss.value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            ad.backward(loss)
            grads = {k: (pn[k].grad if pn[k].grad is not None else np.zeros_like(v))
                     for k, v in model.params.items()}
            grads, _ = _clip_grads(grads, cfg.grad_clip)
            model.params, state = ad.adam_step(model.params, grads, state, lr)
            total += float(loss.value) * len(batch)
            count += len(batch)
        curve.append(total / count)
        if checkpoint_dir:
            model.save(os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.npz"))
    return model, curve


def write_loss_curve(curve, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(curve, start=1):
            f.write(f"{epoch},{loss!r}\n")
