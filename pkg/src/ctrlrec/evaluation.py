"""Controllability evaluation: sweep objective points across users and
checkpoints, aggregate realized metrics, and summarize rank consistency."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import model as model_mod
from . import train as train_mod
from .generate import generate_batch, score_sequence
from .objectives import ObjectivePoint, grid_points


@dataclass(frozen=True)
class EvalConfig:
    points: tuple = tuple(grid_points())
    checkpoints: tuple = ()
    horizon: int = 10
    max_hist: int = 50
    history_frac: float = 0.8  # temporal cut: history = first 80% of each trajectory
    users: tuple = ()  # empty = all users

    def __post_init__(self):
        if not self.points or self.horizon < 2:
            raise ValueError("need points and horizon >= 2")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    # row keys: epoch, o_rate, o_div, mean_rating, std_rating,
    #           mean_diversity, std_diversity

    def epochs(self):
        return sorted({r["epoch"] for r in self.rows})

    def row(self, epoch, point):
        for r in self.rows:
            if r["epoch"] == epoch and r["o_rate"] == point.o_rate \
                    and r["o_div"] == point.o_div:
                return r
        raise KeyError((epoch, point))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "o_rate", "o_div", "mean_rating", "std_rating",
                        "mean_diversity", "std_diversity"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["o_rate"]), repr(r["o_div"]),
                            repr(r["mean_rating"]), repr(r["std_rating"]),
                            repr(r["mean_diversity"]), repr(r["std_diversity"])])

    @classmethod
    def read_csv(cls, path):
        report = cls()
        with open(path, newline="", encoding="utf-8") as f:
            for r in csv.DictReader(f):
                report.rows.append({
                    "epoch": int(r["epoch"]),
                    "o_rate": float(r["o_rate"]), "o_div": float(r["o_div"]),
                    "mean_rating": float(r["mean_rating"]),
                    "std_rating": float(r["std_rating"]),
                    "mean_diversity": float(r["mean_diversity"]),
                    "std_diversity": float(r["std_diversity"])})
        return report


def eval_histories(dataset, max_hist, frac=0.8):
    """Held-out history per user: last max_hist items before the temporal cut."""
    users, histories = [], []
    per_user = {}
    for traj in dataset.trajectories:
        if traj.origin == "organic":
            per_user.setdefault(traj.user, []).extend(traj.steps)
    for user in sorted(per_user):
        steps = sorted(per_user[user], key=lambda s: s.timestamp)
        cut = int(math.floor(frac * len(steps)))
        users.append(user)
        histories.append([s.item for s in steps[:cut]][-max_hist:])
    return users, histories


def evaluate_model(model, dataset, oracle, points, horizon, max_hist,
                   history_frac=0.8, users=()):
    """Greedy-generate for every (user, point); returns per-point score arrays."""
    all_users, all_hists = eval_histories(dataset, max_hist, history_frac)
    if users:
        keep = set(users)
        pairs = [(u, h) for u, h in zip(all_users, all_hists) if u in keep]
        all_users, all_hists = [p[0] for p in pairs], [p[1] for p in pairs]
    out = {}
    for point in points:
        items, _ = generate_batch(model, all_users, all_hists, point, horizon)
        ratings = np.empty(len(all_users))
        divs = np.empty(len(all_users))
        for i, u in enumerate(all_users):
            ratings[i], divs[i] = score_sequence(
                oracle, dataset.catalog, u, items[i].tolist())
        out[(point.o_rate, point.o_div)] = (ratings, divs)
    return out


def evaluate(checkpoint_dir, dataset, oracle, cfg):
    """Evaluate every configured checkpoint; returns an EvalReport."""
    report = EvalReport()
    for epoch in cfg.checkpoints:
        path = os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.npz")
        if not os.path.exists(path):
            raise IOError(f"missing checkpoint for epoch {epoch}: {path}")
        model = model_mod.Model.load(path)
        scores = evaluate_model(model, dataset, oracle, cfg.points, cfg.horizon,
                                cfg.max_hist, cfg.history_frac, cfg.users)
        for point in cfg.points:
            ratings, divs = scores[(point.o_rate, point.o_div)]
            report.rows.append({
                "epoch": epoch, "o_rate": point.o_rate, "o_div": point.o_div,
                "mean_rating": float(ratings.mean()),
                "std_rating": float(ratings.std()),
                "mean_diversity": float(divs.mean()),
                "std_diversity": float(divs.std())})
    return report


def _spearman(x, y):
    if np.allclose(y, y[0]) or np.allclose(x, x[0]):
        return 0.0, True
    rho = sps.spearmanr(x, y).statistic
    if not np.isfinite(rho):
        return 0.0, True
    return float(rho), False


def controllability_stats(report):
    """Rank-consistency summary of an evaluation report.

    spearman_rate / spearman_div: per-checkpoint Spearman correlation
    between the conditioned objective component and the realized mean
    metric, averaged over checkpoints.  order_stability: fraction of point
    pairs whose realized-metric ordering never changes across checkpoints,
    averaged over the two metrics.
    """
    epochs = report.epochs()
    if len(epochs) < 2:
        raise ValueError("need >= 2 checkpoints")
    points = sorted({(r["o_rate"], r["o_div"]) for r in report.rows})
    if len(points) < 3:
        raise ValueError("need >= 3 points")

    rate_rhos, div_rhos = [], []
    degenerate = False
    for epoch in epochs:
        rows = {(r["o_rate"], r["o_div"]): r
                for r in report.rows if r["epoch"] == epoch}
        o_rate = np.array([p[0] for p in points])
        o_div = np.array([p[1] for p in points])
        m_rate = np.array([rows[p]["mean_rating"] for p in points])
        m_div = np.array([rows[p]["mean_diversity"] for p in points])
        rho_r, d1 = _spearman(o_rate, m_rate)
        rho_d, d2 = _spearman(o_div, m_div)
        degenerate = degenerate or d1 or d2
        rate_rhos.append(rho_r)
        div_rhos.append(rho_d)

    stabilities = []
    for metric in ("mean_rating", "mean_diversity"):
        stable = 0
        total = 0
        for i in range(len(points)):
            for j in range(i + 1, len(points)):
                signs = set()
                for epoch in epochs:
                    rows = {(r["o_rate"], r["o_div"]): r
                            for r in report.rows if r["epoch"] == epoch}
                    diff = rows[points[i]][metric] - rows[points[j]][metric]
                    signs.add(0 if diff == 0 else (1 if diff > 0 else -1))
                total += 1
                stable += 1 if len(signs) == 1 else 0
        stabilities.append(stable / total)

    return {"spearman_rate": float(np.mean(rate_rhos)),
            "spearman_div": float(np.mean(div_rhos)),
            "order_stability": float(np.mean(stabilities)),
            "degenerate": degenerate}


def ablation_sweep(dataset, oracle, axis, values, base):
    """Train one model per axis value and evaluate at the (1.0, 1.0) corner.

    axis is "layers" or "horizon"; base is a dict of shared ModelConfig /
    TrainConfig keyword arguments.  Emits rows with Rating, Rating/H, and
    Diversity columns; values are recorded, not judged.
    """
    if axis not in ("layers", "horizon"):
        raise ValueError(f"unknown ablation axis {axis!r}")
    rows = []
    corner = ObjectivePoint(1.0, 1.0)
    for value in values:
        mc = dict(base.get("model", {}))
        tc = dict(base.get("train", {}))
        mc[axis if axis == "layers" else "horizon"] = value
        cfg = model_mod.ModelConfig(num_users=dataset.num_users,
                                    vocab=dataset.catalog.num_items, **mc)
        m = model_mod.Model(cfg)
        windows = train_mod.make_windows(dataset, cfg.horizon, cfg.max_hist)
        m, _ = train_mod.train(m, windows, train_mod.TrainConfig(**tc))
        scores = evaluate_model(m, dataset, oracle, [corner],
                                cfg.horizon, cfg.max_hist)
        ratings, divs = scores[(1.0, 1.0)]
        rows.append({axis: value,
                     "rating": float(ratings.mean()),
                     "rating_per_h": float(ratings.mean()) / cfg.horizon,
                     "diversity": float(divs.mean())})
    return rows


def write_ablation_csv(rows, axis, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([axis, "rating", "rating_per_h", "diversity"])
        for r in rows:
            w.writerow([r[axis], repr(r["rating"]), repr(r["rating_per_h"]),
                        repr(r["diversity"])])
