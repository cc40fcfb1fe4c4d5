"""Synthetic to-go sequences spliced onto trajectory prefixes.

Three strategies build a 2H-item continuation for a (user, split point)
pair, drawing only from that user's recorded interactions: greedy by
rating, greedy by category novelty, or uniform at random.  The augmented
dataset keeps every original trajectory untouched and appends tagged
synthetic ones.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, Interaction, Trajectory

STRATEGIES = ("rating", "diversity", "random")


class SkipAugmentation(Exception):
    """Raised when a user record cannot supply 2H eligible items."""


@dataclass(frozen=True)
class AugmentSpec:
    strategy: str
    rate: float
    seed: int

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.rate < 0:
            raise ValueError("rate must be >= 0")


def _eligible(user_record, history):
    banned = set(history)
    out = [(item, rating) for item, rating in user_record if item not in banned]
    # a record may list an item once only; keep first occurrence defensively
    seen = set()
    uniq = []
    for item, rating in out:
        if item not in seen:
            seen.add(item)
            uniq.append((item, rating))
    return uniq


def togo_rating(user_record, history, horizon):
    """Highest-rated eligible item at every step; ties go to the smaller id."""
    eligible = _eligible(user_record, history)
    n = 2 * horizon
    if len(eligible) < n:
        raise SkipAugmentation(f"need {n} eligible items, have {len(eligible)}")
    eligible.sort(key=lambda p: (-p[1], p[0]))
    return eligible[:n]


def togo_diversity(user_record, history, catalog, horizon):
    """Least category overlap with the evolving list; reset when saturated.

    Overlap is counted against the category union of the current list.  Once
    that union covers every catalog category the reference set resets to
    empty and selection starts anew, but previously chosen items stay
    ineligible.
    """
    eligible = _eligible(user_record, history)
    n = 2 * horizon
    if len(eligible) < n:
        raise SkipAugmentation(f"need {n} eligible items, have {len(eligible)}")
    all_cats = set(range(catalog.num_categories))
    ref = set()
    for item in history:
        ref |= catalog.item_categories(item)
    chosen = []
    pool = dict(eligible)
    while len(chosen) < n:
        if all_cats <= ref:
            ref = set()
        item = min(pool, key=lambda i: (len(catalog.item_categories(i) & ref), i))
        chosen.append((item, pool.pop(item)))
        ref |= catalog.item_categories(item)
    return chosen


def togo_random(user_record, history, horizon, rng):
    """Uniform draw without replacement from the eligible items."""
    eligible = _eligible(user_record, history)
    n = 2 * horizon
    if len(eligible) < n:
        raise SkipAugmentation(f"need {n} eligible items, have {len(eligible)}")
    idx = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in idx]


def _build_togo(strategy, user_record, history, catalog, horizon, rng):
    if strategy == "rating":
        return togo_rating(user_record, history, horizon)
    if strategy == "diversity":
        return togo_diversity(user_record, history, catalog, horizon)
    return togo_random(user_record, history, horizon, rng)


def augment_dataset(dataset, spec, horizon):
    """Append ceil(rate * |trajectories|) synthetic trajectories.

    Each synthetic trajectory is a uniformly sampled (organic trajectory,
    split point t) whose prefix tau_{1:t-1} is continued with a 2H to-go
    sequence; to-go items carry the user's recorded ratings and fresh
    consecutive timestamps.  Pairs without 2H eligible items are skipped and
    resampled.
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    organics = [t for t in dataset.trajectories if t.origin == "organic"]
    n_target = math.ceil(spec.rate * len(organics))
    if n_target == 0:
        warnings.warn("augmentation rate produced zero synthetic trajectories")
        return dataset

    rng = np.random.default_rng(spec.seed)
    records = {}
    for traj in organics:
        records.setdefault(traj.user, []).extend(
            (s.item, s.rating) for s in traj.steps)

    synthetic = []
    attempts = 0
    max_attempts = 50 * n_target
    while len(synthetic) < n_target and attempts < max_attempts:
        attempts += 1
        traj = organics[int(rng.integers(len(organics)))]
        t = int(rng.integers(1, len(traj.steps) + 1))  # prefix is steps before t
        prefix = traj.steps[:t - 1]
        history = [s.item for s in prefix]
        try:
            togo = _build_togo(spec.strategy, records[traj.user], history,
                               dataset.catalog, horizon, rng)
        except SkipAugmentation:
            continue
        ts = prefix[-1].timestamp + 1 if prefix else 0
        steps = list(prefix)
        for k, (item, rating) in enumerate(togo):
            steps.append(Interaction(traj.user, item, rating, ts + k))
        synthetic.append(Trajectory(traj.user, tuple(steps), origin=spec.strategy))

    if len(synthetic) < n_target:
        warnings.warn(f"only {len(synthetic)} of {n_target} augmentations were feasible")

    return Dataset(dataset.catalog, dataset.trajectories + tuple(synthetic),
                   dataset.r_min, dataset.r_max, dataset.num_users,
                   dataset.user_id_map, dataset.item_id_map)
