"""Objective-conditioned autoregressive generation and sequence scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .objectives import FutureWindow, cumulative_rating, diversity


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class GenRequest:
    user: int
    history: tuple
    point: object  # ObjectivePoint
    horizon: int
    mode: str = "greedy"  # "greedy" or "sample"
    temperature: float = 1.0
    seed: int = 0
    forbid_repeats: bool = True
    exclude_history: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.mode == "sample" and self.temperature <= 0:
            raise ValueError("sampling temperature must be > 0")
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class GenResult:
    items: tuple
    stepwise_logprobs: tuple
    realized: tuple = ()  # (raw rating, raw diversity) when scored


def generate_batch(model, users, histories, point, horizon, mode="greedy",
                   temperature=1.0, seed=0, forbid_repeats=True,
                   exclude_history=False):
    """Generate H items for every user at once; returns (items, logprobs).

    The control vector and initial state are computed once; each step
    re-decodes the last position of the growing token stream, masks banned
    items, and picks greedily (argmax; numpy breaks ties toward the smaller
    id) or samples at the given temperature.
    """
    cfg = model.cfg
    b = len(users)
    if forbid_repeats:
        need = horizon + (max(map(len, histories)) if exclude_history and b else 0)
        if cfg.vocab < need:
            raise InfeasibleError(f"vocab {cfg.vocab} cannot supply {need} distinct items")
    rng = np.random.default_rng(seed)
    pn = model.param_nodes()
    hist = model_mod.encode_history(model, pn, histories)
    points = [(point.o_rate, point.o_div)] * b
    ctrl = model_mod.control_signal(
        model, pn, model_mod.step_transform(model, pn, users, points, hist))
    state = model_mod.init_state(model, pn, hist)

    banned = np.zeros((b, cfg.vocab), dtype=bool)
    if exclude_history:
        for i, h in enumerate(histories):
            banned[i, list(h)] = True
    chosen = np.zeros((b, 0), dtype=np.int64)
    logprobs = np.zeros((b, horizon))
    for k in range(horizon):
        logits = model_mod.sequence_logits(model, pn, ctrl, state, chosen)
        step = logits.value[:, -1, :].copy()
        if forbid_repeats:
            step[banned] = -np.inf
        shifted = step - step.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        if mode == "greedy":
            pick = np.argmax(step, axis=-1)
        else:
            scaled = step / temperature
            scaled -= scaled.max(axis=-1, keepdims=True)
            probs = np.exp(scaled)
            probs /= probs.sum(axis=-1, keepdims=True)
            pick = np.array([rng.choice(cfg.vocab, p=probs[i]) for i in range(b)])
        logprobs[:, k] = shifted[np.arange(b), pick] - logz
        if forbid_repeats:
            banned[np.arange(b), pick] = True
        chosen = np.concatenate([chosen, pick[:, None]], axis=1)
    return chosen, logprobs


def generate(model, req, oracle=None, catalog=None):
    """Single-request wrapper; scores the result when an oracle is supplied."""
    items, logprobs = generate_batch(
        model, [req.user], [list(req.history)], req.point, req.horizon,
        mode=req.mode, temperature=req.temperature, seed=req.seed,
        forbid_repeats=req.forbid_repeats, exclude_history=req.exclude_history)
    realized = ()
    if oracle is not None and catalog is not None:
        realized = score_sequence(oracle, catalog, req.user, items[0].tolist())
    return GenResult(tuple(int(i) for i in items[0]),
                     tuple(float(x) for x in logprobs[0]), realized)


def score_sequence(oracle, catalog, user, items):
    """(raw cumulative rating, raw diversity) of an item list for a user."""
    if not len(items):
        raise ValueError("cannot score an empty sequence")
    ratings = tuple(oracle.rate(user, i) for i in items)
    if len(items) >= 2:
        fw = FutureWindow(tuple(int(i) for i in items), ratings)
        return cumulative_rating(fw), diversity(fw, catalog)
    return float(ratings[0]), 0.0
