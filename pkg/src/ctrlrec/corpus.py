"""Data model, CSV ingestion, synthetic corpora, and the rating oracle.

A Dataset is a catalog of items (each with a non-empty category set) plus
per-user chronological interaction trajectories on a declared rating scale.
The RatingOracle is a dense, fully-observed user x item rating matrix used
only at evaluation time; it comes either from the synthetic ground truth or
from matrix-factorization completion of observed interactions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Catalog:
    num_items: int
    num_categories: int
    categories: tuple  # per-item tuple of sorted category id tuples

    def __post_init__(self):
        if len(self.categories) != self.num_items:
            raise ValidationError("catalog: one category set required per item")
        for item, cats in enumerate(self.categories):
            if not cats:
                raise ValidationError(f"item {item} has no category")
            if any(c < 0 or c >= self.num_categories for c in cats):
                raise ValidationError(f"item {item} references unknown category")

    def item_categories(self, item):
        return frozenset(self.categories[item])


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    rating: float
    timestamp: int


@dataclass(frozen=True)
class Trajectory:
    user: int
    steps: tuple  # tuple of Interaction
    origin: str = "organic"

    def __post_init__(self):
        for a, b in zip(self.steps, self.steps[1:]):
            if b.timestamp <= a.timestamp:
                raise ValidationError(
                    f"user {self.user}: timestamps must be strictly increasing")
        if any(s.user != self.user for s in self.steps):
            raise ValidationError(f"trajectory user {self.user}: mixed user ids")

    def items(self):
        return [s.item for s in self.steps]

    def ratings(self):
        return [s.rating for s in self.steps]


@dataclass(frozen=True)
class Dataset:
    catalog: Catalog
    trajectories: tuple
    r_min: float
    r_max: float
    num_users: int
    user_id_map: dict = field(default_factory=dict)  # external -> internal
    item_id_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ValidationError("rating scale requires r_min < r_max")
        for traj in self.trajectories:
            for s in traj.steps:
                if s.item < 0 or s.item >= self.catalog.num_items:
                    raise ValidationError(f"item {s.item} missing from catalog")
                if not self.r_min <= s.rating <= self.r_max:
                    raise ValidationError(
                        f"rating {s.rating} outside scale [{self.r_min}, {self.r_max}]")

    def trajectories_of(self, user):
        return [t for t in self.trajectories if t.user == user]


@dataclass(frozen=True)
class RatingOracle:
    ratings: np.ndarray  # (num_users, num_items), clipped to scale
    r_min: float
    r_max: float

    def __post_init__(self):
        if self.ratings.ndim != 2:
            raise ValidationError("oracle matrix must be 2-D")
        if np.any(self.ratings < self.r_min) or np.any(self.ratings > self.r_max):
            raise ValidationError("oracle entries outside rating scale")

    def rate(self, user, item):
        return float(self.ratings[user, item])


# ---------------------------------------------------------------------------
# ingestion


def ingest_csv(interactions_path, categories_path, scale):
    """Load `user,item,rating,timestamp` + `item,cat1|cat2|...` CSV files.

    Users and items are densely re-indexed from 0 in order of first
    appearance; the external->internal maps are retained on the Dataset.
    """
    r_min, r_max = scale
    raw_cats = {}
    with open(categories_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["item", "categories"]:
            raise ParseError(f"{categories_path}: expected header 'item,categories'")
        for lineno, row in enumerate(reader, start=2):
            try:
                item = row[0]
                cats = tuple(sorted({int(c) for c in row[1].split("|")}))
            except (IndexError, ValueError):
                raise ParseError(f"{categories_path}: malformed row at line {lineno}")
            if not cats:
                raise ValidationError(f"{categories_path}: item {item} has no category "
                                      f"(line {lineno})")
            raw_cats[item] = cats

    rows = []
    with open(interactions_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["user", "item", "rating", "timestamp"]:
            raise ParseError(
                f"{interactions_path}: expected header 'user,item,rating,timestamp'")
        for lineno, row in enumerate(reader, start=2):
            try:
                user, item, rating, ts = row[0], row[1], float(row[2]), int(row[3])
            except (IndexError, ValueError):
                raise ParseError(f"{interactions_path}: malformed row at line {lineno}")
            if not r_min <= rating <= r_max:
                raise ValidationError(
                    f"{interactions_path}: rating {rating} outside scale "
                    f"[{r_min}, {r_max}] at line {lineno - 1}")
            if item not in raw_cats:
                raise ValidationError(
                    f"{interactions_path}: item {item} has no category (line {lineno})")
            rows.append((user, item, rating, ts))

    def id_key(s):
        return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)

    # deterministic dense re-index: sorted external ids (numeric-aware), so a
    # dataset emitted with internal ids re-ingests to the identity mapping
    users = sorted({u for u, _, _, _ in rows}, key=id_key)
    items = sorted(set(raw_cats) | {i for _, i, _, _ in rows}, key=id_key)
    user_map = {u: k for k, u in enumerate(users)}
    item_map = {i: k for k, i in enumerate(items)}

    num_cats = max(c for cats in raw_cats.values() for c in cats) + 1
    categories = [None] * len(item_map)
    for ext, internal in item_map.items():
        categories[internal] = raw_cats[ext]
    catalog = Catalog(len(item_map), num_cats, tuple(categories))

    per_user = {u: [] for u in user_map.values()}
    for user, item, rating, ts in rows:
        per_user[user_map[user]].append(
            Interaction(user_map[user], item_map[item], rating, ts))
    trajectories = []
    for u in sorted(per_user):
        steps = sorted(per_user[u], key=lambda s: s.timestamp)
        trajectories.append(Trajectory(u, tuple(steps)))

    return Dataset(catalog, tuple(trajectories), float(r_min), float(r_max),
                   len(user_map), dict(user_map), dict(item_map))


def emit_csv(dataset, interactions_path, categories_path):
    """Inverse of ingest_csv (up to the identity re-index)."""
    with open(interactions_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user", "item", "rating", "timestamp"])
        for traj in dataset.trajectories:
            for s in traj.steps:
                w.writerow([s.user, s.item, repr(s.rating), s.timestamp])
    with open(categories_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["item", "categories"])
        for item in range(dataset.catalog.num_items):
            w.writerow([item, "|".join(map(str, dataset.catalog.categories[item]))])


def read_catalog_csv(path):
    """Standalone catalog loader for files already using dense item ids."""
    cats = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["item", "categories"]:
            raise ParseError(f"{path}: expected header 'item,categories'")
        for lineno, row in enumerate(reader, start=2):
            try:
                cats[int(row[0])] = tuple(sorted({int(c) for c in row[1].split("|")}))
            except (IndexError, ValueError):
                raise ParseError(f"{path}: malformed row at line {lineno}")
    num_items = max(cats) + 1
    if set(cats) != set(range(num_items)):
        raise ValidationError(f"{path}: item ids must be dense from 0")
    num_cats = max(c for v in cats.values() for c in v) + 1
    return Catalog(num_items, num_cats, tuple(cats[i] for i in range(num_items)))


def write_trajectories(dataset, path):
    """Trajectory-level CSV (`traj,origin,user,item,rating,timestamp`).

    Unlike the plain interactions CSV this format keeps multiple
    trajectories per user apart, so augmented datasets round-trip.
    """
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj", "origin", "user", "item", "rating", "timestamp"])
        for tid, traj in enumerate(dataset.trajectories):
            for s in traj.steps:
                w.writerow([tid, traj.origin, s.user, s.item, repr(s.rating),
                            s.timestamp])


def read_trajectories(path, catalog, scale, num_users):
    r_min, r_max = scale
    groups = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["traj", "origin", "user", "item", "rating", "timestamp"]:
            raise ParseError(f"{path}: unexpected trajectory header")
        for lineno, row in enumerate(reader, start=2):
            try:
                tid, origin = int(row[0]), row[1]
                step = Interaction(int(row[2]), int(row[3]), float(row[4]),
                                   int(row[5]))
            except (IndexError, ValueError):
                raise ParseError(f"{path}: malformed row at line {lineno}")
            groups.setdefault(tid, (origin, []))[1].append(step)
    trajectories = []
    for tid in sorted(groups):
        origin, steps = groups[tid]
        steps.sort(key=lambda s: s.timestamp)
        trajectories.append(Trajectory(steps[0].user, tuple(steps), origin))
    return Dataset(catalog, tuple(trajectories), float(r_min), float(r_max),
                   num_users)


def read_oracle_csv(path, num_users, num_items, scale, dense=False):
    r_min, r_max = scale
    mat = np.full((num_users, num_items), np.nan)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        if dense:
            for u, row in enumerate(reader):
                mat[u] = [float(x) for x in row]
        else:
            header = next(reader, None)
            if header != ["user", "item", "rating"]:
                raise ParseError(f"{path}: expected header 'user,item,rating'")
            for row in reader:
                mat[int(row[0]), int(row[1])] = float(row[2])
    if np.any(np.isnan(mat)):
        raise ValidationError(f"{path}: oracle matrix is not fully observed")
    return RatingOracle(mat, float(r_min), float(r_max))


def emit_oracle_csv(oracle, path, dense=False):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if dense:
            for row in oracle.ratings:
                w.writerow([repr(float(x)) for x in row])
        else:
            w.writerow(["user", "item", "rating"])
            for u in range(oracle.ratings.shape[0]):
                for i in range(oracle.ratings.shape[1]):
                    w.writerow([u, i, repr(float(oracle.ratings[u, i]))])


# ---------------------------------------------------------------------------
# synthetic corpus


def synth_dataset(num_users, num_items, num_categories, traj_len, latent_rank,
                  seed, r_min=1.0, r_max=5.0, greedy_prob=0.5,
                  cats_per_item=(1, 3), trajs_per_user=1,
                  category_tightness=0.0, sticky_prob=0.0):
    """Seeded synthetic corpus plus its ground-truth rating oracle.

    The true matrix is clip(affine(U V^T)) for low-rank seeded factors.  Item
    categories follow the latent structure: each category owns a prototype
    direction and an item joins the cats_per_item (inclusive bounds) whose
    prototypes are closest to its latent vector.  Single-category items
    (cats_per_item=(1, 1)) give the sharpest rating/diversity tradeoff: a
    user's high-rated items then concentrate in the categories aligned with
    their latent direction.  Trajectories come from a behavior policy that at
    each step either picks greedily by true rating or uniformly, sampling
    without replacement.

    category_tightness in [0, 1] blends item vectors toward their primary
    category prototype before ratings are computed (0 keeps them
    independent); higher values concentrate each user's high-rated items in
    fewer categories.

    trajs_per_user > 1 gives every user several independent sessions, and
    greedy_prob and sticky_prob may then be sequences of per-session
    values (cycled).  A negative greedy_prob is an aversion style: with
    probability |greedy_prob| the session picks the lowest-rated eligible
    item, which gives the corpus genuinely low-rating windows (uniform
    choice alone never drops below the mid scale).  sticky_prob is the per-step chance of restricting
    the candidate pool to the previous item's primary category before the
    greedy-or-uniform choice.  The four (greedy, sticky) combinations
    cover all four corners of the rating/diversity plane: global greedy
    (high rating, diverse when categories are unstructured), uniform
    (low rating, diverse), greedy-within-category (high rating, narrow),
    and uniform-within-category (low rating, narrow), which decorrelates
    the two realized objectives in the corpus.
    Mixing greedy sessions (high rating, category-concentrated) with
    near-uniform ones (lower rating, category-diverse) makes the realized
    objectives vary for the same user, which is what makes objective
    conditioning informative rather than redundant with the history.
    """
    if latent_rank < 1:
        raise ValidationError("latent_rank must be >= 1")
    if traj_len > num_items:
        raise ValidationError("traj_len exceeds num_items; sampling is without replacement")
    if not 0.0 <= category_tightness <= 1.0:
        raise ValidationError("category_tightness must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(num_users, latent_rank))
    V = rng.normal(size=(num_items, latent_rank))

    prototypes = rng.normal(size=(num_categories, latent_rank))
    categories = []
    for i in range(num_items):
        sims = prototypes @ V[i]
        lo, hi = cats_per_item
        k = int(rng.integers(lo, hi + 1))
        top = np.argsort(-sims, kind="stable")[:k]
        categories.append(tuple(sorted(int(c) for c in top)))
    catalog = Catalog(num_items, num_categories, tuple(categories))

    # category_tightness pulls each item's latent vector toward its primary
    # category prototype, so ratings become category-structured: a user's
    # favorite items then share few categories and greedy sessions have
    # genuinely low diversity, widening the realized-diversity support that
    # objective conditioning has to learn from
    if category_tightness > 0.0:
        primary = np.array([c[0] for c in categories])
        V = (1.0 - category_tightness) * V + category_tightness * prototypes[primary]
    raw = U @ V.T
    # affine map centers the scores on the rating scale before clipping
    mid = 0.5 * (r_min + r_max)
    half = 0.5 * (r_max - r_min)
    scale = half / max(1e-9, np.std(raw))
    R = np.clip(mid + scale * raw, r_min, r_max)

    styles = np.atleast_1d(np.asarray(greedy_prob, dtype=np.float64))
    sticky = np.atleast_1d(np.asarray(sticky_prob, dtype=np.float64))
    trajectories = []
    for u in range(num_users):
        for s in range(trajs_per_user):
            gp = float(styles[s % len(styles)])
            sp = float(sticky[s % len(sticky)])
            remaining = list(range(num_items))
            steps = []
            prev = None
            base = s * traj_len  # sessions occupy disjoint timestamp ranges
            for t in range(traj_len):
                pool = range(len(remaining))
                if sp > 0.0 and prev is not None and rng.random() < sp:
                    mates = [j for j, it in enumerate(remaining)
                             if categories[it][0] == categories[prev][0]]
                    if mates:
                        pool = mates
                if rng.random() < abs(gp):
                    sign = 1.0 if gp > 0 else -1.0
                    idx = max(pool,
                              key=lambda j: (sign * R[u, remaining[j]],
                                             -remaining[j]))
                else:
                    pool = list(pool)
                    idx = pool[int(rng.integers(len(pool)))]
                item = remaining.pop(idx)
                prev = item
                steps.append(Interaction(u, item, float(R[u, item]), base + t))
            trajectories.append(Trajectory(u, tuple(steps)))

    dataset = Dataset(catalog, tuple(trajectories), float(r_min), float(r_max), num_users)
    oracle = RatingOracle(R, float(r_min), float(r_max))
    return dataset, oracle


# ---------------------------------------------------------------------------
# matrix factorization completion


def complete_matrix(dataset, rank=8, epochs=30, lr=0.01, reg=0.02, seed=0):
    """Complete the observed ratings into a dense oracle via biased MF.

    r_hat(u, i) = mu + b_u + b_i + p_u . q_i, fit by seeded SGD on squared
    error with L2 regularization; the dense matrix is clipped to the scale.
    Returns (oracle, observed-MAE).
    """
    obs = [(s.user, s.item, s.rating)
           for traj in dataset.trajectories for s in traj.steps]
    if not obs:
        raise ValidationError("complete_matrix requires observed interactions")
    n_users = dataset.num_users
    n_items = dataset.catalog.num_items
    rng = np.random.default_rng(seed)
    mu = float(np.mean([r for _, _, r in obs]))
    bu = np.zeros(n_users)
    bi = np.zeros(n_items)
    P = rng.normal(scale=0.1, size=(n_users, rank))
    Q = rng.normal(scale=0.1, size=(n_items, rank))

    order = np.arange(len(obs))
    # overflow surfaces as the explicit divergence error on the next step
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            rng.shuffle(order)
            for k in order:
                u, i, r = obs[k]
                err = r - (mu + bu[u] + bi[i] + P[u] @ Q[i])
                if not math.isfinite(err):
                    raise DivergenceError("matrix factorization diverged; try a smaller lr")
                bu[u] += lr * (err - reg * bu[u])
                bi[i] += lr * (err - reg * bi[i])
                pu = P[u].copy()
                P[u] += lr * (err * Q[i] - reg * P[u])
                Q[i] += lr * (err * pu - reg * Q[i])

    full = mu + bu[:, None] + bi[None, :] + P @ Q.T
    full = np.clip(full, dataset.r_min, dataset.r_max)
    pred = np.array([full[u, i] for u, i, _ in obs])
    mae = float(np.mean(np.abs(pred - np.array([r for _, _, r in obs]))))
    return RatingOracle(full, dataset.r_min, dataset.r_max), mae


def user_items(dataset, user):
    """All (item, rating) interactions of a user in timestamp order."""
    trajs = [t for t in dataset.trajectories if t.user == user and t.origin == "organic"]
    if not trajs:
        raise LookupError(f"unknown user {user}")
    steps = sorted((s for t in trajs for s in t.steps), key=lambda s: s.timestamp)
    return [(s.item, s.rating) for s in steps]
