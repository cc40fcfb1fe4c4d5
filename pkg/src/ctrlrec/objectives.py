"""Objective metrics measured on H-step future windows.

Two objectives condition the recommender: the cumulative rating of the
window and its average category diversity.  Both are normalized into [0, 1]
to form the objective point fed to the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectivePoint:
    o_rate: float
    o_div: float

    def __post_init__(self):
        if not (0.0 <= self.o_rate <= 1.0 and 0.0 <= self.o_div <= 1.0):
            raise DomainError(f"objective point ({self.o_rate}, {self.o_div}) "
                              "outside the unit square")


@dataclass(frozen=True)
class FutureWindow:
    items: tuple
    ratings: tuple

    def __post_init__(self):
        if len(self.items) != len(self.ratings):
            raise DomainError("items and ratings must be parallel")
        if len(self.items) < 2:
            raise DomainError("future windows need length >= 2")


def cumulative_rating(window):
    """Sum of ratings over the window."""
    return float(sum(window.ratings))


def jaccard(a, b):
    """|A n B| / |A u B| over category sets; 1.0 when both are empty."""
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def diversity(window, catalog, count_first=False):
    """Average per-step category novelty of the window.

    Each item from position 2 onward contributes 1 - J(union of prior
    categories, its categories); the mean runs over those H-1 terms, so an
    all-same-category window scores 0 and a fully category-disjoint window
    scores 1.  count_first=True switches to the alternative convention that
    also scores the first item against the empty set (with J(empty, .) = 1)
    and averages over H terms; kept only for sensitivity analysis.
    """
    h = len(window.items)
    if h < 2:
        raise DomainError("diversity needs H >= 2")
    terms = []
    seen = frozenset()
    for k, item in enumerate(window.items):
        cats = catalog.item_categories(item)
        if k == 0:
            if count_first:
                terms.append(0.0)  # J(empty, .) taken as 1 under this convention
        else:
            terms.append(1.0 - jaccard(seen, cats))
        seen = seen | cats
    return float(sum(terms) / len(terms))


def normalize(raw_rate, raw_div, horizon, r_max):
    """Map raw window objectives onto the unit square."""
    if horizon < 2 or r_max <= 0:
        raise DomainError("normalize needs horizon >= 2 and r_max > 0")
    if not (math.isfinite(raw_rate) and math.isfinite(raw_div)):
        raise DomainError("non-finite objective value")
    o_rate = min(1.0, max(0.0, raw_rate / (horizon * r_max)))
    o_div = min(1.0, max(0.0, raw_div))
    return ObjectivePoint(o_rate, o_div)


def grid_points():
    """The nine characteristic objective points {0, 0.5, 1}^2.

    Row-major with o_rate descending, so the first entry (1.0, 0.0) is the
    pure rating-maximization corner.
    """
    return [ObjectivePoint(r, d)
            for r in (1.0, 0.5, 0.0)
            for d in (0.0, 0.5, 1.0)]
