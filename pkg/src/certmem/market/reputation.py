"""Seller reputation: a decayed, stake-weighted mean of verified-buyer ratings.

    weight_i = exp(-decay * age_i) * min(escrow_i, cap) * repeat_i
    score    = sum(weight_i * rating_i / 5) / sum(weight_i)

``repeat_i`` is ``repeat_discount`` for a buyer's reviews of the same seller
beyond the first ``repeat_threshold``, else 1.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

DAY_MS = 24 * 60 * 60 * 1000


@dataclass(frozen=True)
class ReputationConfig:
    half_life_ms: int = 30 * DAY_MS
    cap: int = 100
    repeat_threshold: int = 3
    repeat_discount: float = 0.5

    @property
    def decay_per_ms(self) -> float:
        return math.log(2) / self.half_life_ms


@dataclass(frozen=True)
class Review:
    trade_id: str
    seller: bytes
    buyer: bytes
    rating: int
    comment: str
    at: int
    escrow: int


@dataclass(frozen=True)
class ReputationScore:
    seller: bytes
    # None when no review is eligible, which is distinct from a zero score
    score: float | None
    inputs: list[Review] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    excluded: list[Review] = field(default_factory=list)


def review_weights(reviews: list[Review], now: int, config: ReputationConfig) -> list[float]:
    seen: Counter[bytes] = Counter()
    weights = []
    for r in sorted(reviews, key=lambda r: (r.at, r.trade_id)):
        seen[r.buyer] += 1
        repeat = config.repeat_discount if seen[r.buyer] > config.repeat_threshold else 1.0
        age = max(0, now - r.at)
        weights.append(math.exp(-config.decay_per_ms * age) * min(r.escrow, config.cap) * repeat)
    return weights


def aggregate(
    seller: bytes,
    reviews: Iterable[Review],
    now: int,
    config: ReputationConfig,
    same_owner: Callable[[bytes, bytes], bool],
) -> ReputationScore:
    mine = [r for r in reviews if r.seller == seller]
    excluded = [r for r in mine if r.buyer == seller or same_owner(r.buyer, seller)]
    eligible = sorted((r for r in mine if r not in excluded), key=lambda r: (r.at, r.trade_id))
    weights = review_weights(eligible, now, config)
    total = math.fsum(weights)
    if not eligible or total <= 0:
        return ReputationScore(seller, None, eligible, weights, excluded)
    score = math.fsum(w * r.rating for w, r in zip(weights, eligible)) / (5 * total)
    score = min(1.0, max(0.0, score))  # rounding must not leave the unit interval
    return ReputationScore(seller, score, eligible, weights, excluded)
