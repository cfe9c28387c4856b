"""Small constructors shared by the test modules."""

from __future__ import annotations

import numpy as np

from caseval.features import FeatureNormalization
from caseval.types import ITEM_TYPES, ItemType, RatingHistogram, SerpItem, Session

UNIT_NORMS = FeatureNormalization((0.0,) * 5, (1.0,) * 5)


def item(rank=1, **kw) -> SerpItem:
    kw.setdefault("item_id", f"i{rank}")
    for key, n in (("d_ratings", 3), ("r_ratings", 4)):
        if key in kw and not isinstance(kw[key], RatingHistogram):
            kw[key] = RatingHistogram(tuple(kw[key]))
            assert len(kw[key].counts) == n
    return SerpItem(perceived_rank=rank, **kw)


def session(items, satisfaction=None, sid="s") -> Session:
    return Session(sid, "q", tuple(items), satisfaction)


def random_sessions(rng: np.random.Generator, n: int = 30, k: int = 5, labeled: float = 0.8) -> list[Session]:
    """Random but valid sessions with every observation pattern represented."""
    out = []
    for i in range(n):
        items = []
        for j in range(k):
            fix = bool(rng.random() < 0.5)
            items.append(
                SerpItem(
                    item_id=f"s{i}-{j}",
                    perceived_rank=j + 1,
                    item_type=ITEM_TYPES[int(rng.integers(len(ITEM_TYPES)))],
                    offset_top=float(rng.uniform(0, 1500)),
                    column=int(rng.random() < 0.2),
                    width=float(rng.uniform(200, 700)),
                    height=float(rng.uniform(50, 300)),
                    d_ratings=RatingHistogram(tuple(rng.integers(0, 4, 3))),
                    r_ratings=RatingHistogram(tuple(rng.integers(0, 4, 4))),
                    clicked=bool(rng.random() < 0.3),
                    mouse_fixated=fix,
                )
            )
        sat = bool(rng.random() < 0.7) if rng.random() < labeled else None
        out.append(Session(f"r{i}", "q", tuple(items), sat))
    return out


def web_item(rank, r=(0, 0, 0, 0), d=(0, 0, 0), clicked=False, fixated=False, item_type=ItemType.WEB) -> SerpItem:
    return SerpItem(
        item_id=f"w{rank}",
        perceived_rank=rank,
        item_type=item_type,
        offset_top=100.0 * (rank - 1),
        d_ratings=RatingHistogram(d),
        r_ratings=RatingHistogram(r),
        clicked=clicked,
        mouse_fixated=fixated,
    )
