"""Attention features of a SERP item.

Layout: ``[intercept | rank | 10 class slots | offset_top, column, width, height, area]``
with disabled groups dropped. Rank and the four pixel features are
standardized with train-set statistics; the column flag and class slots stay
binary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .types import ITEM_TYPES, ConfigurationError, ModelVariant, SerpItem, Session

CONTINUOUS = ("rank", "offset_top", "width", "height", "area")
GEOMETRY = ("offset_top", "column", "width", "height", "area")

_TYPE_INDEX = {t: i for i, t in enumerate(ITEM_TYPES)}


@dataclass(frozen=True)
class FeatureNormalization:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"names": list(CONTINUOUS), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNormalization":
        if list(d.get("names", CONTINUOUS)) != list(CONTINUOUS):
            raise ConfigurationError(f"normalization names {d['names']} != {list(CONTINUOUS)}")
        return cls(tuple(map(float, d["mean"])), tuple(map(float, d["std"])))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: tuple[str, ...]


def feature_layout(variant: ModelVariant) -> tuple[str, ...]:
    names = ["intercept"]
    if variant.use_rank:
        names.append("rank")
    if variant.use_classes:
        names += [f"class={t.value}" for t in ITEM_TYPES]
    if variant.use_geometry:
        names += list(GEOMETRY)
    return tuple(names)


def feature_dim(variant: ModelVariant) -> int:
    return len(feature_layout(variant))


def _raw_continuous(items: Sequence[SerpItem]) -> np.ndarray:
    return np.array(
        [
            (it.perceived_rank, it.offset_top, it.width, it.height, it.width * it.height)
            for it in items
        ],
        dtype=float,
    ).reshape(-1, len(CONTINUOUS))


def fit_normalization(sessions: Iterable[Session]) -> FeatureNormalization:
    """Population mean/std of the continuous features over every training item.

    A zero-variance feature gets std 1 so it standardizes to exactly 0.
    """
    items = [it for s in sessions for it in s.items]
    if not items:
        raise ConfigurationError("cannot fit feature normalization on an empty collection")
    raw = _raw_continuous(items)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std[std <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 1.0
    return FeatureNormalization(tuple(mean.tolist()), tuple(std.tolist()))


def feature_matrix(
    items: Sequence[SerpItem], variant: ModelVariant, norms: FeatureNormalization | None
) -> np.ndarray:
    """Stack the feature vectors of ``items`` row-wise."""
    if norms is None:
        raise ConfigurationError("feature normalization has not been fitted")
    n = len(items)
    z = (_raw_continuous(items) - np.asarray(norms.mean)) / np.asarray(norms.std)
    blocks = [np.ones((n, 1))]
    if variant.use_rank:
        blocks.append(z[:, :1])
    if variant.use_classes:
        onehot = np.zeros((n, len(ITEM_TYPES)))
        onehot[np.arange(n), [_TYPE_INDEX[it.item_type] for it in items]] = 1.0
        blocks.append(onehot)
    if variant.use_geometry:
        column = np.array([[float(it.column)] for it in items]).reshape(n, 1)
        blocks.append(np.hstack([z[:, 1:2], column, z[:, 2:5]]))
    return np.hstack(blocks)


def extract_features(
    item: SerpItem, variant: ModelVariant, norms: FeatureNormalization | None
) -> FeatureVector:
    return FeatureVector(feature_matrix([item], variant, norms)[0], feature_layout(variant))
