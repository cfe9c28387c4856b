"""Synthetic session logs drawn from the CAS generative process (and from PBM/UBM).

Each session uses its own random streams derived from ``(seed, session index)``,
so session ``i`` does not depend on how many sessions are generated or in what
order. Ground-truth latents go to a separate truth record, never into the
sessions themselves.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import PbmParams, UbmParams, relevance_bucket
from .features import FeatureNormalization, feature_dim, feature_matrix, fit_normalization
from .model import sigmoid
from .types import (
    D_GRADES,
    ITEM_TYPES,
    R_GRADES,
    CasParams,
    ConfigurationError,
    ItemType,
    ModelVariant,
    RatingHistogram,
    SerpItem,
    Session,
)

# item types whose snippet tends to answer the query directly
ANSWER_TYPES = (ItemType.WEATHER, ItemType.CURRENCY, ItemType.KNOWLEDGE_PANEL, ItemType.ANSWER)
SPECIAL_TYPES = tuple(t for t in ITEM_TYPES if t not in (ItemType.WEB, ItemType.OTHER))

_CLASS_WEIGHTS = {
    ItemType.WEB: 0.0,
    ItemType.NEWS: 0.3,
    ItemType.WEATHER: 0.9,
    ItemType.CURRENCY: 0.9,
    ItemType.KNOWLEDGE_PANEL: 0.6,
    ItemType.IMAGE: 0.4,
    ItemType.VIDEO: 0.2,
    ItemType.MAPS: 0.3,
    ItemType.ANSWER: 0.8,
    ItemType.OTHER: -0.3,
}


def default_true_params() -> CasParams:
    """Ground truth for the full CAS feature layout (17 attention weights)."""
    attention = (
        [0.3, -1.0]
        + [_CLASS_WEIGHTS[t] for t in ITEM_TYPES]
        + [-0.4, -0.6, 0.2, 0.3, 0.1]  # offset_top, column, width, height, area
    )
    return CasParams(
        attention_weights=attention,
        alpha_intercept=-1.5,
        alpha_weights=(-0.3, -0.1, 0.2, 0.45),
        tau_d=(-0.15, 0.1, 0.4),
        tau_r=(-0.1, 0.0, 0.2, 0.4),
        tau_0=-0.2,
        fixation_logit=float(np.log(0.7 / 0.3)),
    )


@dataclass(frozen=True)
class LayoutSampler:
    main_width: float = 600.0
    width_jitter: float = 60.0
    web_height: tuple[float, float] = (80.0, 140.0)
    special_height: tuple[float, float] = (150.0, 350.0)
    side_width: float = 400.0
    side_height: tuple[float, float] = (250.0, 500.0)
    side_column_prob: float = 0.5
    gap: float = 12.0
    header: float = 120.0


@dataclass(frozen=True)
class RatingSampler:
    d_probs: tuple[float, ...] = (0.5, 0.3, 0.2)
    r_probs: tuple[float, ...] = (0.3, 0.3, 0.25, 0.15)
    raters: tuple[int, int] = (3, 7)
    rater_accuracy: float = 0.7
    unrated_prob: float = 0.03
    quality_spread: float = 0.8
    answer_boost: float = 1.5


@dataclass(frozen=True)
class SimConfig:
    n_sessions: int = 1000
    items_per_serp: int = 10
    heterogeneous_fraction: float = 0.12
    true_params: CasParams = field(default_factory=default_true_params)
    layout_sampler: LayoutSampler = field(default_factory=LayoutSampler)
    rating_sampler: RatingSampler = field(default_factory=RatingSampler)
    fixation_noise: float = 0.3
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.n_sessions < 1:
            out.append("n_sessions: must be a positive integer")
        if self.items_per_serp < 1:
            out.append("items_per_serp: must be >= 1")
        probs = {
            "heterogeneous_fraction": self.heterogeneous_fraction,
            "fixation_noise": self.fixation_noise,
            "layout_sampler.side_column_prob": self.layout_sampler.side_column_prob,
            "rating_sampler.rater_accuracy": self.rating_sampler.rater_accuracy,
            "rating_sampler.unrated_prob": self.rating_sampler.unrated_prob,
        }
        out += [f"{k}: must be a probability" for k, v in probs.items() if not 0.0 <= v <= 1.0]
        rs = self.rating_sampler
        if len(rs.d_probs) != D_GRADES or len(rs.r_probs) != R_GRADES:
            out.append("rating_sampler: d_probs needs 3 entries and r_probs 4")
        elif min(rs.d_probs) < 0 or min(rs.r_probs) < 0:
            out.append("rating_sampler: grade probabilities must be non-negative")
        if not 1 <= rs.raters[0] <= rs.raters[1]:
            out.append("rating_sampler.raters: need 1 <= min <= max")
        if len(self.true_params.attention_weights) != feature_dim(ModelVariant()):
            out.append("true_params.attention_weights: must match the full 17-feature layout")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_params"] = self.true_params.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        """Build from a (possibly partial) mapping; unknown keys raise ConfigurationError."""
        return _from_dict(cls, d, "")


def _from_dict(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in known:
            raise ConfigurationError(f"unknown config field {prefix}{key!r}")
        default = getattr(cls(), key)
        if key == "true_params":
            base = default_true_params().to_dict()
            base.update(value)
            try:
                kwargs[key] = CasParams.from_dict(base)
            except TypeError as e:
                raise ConfigurationError(f"invalid config field {prefix}true_params: {e}") from None
        elif is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value, f"{prefix}{key}.")
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class SessionTruth:
    session_id: str
    examined: tuple[bool, ...]
    exam_probs: tuple[float, ...]
    attr_probs: tuple[float, ...]
    realized_utility: float
    expected_utility: float
    sat_prob: float

    def to_dict(self) -> dict:
        return asdict(self)


def _rngs(seed: int, index: int):
    return np.random.default_rng([seed, index, 0]), np.random.default_rng([seed, index, 1])


def _sample_grades(rng, base: Sequence[float], tilt: np.ndarray) -> np.ndarray:
    """One latent grade per item from ``base`` tilted towards high grades by ``tilt``."""
    grades = np.arange(len(base))
    logits = np.log(np.maximum(np.asarray(base, float), 1e-12)) + np.outer(tilt, grades - grades.mean())
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cdf = np.cumsum(p / p.sum(axis=1, keepdims=True), axis=1)
    return np.minimum((rng.random(len(tilt))[:, None] > cdf).sum(axis=1), len(base) - 1)


def _histograms(rng, true_grades: np.ndarray, n_grades: int, rs: RatingSampler) -> list[RatingHistogram]:
    """Rater votes: the latent grade with probability ``rater_accuracy``, else a uniform grade."""
    n = len(true_grades)
    raters = rng.integers(rs.raters[0], rs.raters[1] + 1, size=n)
    pvals = np.full((n, n_grades), (1.0 - rs.rater_accuracy) / n_grades)
    pvals[np.arange(n), true_grades] += rs.rater_accuracy
    counts = rng.multinomial(raters, pvals)
    counts[rng.random(n) < rs.unrated_prob] = 0
    return [RatingHistogram(tuple(row)) for row in counts.tolist()]


def sample_serp(config: SimConfig, index: int, rng=None) -> tuple[SerpItem, ...]:
    """Layout and ratings of SERP ``index`` (no behavioural fields)."""
    rng = rng if rng is not None else _rngs(config.seed, index)[0]
    ls, rs, n = config.layout_sampler, config.rating_sampler, config.items_per_serp
    heterogeneous = rng.random() < config.heterogeneous_fraction
    types = [ItemType.WEB] * n
    side = None
    if heterogeneous:
        if n > 1 and rng.random() < ls.side_column_prob:
            side = n - 1
            types[side] = ItemType.KNOWLEDGE_PANEL
            n_main_special = int(rng.integers(0, 2))
        else:
            n_main_special = 1 + int(rng.integers(0, 2))
        main_slots = [k for k in range(n) if k != side]
        for k in rng.choice(main_slots, size=min(n_main_special, len(main_slots)), replace=False):
            types[int(k)] = SPECIAL_TYPES[int(rng.integers(len(SPECIAL_TYPES)))]

    quality = rng.normal() * rs.quality_spread
    offset = ls.header
    geometry = []
    for k in range(n):
        if k == side:
            geometry.append((ls.header, 1, ls.side_width, float(rng.uniform(*ls.side_height))))
            continue
        h_range = ls.web_height if types[k] is ItemType.WEB else ls.special_height
        h = float(rng.uniform(*h_range))
        w = ls.main_width + float(rng.uniform(-ls.width_jitter, ls.width_jitter))
        geometry.append((offset, 0, w, h))
        offset += h + ls.gap
    # perceived order: top to bottom, the side column read next to the first results
    order = sorted(range(n), key=lambda k: geometry[k][0] + 150.0 * geometry[k][1])
    ranks = {k: r + 1 for r, k in enumerate(order)}

    answer = np.array([t in ANSWER_TYPES for t in types], dtype=float)
    d_grades = _sample_grades(rng, rs.d_probs, quality + rs.answer_boost * answer)
    r_grades = _sample_grades(rng, rs.r_probs, np.full(n, quality))
    d_hists = _histograms(rng, d_grades, D_GRADES, rs)
    r_hists = _histograms(rng, r_grades, R_GRADES, rs)
    items = []
    for k in range(n):
        top, col, w, h = geometry[k]
        items.append(
            SerpItem(
                item_id=f"s{index}-i{k}",
                perceived_rank=ranks[k],
                item_type=types[k],
                offset_top=round(top, 2),
                column=col,
                width=round(w, 2),
                height=round(h, 2),
                d_ratings=d_hists[k],
                r_ratings=r_hists[k],
            )
        )
    return tuple(items)


def simulate_with_truth(
    config: SimConfig, normalization: FeatureNormalization | None = None
) -> tuple[list[Session], list[SessionTruth], FeatureNormalization]:
    """Run the CAS generative process.

    The true attention weights act on features standardized with
    ``normalization``; by default it is fitted on the generated layouts.
    """
    problems = config.violations()
    if problems:
        raise ConfigurationError("; ".join(problems))
    serps = [sample_serp(config, i) for i in range(config.n_sessions)]
    if normalization is None:
        normalization = fit_normalization(Session(str(i), "", items) for i, items in enumerate(serps))
    variant = ModelVariant()
    p = config.true_params
    sessions, truths = [], []
    for i, items in enumerate(serps):
        rng = _rngs(config.seed, i)[1]
        X = feature_matrix(items, variant, normalization)
        R = np.array([it.r_ratings.expanded() for it in items])
        D = np.array([it.d_ratings.expanded() for it in items])
        eps = sigmoid(X @ np.asarray(p.attention_weights))
        alpha = sigmoid(p.alpha_intercept + R @ np.asarray(p.alpha_weights))
        u_d, u_r = D @ np.asarray(p.tau_d), R @ np.asarray(p.tau_r)

        n = len(items)
        examined = rng.random(n) < eps
        clicked = examined & (rng.random(n) < alpha)
        fixated = examined & (rng.random(n) >= config.fixation_noise)
        realized = float(np.dot(examined, u_d) + np.dot(clicked, u_r))
        sat_p = float(sigmoid(p.tau_0 + realized))
        satisfied = bool(rng.random() < sat_p)

        sid = f"sim-{config.seed}-{i}"
        sessions.append(
            Session(
                session_id=sid,
                query=f"query {i}",
                items=tuple(
                    replace(it, clicked=bool(c), mouse_fixated=bool(f))
                    for it, c, f in zip(items, clicked, fixated)
                ),
                satisfaction=satisfied,
            )
        )
        truths.append(
            SessionTruth(
                session_id=sid,
                examined=tuple(bool(e) for e in examined),
                exam_probs=tuple(eps.tolist()),
                attr_probs=tuple(alpha.tolist()),
                realized_utility=realized,
                expected_utility=float(np.dot(eps, u_d + alpha * u_r)),
                sat_prob=sat_p,
            )
        )
    return sessions, truths, normalization


def simulate(config: SimConfig) -> list[Session]:
    return simulate_with_truth(config)[0]


def _simulate_clicks(config: SimConfig, click_fn) -> list[Session]:
    """Shared driver for click-only models: ``click_fn(rng, items)`` returns click flags."""
    if config.n_sessions < 1:
        raise ConfigurationError("n_sessions: must be a positive integer")
    out = []
    for i in range(config.n_sessions):
        layout_rng, rng = _rngs(config.seed, i)
        items = sample_serp(config, i, layout_rng)
        clicks = click_fn(rng, items)
        out.append(
            Session(
                session_id=f"sim-{config.seed}-{i}",
                query=f"query {i}",
                items=tuple(replace(it, clicked=bool(c)) for it, c in zip(items, clicks)),
            )
        )
    return out


def simulate_pbm(pbm: PbmParams, config: SimConfig = SimConfig()) -> list[Session]:
    """Sessions whose clicks follow P(C_k) = gamma_k * attr[bucket_k]; no fixations."""

    def clicks(rng, items):
        p = np.array(
            [pbm.gamma_at(k) * pbm.attr[relevance_bucket(it.r_ratings)] for k, it in enumerate(items)]
        )
        return rng.random(len(items)) < p

    return _simulate_clicks(config, clicks)


def simulate_ubm(ubm: UbmParams, config: SimConfig = SimConfig()) -> list[Session]:
    def clicks(rng, items):
        out, last = [], 0
        for k, it in enumerate(items):
            c = rng.random() < ubm.gamma_at(k, last) * ubm.attr[relevance_bucket(it.r_ratings)]
            out.append(c)
            if c:
                last = k + 1
        return out

    return _simulate_clicks(config, clicks)


def write_truth(path: str | Path, truths: Sequence[SessionTruth], normalization: FeatureNormalization) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"normalization": normalization.to_dict()}, separators=(",", ":")) + "\n")
        for t in truths:
            fh.write(json.dumps(t.to_dict(), separators=(",", ":")) + "\n")


def read_truth(path: str | Path) -> tuple[list[SessionTruth], FeatureNormalization]:
    lines = Path(path).read_text().splitlines()
    norms = FeatureNormalization.from_dict(json.loads(lines[0])["normalization"])
    truths = []
    for line in lines[1:]:
        d = json.loads(line)
        truths.append(SessionTruth(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}))
    return truths, norms
