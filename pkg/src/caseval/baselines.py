"""Relevance-based baseline click models (PBM, UBM, random) and DCG.

Baselines see relevance as a single bucket per item, the rounded mean R grade,
and position as the list index. Parameters are estimated with EM.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import CasModel, sigmoid
from .types import R_GRADES, ConfigurationError, RatingHistogram, SerpItem, Session

BASELINE_FORMAT_VERSION = 1
DEFAULT_DEPTH = 10
EM_MAX_ITER = 200
EM_TOL = 1e-6
_EPS = 1e-12


def relevance_bucket(r: RatingHistogram) -> int:
    return r.relevance_bucket()


def _buckets(items: Sequence[SerpItem]) -> np.ndarray:
    return np.array([relevance_bucket(it.r_ratings) for it in items], dtype=int)


def dcg(serp: Sequence[SerpItem], depth: int = DEFAULT_DEPTH) -> float:
    """Exponential-gain DCG with log2 discount over the first ``depth`` positions."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    gains = 2.0 ** _buckets(serp[:depth]) - 1.0
    return float(np.sum(gains / np.log2(np.arange(2, len(gains) + 2))))


@dataclass(frozen=True)
class PbmParams:
    gamma: tuple[float, ...]
    attr: tuple[float, ...]

    def gamma_at(self, k: int) -> float:
        return self.gamma[min(k, len(self.gamma) - 1)]


@dataclass(frozen=True)
class UbmParams:
    """``gamma[r][p]``: examination at 0-based position ``r`` given the previous
    click at 1-based rank ``p`` (0 = no previous click), so ``p <= r``."""

    gamma: tuple[tuple[float, ...], ...]
    attr: tuple[float, ...]

    def gamma_at(self, k: int, prev: int) -> float:
        r = min(k, len(self.gamma) - 1)
        return self.gamma[r][min(prev, r)]


@dataclass(frozen=True)
class RandomParams:
    p_click: float
    p_sat: float


# ---------------------------------------------------------------- EM


def _click_table(sessions: Sequence[Session], depth: int):
    pos, prev, buckets, clicks = [], [], [], []
    for s in sessions:
        last = 0
        for k, it in enumerate(s.items):
            r = min(k, depth - 1)
            pos.append(r)
            prev.append(min(last, r))
            buckets.append(relevance_bucket(it.r_ratings))
            clicks.append(it.clicked)
            if it.clicked:
                last = k + 1
    return (
        np.array(pos, dtype=int),
        np.array(prev, dtype=int),
        np.array(buckets, dtype=int),
        np.array(clicks, dtype=float),
    )


def _em(cell: np.ndarray, n_cells: int, bucket: np.ndarray, c: np.ndarray, max_iter, tol, history):
    """EM for P(C) = gamma[cell] * attr[bucket]; returns (gamma, attr)."""
    gamma = np.full(n_cells, 0.5)
    attr = np.full(R_GRADES, 0.5)
    n_cell = np.bincount(cell, minlength=n_cells).astype(float)
    n_bucket = np.bincount(bucket, minlength=R_GRADES).astype(float)
    for _ in range(max_iter):
        g, a = gamma[cell], attr[bucket]
        p = g * a
        if history is not None:
            history.append(float(np.sum(c * np.log(np.maximum(p, _EPS)) + (1 - c) * np.log(np.maximum(1 - p, _EPS)))))
        denom = np.maximum(1.0 - p, _EPS)
        post_e = c + (1 - c) * g * (1 - a) / denom
        post_a = c + (1 - c) * (1 - g) * a / denom
        new_gamma = np.where(n_cell > 0, np.bincount(cell, post_e, n_cells) / np.maximum(n_cell, 1), gamma)
        new_attr = np.where(n_bucket > 0, np.bincount(bucket, post_a, R_GRADES) / np.maximum(n_bucket, 1), attr)
        delta = max(np.max(np.abs(new_gamma - gamma)), np.max(np.abs(new_attr - attr)))
        gamma, attr = np.clip(new_gamma, 0.0, 1.0), np.clip(new_attr, 0.0, 1.0)
        if delta < tol:
            break
    if history is not None:
        p = gamma[cell] * attr[bucket]
        history.append(float(np.sum(c * np.log(np.maximum(p, _EPS)) + (1 - c) * np.log(np.maximum(1 - p, _EPS)))))
    return gamma, attr


def fit_pbm(
    sessions: Sequence[Session],
    depth: int = DEFAULT_DEPTH,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
    history: list | None = None,
) -> PbmParams:
    """EM estimate of the position-based model.

    Positions at or beyond ``depth`` share the last examination parameter.
    ``history``, when given, receives the training log-likelihood before the
    first and after every EM step.
    """
    pos, _, bucket, c = _click_table(sessions, depth)
    gamma, attr = _em(pos, depth, bucket, c, max_iter, tol, history)
    return PbmParams(tuple(gamma.tolist()), tuple(attr.tolist()))


def fit_ubm(
    sessions: Sequence[Session],
    depth: int = DEFAULT_DEPTH,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
    history: list | None = None,
) -> UbmParams:
    pos, prev, bucket, c = _click_table(sessions, depth)
    cell = pos * depth + prev
    gamma, attr = _em(cell, depth * depth, bucket, c, max_iter, tol, history)
    table = gamma.reshape(depth, depth)
    return UbmParams(
        tuple(tuple(table[r, : r + 1].tolist()) for r in range(depth)), tuple(attr.tolist())
    )


def fit_random(sessions: Sequence[Session]) -> RandomParams:
    if not sessions:
        raise ConfigurationError("no sessions")
    n_items = sum(len(s.items) for s in sessions)
    n_clicks = sum(it.clicked for s in sessions for it in s.items)
    labels = [s.satisfaction for s in sessions if s.is_labeled]
    if labels:
        p_sat = sum(labels) / len(labels)
    else:
        warnings.warn("no labeled sessions: p_sat set to 0.5")
        p_sat = 0.5
    return RandomParams(n_clicks / n_items, p_sat)


def fit_sat_intercept(utilities: Sequence[float], labels: Sequence[bool], iters: int = 100) -> float:
    """One-dimensional MLE of ``c`` in P(S=1) = sigmoid(utility + c) (Newton's method)."""
    u = np.asarray(utilities, dtype=float)
    s = np.asarray(labels, dtype=float)
    if len(u) == 0:
        return 0.0
    if s.all() or not s.any():
        # unbounded MLE; keep a finite, strongly one-sided intercept
        return (1.0 if s.all() else -1.0) * 20.0 - float(np.mean(u))
    c = 0.0
    for _ in range(iters):
        p = sigmoid(u + c)
        g = np.sum(s - p)
        h = np.sum(p * (1 - p))
        step = g / max(h, _EPS)
        c += float(np.clip(step, -5.0, 5.0))
        if abs(step) < 1e-12:
            break
    return c


# ---------------------------------------------------------------- model objects


class BaselineModel:
    """Shared surface of baseline models used by the evaluation harness."""

    kind = "baseline"
    name = "baseline"
    sat_intercept: float = 0.0

    def item_click_prob(self, k: int, prev: int, bucket: int) -> float:
        raise NotImplementedError

    def click_probs(self, session: Session, conditioned: bool = False) -> np.ndarray:
        """P(C_k = 1 | observed clicks above k) for every position."""
        out, last = [], 0
        for k, it in enumerate(session.items):
            out.append(self.item_click_prob(k, last, relevance_bucket(it.r_ratings)))
            if it.clicked:
                last = k + 1
        return np.array(out)

    def marginal_click_probs(self, serp: Sequence[SerpItem]) -> np.ndarray:
        return np.array(
            [self.item_click_prob(k, 0, relevance_bucket(it.r_ratings)) for k, it in enumerate(serp)]
        )

    def utility(self, serp: Sequence[SerpItem]) -> float:
        """Expected relevance of clicked results."""
        return float(np.dot(self.marginal_click_probs(serp), _buckets(serp)))

    def sat_prob(self, serp: Sequence[SerpItem]) -> float:
        return sigmoid(self.utility(serp) + self.sat_intercept)

    def calibrate(self, sessions: Sequence[Session]) -> None:
        labeled = [s for s in sessions if s.is_labeled]
        self.sat_intercept = fit_sat_intercept(
            [self.utility(s.items) for s in labeled], [s.satisfaction for s in labeled]
        )

    def _payload(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "format_version": BASELINE_FORMAT_VERSION,
            "type": self.kind,
            "name": self.name,
            "sat_intercept": self.sat_intercept,
            **self._payload(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass
class PbmModel(BaselineModel):
    params: PbmParams
    sat_intercept: float = 0.0
    name: str = "PBM"
    kind = "pbm"

    def item_click_prob(self, k, prev, bucket):
        return self.params.gamma_at(k) * self.params.attr[bucket]

    def _payload(self):
        return {"gamma": list(self.params.gamma), "attr": list(self.params.attr)}


@dataclass
class UbmModel(BaselineModel):
    params: UbmParams
    sat_intercept: float = 0.0
    name: str = "UBM"
    external: bool = False
    kind = "ubm"

    def item_click_prob(self, k, prev, bucket):
        return self.params.gamma_at(k, prev) * self.params.attr[bucket]

    def marginal_click_probs(self, serp):
        # distribution of the rank of the last click above position k
        n = len(serp)
        last = np.zeros(n + 1)
        last[0] = 1.0
        out = np.zeros(n)
        for k, it in enumerate(serp):
            a = self.params.attr[relevance_bucket(it.r_ratings)]
            p = np.array([self.params.gamma_at(k, j) * a for j in range(k + 1)])
            click = last[: k + 1] * p
            out[k] = click.sum()
            last[: k + 1] -= click
            last[k + 1] = out[k]
        return out

    def _payload(self):
        return {
            "gamma": [list(row) for row in self.params.gamma],
            "attr": list(self.params.attr),
            "external": self.external,
        }


@dataclass
class RandomModel(BaselineModel):
    params: RandomParams
    name: str = "random"
    kind = "random"

    @property
    def sat_intercept(self) -> float:
        return 0.0

    def item_click_prob(self, k, prev, bucket):
        return self.params.p_click

    def sat_prob(self, serp):
        return self.params.p_sat

    def calibrate(self, sessions):
        pass

    def _payload(self):
        return {"p_click": self.params.p_click, "p_sat": self.params.p_sat}


@dataclass
class DcgMetric:
    """DCG as a metric; it has no click or satisfaction model."""

    depth: int = DEFAULT_DEPTH
    name: str = "DCG"
    kind = "dcg"

    def utility(self, serp):
        return dcg(serp, self.depth)

    def click_probs(self, session, conditioned=False):
        return None

    def sat_prob(self, serp):
        return None

    def calibrate(self, sessions):
        pass

    def to_dict(self):
        return {"format_version": BASELINE_FORMAT_VERSION, "type": "dcg", "name": self.name, "depth": self.depth}

    def save(self, path, extra=None):
        Path(path).write_text(json.dumps({**self.to_dict(), **(extra or {})}, indent=2, sort_keys=True) + "\n")


def load_ubm_params(path: str | Path) -> UbmModel:
    """Load externally trained UBM parameters (e.g. fitted on a large click log).

    Accepts either a full UBM model file or a bare ``{"gamma": ..., "attr": ...}``
    object. The result is flagged ``external`` and named ``uUBM``.
    """
    d = json.loads(Path(path).read_text())
    gamma = tuple(tuple(float(x) for x in row) for row in d["gamma"])
    for r, row in enumerate(gamma):
        if len(row) != r + 1:
            raise ConfigurationError(f"UBM gamma row {r} must have {r + 1} entries")
    attr = tuple(float(x) for x in d["attr"])
    if len(attr) != R_GRADES:
        raise ConfigurationError(f"UBM attr must have {R_GRADES} entries")
    if not all(0.0 <= x <= 1.0 for row in gamma for x in row) or not all(0 <= x <= 1 for x in attr):
        raise ConfigurationError("UBM probabilities must lie in [0, 1]")
    return UbmModel(
        UbmParams(gamma, attr),
        sat_intercept=float(d.get("sat_intercept", 0.0)),
        name=d.get("name", "uUBM") if d.get("external") else "uUBM",
        external=True,
    )


def load_model(path: str | Path):
    """Load any model file written by this package (CAS or baseline)."""
    d = json.loads(Path(path).read_text())
    kind = d.get("type")
    if kind == "cas":
        return CasModel.from_dict(d)
    if d.get("format_version") != BASELINE_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format {d.get('format_version')!r} in {path}")
    if kind == "pbm":
        return PbmModel(PbmParams(tuple(d["gamma"]), tuple(d["attr"])), d["sat_intercept"], d.get("name", "PBM"))
    if kind == "ubm":
        if d.get("external"):
            return load_ubm_params(path)
        params = UbmParams(tuple(tuple(r) for r in d["gamma"]), tuple(d["attr"]))
        return UbmModel(params, d["sat_intercept"], d.get("name", "UBM"))
    if kind == "random":
        return RandomModel(RandomParams(d["p_click"], d["p_sat"]), d.get("name", "random"))
    if kind == "dcg":
        return DcgMetric(int(d["depth"]), d.get("name", "DCG"))
    raise ConfigurationError(f"unknown model type {kind!r} in {path}")
