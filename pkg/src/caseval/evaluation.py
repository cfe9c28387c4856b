"""Experimental harness: held-out likelihoods, correlations and TQ-fold cross-validation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .types import ConfigurationError, Session, encode_session

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "schema_version",
    "repetition",
    "fold",
    "model",
    "n_test_sessions",
    "click_loglik",
    "sat_loglik",
    "pearson_sat",
    "spearman_sat",
    "train_checksum",
    "test_checksum",
)

_FLOOR = 1e-300


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Product-moment correlation; None when either input has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("inputs must have equal length")
    if len(x) < 2:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx <= 0 or syy <= 0:
        return None
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Rank correlation with average ranks for ties."""
    if len(x) != len(y):
        raise ValueError("inputs must have equal length")
    return pearson(rankdata(x), rankdata(y))


def click_loglik(model, sessions: Sequence[Session], conditioned: bool = False) -> float | None:
    """Mean log-probability of the observed click flag per item."""
    total, n = 0.0, 0
    for s in sessions:
        p = model.click_probs(s, conditioned=conditioned)
        if p is None:
            return None
        c = np.array([it.clicked for it in s.items])
        prob = np.where(c, p, 1.0 - p)
        total += float(np.sum(np.log(np.maximum(prob, _FLOOR))))
        n += len(c)
    return total / n if n else None


def sat_loglik(model, sessions: Sequence[Session]) -> float | None:
    """Mean log P(S = s) over labeled sessions; None if none are labeled."""
    labeled = [s for s in sessions if s.is_labeled]
    if not labeled:
        return None
    total = 0.0
    for s in labeled:
        p = model.sat_prob(s.items)
        if p is None:
            return None
        total += math.log(max(p if s.satisfaction else 1.0 - p, _FLOOR))
    return total / len(labeled)


def checksum(sessions: Sequence[Session]) -> str:
    h = hashlib.sha256()
    for s in sessions:
        h.update(encode_session(s).encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class ModelScores:
    click_loglik: float | None
    sat_loglik: float | None
    utilities: list[float]
    pearson_sat: float | None
    spearman_sat: float | None

    def to_dict(self) -> dict:
        return {
            "click_loglik": self.click_loglik,
            "sat_loglik": self.sat_loglik,
            "utilities": self.utilities,
            "pearson_sat": self.pearson_sat,
            "spearman_sat": self.spearman_sat,
        }


@dataclass
class EvalReport:
    """Scores of several models on one test set."""

    models: dict[str, ModelScores]
    session_ids: list[str]
    metric_pearson: dict[str, dict[str, float | None]]
    repetition: int | None = None
    fold: int | None = None
    train_checksum: str | None = None
    test_checksum: str | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "repetition": self.repetition,
            "fold": self.fold,
            "train_checksum": self.train_checksum,
            "test_checksum": self.test_checksum,
            "session_ids": self.session_ids,
            "models": {k: v.to_dict() for k, v in self.models.items()},
            "metric_pearson": self.metric_pearson,
            "meta": self.meta,
        }

    def csv_rows(self) -> list[dict]:
        return [
            {
                "schema_version": REPORT_SCHEMA_VERSION,
                "repetition": "" if self.repetition is None else self.repetition,
                "fold": "" if self.fold is None else self.fold,
                "model": name,
                "n_test_sessions": len(self.session_ids),
                "click_loglik": _csv(sc.click_loglik),
                "sat_loglik": _csv(sc.sat_loglik),
                "pearson_sat": _csv(sc.pearson_sat),
                "spearman_sat": _csv(sc.spearman_sat),
                "train_checksum": self.train_checksum or "",
                "test_checksum": self.test_checksum or "",
            }
            for name, sc in self.models.items()
        ]


def _csv(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def evaluate_models(
    models: Mapping[str, object], sessions: Sequence[Session], conditioned: bool = False
) -> EvalReport:
    """Score every model on ``sessions`` and correlate their utilities pairwise."""
    labeled = [s for s in sessions if s.is_labeled]
    labels = [float(s.satisfaction) for s in labeled]
    scores = {}
    for name, model in models.items():
        utilities = [float(model.utility(s.items)) for s in sessions]
        lab_u = [float(model.utility(s.items)) for s in labeled]
        scores[name] = ModelScores(
            click_loglik=click_loglik(model, sessions, conditioned),
            sat_loglik=sat_loglik(model, sessions),
            utilities=utilities,
            pearson_sat=pearson(lab_u, labels) if len(labeled) >= 2 else None,
            spearman_sat=spearman(lab_u, labels) if len(labeled) >= 2 else None,
        )
    table: dict[str, dict[str, float | None]] = {name: {} for name in models}
    for a, b in combinations(models, 2):
        r = pearson(scores[a].utilities, scores[b].utilities)
        table[a][b] = r
        table[b][a] = r
    return EvalReport(scores, [s.session_id for s in sessions], table)


# ---------------------------------------------------------------- cross-validation

TrainFn = Callable[[Sequence[Session]], Mapping[str, object]]
EvalFn = Callable[[Mapping[str, object], Sequence[Session]], EvalReport]


def fold_bounds(n: int, q: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) slices of sizes differing by at most one."""
    return [(n * j // q, n * (j + 1) // q) for j in range(q)]


def tq_folds(n: int, T: int, Q: int, seed: int) -> list[list[np.ndarray]]:
    """Test-index sets for each repetition (reshuffled) and fold."""
    if T < 1 or Q < 1:
        raise ConfigurationError("T and Q must be >= 1")
    if Q > n:
        raise ConfigurationError(f"Q={Q} folds but only {n} sessions: a test fold would be empty")
    rng = np.random.default_rng(seed)
    order = np.arange(n)
    out = []
    for _ in range(T):
        order = rng.permutation(order)
        out.append([order[a:b] for a, b in fold_bounds(n, Q)])
    return out


@dataclass
class TQResult:
    outcomes: list[EvalReport]
    T: int
    Q: int
    seed: int

    def aggregate(self) -> dict:
        """Mean and std across outcomes for each model score and metric pair."""
        names = list(self.outcomes[0].models) if self.outcomes else []
        out: dict = {"models": {}, "metric_pearson": {}}
        for name in names:
            entry = {}
            for key in ("click_loglik", "sat_loglik", "pearson_sat", "spearman_sat"):
                vals = [getattr(o.models[name], key) for o in self.outcomes]
                vals = [v for v in vals if v is not None]
                entry[key] = {
                    "mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None,
                    "n": len(vals),
                }
            out["models"][name] = entry
        for a, b in combinations(names, 2):
            vals = [o.metric_pearson[a][b] for o in self.outcomes]
            vals = [v for v in vals if v is not None]
            out["metric_pearson"][f"{a}|{b}"] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "folds": {"T": self.T, "Q": self.Q, "seed": self.seed},
            "aggregate": self.aggregate(),
            "outcomes": [o.to_dict() for o in self.outcomes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        return rows_to_csv(row for o in self.outcomes for row in o.csv_rows())


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def tq_fold(
    sessions: Sequence[Session],
    T: int,
    Q: int,
    seed: int,
    train_fn: TrainFn,
    eval_fn: EvalFn = evaluate_models,
) -> TQResult:
    """Q-fold cross-validation repeated T times with a reshuffle before each repetition."""
    sessions = list(sessions)
    outcomes = []
    for i, folds in enumerate(tq_folds(len(sessions), T, Q, seed)):
        for j, test_idx in enumerate(folds):
            mask = np.ones(len(sessions), dtype=bool)
            mask[test_idx] = False
            train = [s for s, keep in zip(sessions, mask) if keep]
            test = [sessions[k] for k in test_idx]
            report = eval_fn(train_fn(train), test)
            report.repetition, report.fold = i, j
            report.train_checksum, report.test_checksum = checksum(train), checksum(test)
            outcomes.append(report)
    return TQResult(outcomes, T, Q, seed)


def heterogeneous_holdout(
    sessions: Sequence[Session], n_repeats: int, seed: int, train_fn: TrainFn
) -> dict:
    """Correlate utility with satisfaction on held-out heterogeneous SERPs.

    Each repeat holds out about 1/24 of the data containing exactly one
    heterogeneous, labeled session, trains on the rest and records that
    session's utility under every metric.
    """
    sessions = list(sessions)
    het = [i for i, s in enumerate(sessions) if s.is_heterogeneous and s.is_labeled]
    homo = [i for i, s in enumerate(sessions) if not s.is_heterogeneous]
    if not het:
        raise ConfigurationError("no labeled heterogeneous sessions to hold out")
    rng = np.random.default_rng(seed)
    test_size = max(1, round(len(sessions) / 24))
    picks = []
    while len(picks) < n_repeats:
        picks.extend(rng.permutation(het).tolist())
    pairs: dict[str, list[tuple[float, float]]] = {}
    held = []
    for pick in picks[:n_repeats]:
        others = rng.choice(homo, size=min(test_size - 1, len(homo)), replace=False).tolist() if homo else []
        test = {pick, *others}
        train = [s for i, s in enumerate(sessions) if i not in test]
        models = train_fn(train)
        target = sessions[pick]
        held.append(target.session_id)
        for name, model in models.items():
            pairs.setdefault(name, []).append((float(model.utility(target.items)), float(target.satisfaction)))
    return {
        "held_out": held,
        "pairs": {k: v for k, v in pairs.items()},
        "pearson": {k: pearson([u for u, _ in v], [s for _, s in v]) for k, v in pairs.items()},
    }


# ---------------------------------------------------------------- model factory

BASELINE_NAMES = ("PBM", "UBM", "random", "DCG")


def model_names() -> tuple[str, ...]:
    from .types import VARIANT_PRESETS

    return tuple(VARIANT_PRESETS) + BASELINE_NAMES


def train_model(
    name: str,
    sessions: Sequence[Session],
    reg_lambda: float | None = None,
    depth: int = 10,
    max_iterations: int = 500,
    calibrate: bool = True,
):
    """Fit one model by name: a CAS variant preset or a baseline.

    With ``calibrate=False`` PBM and UBM keep a zero satisfaction intercept,
    i.e. P(S=1) is the plain sigmoid of their utility.
    """
    from . import baselines
    from .training import TrainConfig, fit
    from .types import ModelVariant, VARIANT_PRESETS

    if name in VARIANT_PRESETS:
        variant = ModelVariant.preset(name, reg_lambda)
        model = fit(sessions, TrainConfig(variant=variant, max_iterations=max_iterations)).model
        return replace(model, name=name)
    if name == "PBM":
        model = baselines.PbmModel(baselines.fit_pbm(sessions, depth))
    elif name == "UBM":
        model = baselines.UbmModel(baselines.fit_ubm(sessions, depth))
    elif name == "random":
        return baselines.RandomModel(baselines.fit_random(sessions))
    elif name == "DCG":
        return baselines.DcgMetric(depth)
    else:
        raise ConfigurationError(f"unknown model {name!r}; valid names: {', '.join(model_names())}")
    if calibrate:
        model.calibrate(sessions)
    return model


def make_trainer(names: Sequence[str], **kwargs) -> TrainFn:
    """A ``train_fn`` for :func:`tq_fold` that refits every named model."""
    unknown = [n for n in names if n not in model_names()]
    if unknown:
        raise ConfigurationError(f"unknown model {unknown[0]!r}; valid names: {', '.join(model_names())}")

    def train(sessions):
        return {n: train_model(n, sessions, **kwargs) for n in names}

    return train
