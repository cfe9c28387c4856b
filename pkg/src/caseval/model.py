"""CAS model equations: examination, attractiveness, clicks, utility, satisfaction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FeatureNormalization, FeatureVector, feature_dim, feature_matrix
from .types import (
    D_GRADES,
    R_GRADES,
    CasParams,
    ConfigurationError,
    ModelVariant,
    SerpItem,
    Session,
)

MODEL_FORMAT_VERSION = 1


def sigmoid(x):
    """Logistic function, evaluated without overflow for either sign."""
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """log(sigmoid(x)) = -log1p(exp(-x)), stable for large |x|."""
    x = np.asarray(x, dtype=float)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def _features(features) -> np.ndarray:
    return features.values if isinstance(features, FeatureVector) else np.asarray(features, float)


def examination_prob(features: FeatureVector | np.ndarray, params: CasParams) -> float:
    x = _features(features)
    w = np.asarray(params.attention_weights)
    if x.shape[-1] != w.shape[0]:
        raise ConfigurationError(
            f"feature dimension {x.shape[-1]} does not match {w.shape[0]} attention weights"
        )
    return sigmoid(x @ w)


def attractiveness(r, params: CasParams) -> float:
    """P(click | examined) as a logistic function of the R-rating histogram."""
    counts = r.expanded() if hasattr(r, "expanded") else np.asarray(r, float)
    if counts.shape[-1] != R_GRADES:
        raise ConfigurationError(f"R histogram must have {R_GRADES} grades")
    return sigmoid(params.alpha_intercept + counts @ np.asarray(params.alpha_weights))


def click_prob(exam_p: float, attr_p: float) -> float:
    return exam_p * attr_p


def satisfaction_prob(utility: float, params: CasParams) -> float:
    return sigmoid(params.tau_0 + utility)


@dataclass(frozen=True)
class SerpArrays:
    """Per-item arrays of one SERP, computed once and reused by every equation."""

    X: np.ndarray
    D: np.ndarray
    R: np.ndarray
    clicked: np.ndarray
    fixated: np.ndarray

    @classmethod
    def build(cls, items: Sequence[SerpItem], variant: ModelVariant, norms: FeatureNormalization):
        return cls(
            X=feature_matrix(items, variant, norms),
            D=np.array([it.d_ratings.expanded() for it in items]).reshape(-1, D_GRADES),
            R=np.array([it.r_ratings.expanded() for it in items]).reshape(-1, R_GRADES),
            clicked=np.array([it.clicked for it in items], dtype=bool),
            fixated=np.array([it.mouse_fixated for it in items], dtype=bool),
        )


def _check_dims(arr: SerpArrays, params: CasParams) -> None:
    if arr.X.shape[1] != len(params.attention_weights):
        raise ConfigurationError(
            f"feature dimension {arr.X.shape[1]} does not match "
            f"{len(params.attention_weights)} attention weights"
        )


def _item_probs(arr: SerpArrays, params: CasParams) -> tuple[np.ndarray, np.ndarray]:
    _check_dims(arr, params)
    eps = sigmoid(arr.X @ np.asarray(params.attention_weights))
    alpha = sigmoid(params.alpha_intercept + arr.R @ np.asarray(params.alpha_weights))
    return np.atleast_1d(eps), np.atleast_1d(alpha)


def utility_training(
    session: Session, params: CasParams, variant: ModelVariant, norms: FeatureNormalization
) -> float:
    """Utility with observed behaviour plugged in.

    Clicks count as certain; an item is taken as examined when it was fixated
    or clicked, otherwise its modelled examination probability is used.
    """
    arr = SerpArrays.build(session.items, variant, norms)
    eps, _ = _item_probs(arr, params)
    observed = arr.fixated | arr.clicked
    e_hat = np.where(observed, 1.0, eps)
    u = float(np.dot(arr.clicked.astype(float), arr.R @ np.asarray(params.tau_r)))
    if variant.use_d_labels:
        u += float(np.dot(e_hat, arr.D @ np.asarray(params.tau_d)))
    return u


def _metric_utility(arr: SerpArrays, params: CasParams, variant: ModelVariant) -> float:
    eps, alpha = _item_probs(arr, params)
    u_r = arr.R @ np.asarray(params.tau_r)
    per_item = alpha * u_r
    if variant.use_d_labels:
        per_item = per_item + arr.D @ np.asarray(params.tau_d)
    return float(np.dot(eps, per_item))


def metric_utility(
    serp: Sequence[SerpItem], params: CasParams, variant: ModelVariant, norms: FeatureNormalization
) -> float:
    """Offline CAS metric: expected utility from ratings and layout only."""
    return _metric_utility(SerpArrays.build(serp, variant, norms), params, variant)


@dataclass(frozen=True)
class SessionPrediction:
    exam_probs: np.ndarray
    click_probs: np.ndarray
    utility: float
    sat_prob: float


def predict_session(
    session: Session, params: CasParams, variant: ModelVariant, norms: FeatureNormalization
) -> SessionPrediction:
    """Generative prediction: no behavioural observation of ``session`` is used."""
    arr = SerpArrays.build(session.items, variant, norms)
    eps, alpha = _item_probs(arr, params)
    u = _metric_utility(arr, params, variant)
    return SessionPrediction(eps, eps * alpha, u, satisfaction_prob(u, params))


@dataclass(frozen=True)
class CasModel:
    """A fitted CAS model: parameters, the variant they belong to and feature scaling."""

    params: CasParams
    variant: ModelVariant
    normalization: FeatureNormalization
    name: str = "CAS"

    def __post_init__(self):
        if len(self.params.attention_weights) != feature_dim(self.variant):
            raise ConfigurationError(
                f"model has {len(self.params.attention_weights)} attention weights, "
                f"variant needs {feature_dim(self.variant)}"
            )

    def arrays(self, items: Sequence[SerpItem]) -> SerpArrays:
        return SerpArrays.build(items, self.variant, self.normalization)

    def predict(self, session: Session) -> SessionPrediction:
        return predict_session(session, self.params, self.variant, self.normalization)

    def utility(self, serp: Sequence[SerpItem]) -> float:
        return metric_utility(serp, self.params, self.variant, self.normalization)

    def sat_prob(self, serp: Sequence[SerpItem]) -> float:
        return satisfaction_prob(self.utility(serp), self.params)

    def click_probs(self, session: Session, conditioned: bool = False) -> np.ndarray:
        """Per-item click probabilities.

        With ``conditioned`` the probability is conditioned on the session's
        observed fixation of each item (a diagnostic, not a fair comparison
        with click-only models).
        """
        arr = self.arrays(session.items)
        eps, alpha = _item_probs(arr, self.params)
        if not conditioned:
            return eps * alpha
        rho = sigmoid(self.params.fixation_logit)
        p_nofix = 1.0 - eps * rho
        return np.where(arr.fixated, alpha, eps * (1.0 - rho) * alpha / p_nofix)

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "type": "cas",
            "name": self.name,
            "variant": self.variant.to_dict(),
            "params": self.params.to_dict(),
            "normalization": self.normalization.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CasModel":
        if d.get("type") != "cas":
            raise ConfigurationError(f"not a CAS model file (type={d.get('type')!r})")
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported model format {d.get('format_version')!r}")
        return cls(
            params=CasParams.from_dict(d["params"]),
            variant=ModelVariant.from_dict(d["variant"]),
            normalization=FeatureNormalization.from_dict(d["normalization"]),
            name=d.get("name", "CAS"),
        )

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CasModel":
        return cls.from_dict(json.loads(Path(path).read_text()))
