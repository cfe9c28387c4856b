"""Joint maximum-likelihood fit of CAS parameters from logged sessions.

Per item the observations are a fixation flag F and a click flag C. With
examination probability ``a``, attractiveness ``alpha`` and the probability
``rho`` that an examined item leaves a fixation, the likelihood terms are::

    F=1, C=1    a * rho * alpha
    F=1, C=0    a * rho * (1 - alpha)
    F=0, C=1    a * (1 - rho) * alpha
    F=0, C=0    (1 - a) + a * (1 - rho) * (1 - alpha)

A labeled session adds log P(S=s) with P(S=1) = sigmoid(tau_0 + U), where U
uses observed clicks and treats fixated or clicked items as examined.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import lbfgs
from .features import FeatureNormalization, feature_dim, feature_matrix, fit_normalization
from .model import CasModel, log_sigmoid, sigmoid
from .types import D_GRADES, R_GRADES, CasParams, ConfigurationError, ModelVariant, Session

_TINY = 1e-300


@dataclass(frozen=True)
class TrainConfig:
    variant: ModelVariant = field(default_factory=ModelVariant)
    max_iterations: int = 500
    grad_tolerance: float = 1e-6
    lbfgs_memory: int = 10
    seed: int = 0
    init_scale: float = 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.to_dict(),
            "max_iterations": self.max_iterations,
            "grad_tolerance": self.grad_tolerance,
            "lbfgs_memory": self.lbfgs_memory,
            "seed": self.seed,
            "init_scale": self.init_scale,
        }


@dataclass
class FitResult:
    params: CasParams
    final_objective: float
    iterations: int
    converged: bool
    per_term_loglik: dict[str, float]
    penalty: float
    normalization: FeatureNormalization
    variant: ModelVariant
    message: str = ""
    objective_trace: list[float] = field(default_factory=list)

    @property
    def model(self) -> CasModel:
        return CasModel(self.params, self.variant, self.normalization)

    def to_dict(self) -> dict:
        return {
            "final_objective": self.final_objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
            "per_term_loglik": dict(self.per_term_loglik),
            "penalty": self.penalty,
            "params": self.params.to_dict(),
            "variant": self.variant.to_dict(),
        }


# ---------------------------------------------------------------- parameter layout


@dataclass(frozen=True)
class ParamLayout:
    """Slices of the flat optimisation vector for one variant."""

    variant: ModelVariant
    attention: slice
    alpha0: int
    alpha_w: slice
    fix: int
    tau_d: slice | None
    tau_r: slice | None
    tau_0: int | None
    size: int

    @classmethod
    def for_variant(cls, variant: ModelVariant) -> "ParamLayout":
        n_att = feature_dim(variant)
        i = n_att
        alpha0, alpha_w, fix = i, slice(i + 1, i + 1 + R_GRADES), i + 1 + R_GRADES
        i = fix + 1
        tau_d = tau_r = tau_0 = None
        if variant.use_sat_term:
            if variant.use_d_labels:
                tau_d = slice(i, i + D_GRADES)
                i += D_GRADES
            tau_r = slice(i, i + R_GRADES)
            i += R_GRADES
            tau_0 = i
            i += 1
        return cls(variant, slice(0, n_att), alpha0, alpha_w, fix, tau_d, tau_r, tau_0, i)

    def penalty_mask(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[[self.attention.start, self.alpha0, self.fix]] = False
        if self.tau_0 is not None:
            mask[self.tau_0] = False
        return mask

    def names(self) -> list[str]:
        from .features import feature_layout

        out = [f"attention[{n}]" for n in feature_layout(self.variant)]
        out += ["alpha_intercept"] + [f"alpha_weights[{g}]" for g in range(R_GRADES)]
        out.append("fixation_logit")
        if self.tau_d is not None:
            out += [f"tau_d[{g}]" for g in range(D_GRADES)]
        if self.tau_r is not None:
            out += [f"tau_r[{g}]" for g in range(R_GRADES)] + ["tau_0"]
        return out

    def pack(self, params: CasParams) -> np.ndarray:
        if len(params.attention_weights) != self.attention.stop:
            raise ConfigurationError(
                f"{len(params.attention_weights)} attention weights, "
                f"variant needs {self.attention.stop}"
            )
        theta = np.zeros(self.size)
        theta[self.attention] = params.attention_weights
        theta[self.alpha0] = params.alpha_intercept
        theta[self.alpha_w] = params.alpha_weights
        theta[self.fix] = params.fixation_logit
        if self.tau_d is not None:
            theta[self.tau_d] = params.tau_d
        if self.tau_r is not None:
            theta[self.tau_r] = params.tau_r
            theta[self.tau_0] = params.tau_0
        return theta

    def unpack(self, theta: np.ndarray) -> CasParams:
        zeros_d, zeros_r = (0.0,) * D_GRADES, (0.0,) * R_GRADES
        return CasParams(
            attention_weights=theta[self.attention],
            alpha_intercept=theta[self.alpha0],
            alpha_weights=theta[self.alpha_w],
            tau_d=theta[self.tau_d] if self.tau_d is not None else zeros_d,
            tau_r=theta[self.tau_r] if self.tau_r is not None else zeros_r,
            tau_0=theta[self.tau_0] if self.tau_0 is not None else 0.0,
            fixation_logit=theta[self.fix],
        )


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class TrainingData:
    """Sessions flattened into item-level arrays; items of a session are contiguous."""

    X: np.ndarray
    D: np.ndarray
    R: np.ndarray
    fixated: np.ndarray
    clicked: np.ndarray
    starts: np.ndarray
    session_of: np.ndarray
    sat: np.ndarray
    labeled: np.ndarray

    @classmethod
    def build(
        cls, sessions: Sequence[Session], variant: ModelVariant, norms: FeatureNormalization
    ) -> "TrainingData":
        if not sessions:
            raise ConfigurationError("no sessions")
        items = [it for s in sessions for it in s.items]
        sizes = np.array([len(s.items) for s in sessions])
        if np.any(sizes == 0):
            raise ConfigurationError("session without items")
        return cls(
            X=feature_matrix(items, variant, norms),
            D=np.array([it.d_ratings.expanded() for it in items]),
            R=np.array([it.r_ratings.expanded() for it in items]),
            fixated=np.array([it.mouse_fixated for it in items], dtype=bool),
            clicked=np.array([it.clicked for it in items], dtype=bool),
            starts=np.concatenate([[0], np.cumsum(sizes)[:-1]]),
            session_of=np.repeat(np.arange(len(sessions)), sizes),
            sat=np.array([bool(s.satisfaction) for s in sessions], dtype=float),
            labeled=np.array([s.is_labeled for s in sessions], dtype=bool),
        )

    @property
    def n_sessions(self) -> int:
        return len(self.starts)


def _per_session(values: np.ndarray, data: TrainingData) -> np.ndarray:
    return np.add.reduceat(values, data.starts, axis=0)


def _evaluate(theta: np.ndarray, data: TrainingData, layout: ParamLayout, want_grad: bool = True):
    """Log-likelihood terms (mouse, click, satisfaction) and the gradient of their sum."""
    F, C = data.fixated, data.clicked
    z_a = data.X @ theta[layout.attention]
    z_al = theta[layout.alpha0] + data.R @ theta[layout.alpha_w]
    z_f = theta[layout.fix]

    a, na = sigmoid(z_a), sigmoid(-z_a)
    al, nal = sigmoid(z_al), sigmoid(-z_al)
    rho, nrho = sigmoid(z_f), sigmoid(-z_f)
    log_a, log_al, log_nal = log_sigmoid(z_a), log_sigmoid(z_al), log_sigmoid(-z_al)
    log_rho, log_nrho = log_sigmoid(z_f), log_sigmoid(-z_f)

    q = na + a * nrho * nal  # P(F=0, C=0)
    seen = F | C
    item_ll = np.where(
        seen,
        log_a + np.where(F, log_rho, log_nrho) + np.where(C, log_al, log_nal),
        np.log(np.maximum(q, _TINY)),
    )
    p_nofix = na + a * nrho
    mouse_ll = np.where(F, log_a + log_rho, np.log(np.maximum(p_nofix, _TINY)))
    mouse = float(mouse_ll.sum())
    click = float(item_ll.sum()) - mouse

    g_za = np.where(seen, na, a * na * (nrho * nal - 1.0) / np.maximum(q, _TINY))
    g_zal = np.where(C, nal, np.where(F, -al, -a * nrho * al * nal / np.maximum(q, _TINY)))
    g_zf = float(np.sum(np.where(F, nrho, np.where(C, -rho, -a * nal * rho * nrho / np.maximum(q, _TINY)))))

    grad = np.zeros(layout.size) if want_grad else None
    sat = 0.0
    if layout.tau_r is not None and data.labeled.any():
        e_hat = np.where(seen, 1.0, a)
        Cf = C.astype(float)
        u_r = data.R @ theta[layout.tau_r]
        u = _per_session(Cf * u_r, data)
        if layout.tau_d is not None:
            u_d = data.D @ theta[layout.tau_d]
            u = u + _per_session(e_hat * u_d, data)
        z_s = theta[layout.tau_0] + u
        s, lab = data.sat, data.labeled
        sat_ll = np.where(s > 0, log_sigmoid(z_s), log_sigmoid(-z_s))
        sat = float(np.sum(sat_ll[lab]))
        if want_grad:
            g_s = np.where(lab, s - sigmoid(z_s), 0.0)
            g_item = g_s[data.session_of]
            grad[layout.tau_r] = (g_item * Cf) @ data.R
            grad[layout.tau_0] = g_s.sum()
            if layout.tau_d is not None:
                grad[layout.tau_d] = (g_item * e_hat) @ data.D
                g_za = g_za + np.where(seen, 0.0, g_item * a * na * u_d)

    if want_grad:
        grad[layout.attention] = g_za @ data.X
        grad[layout.alpha0] = g_zal.sum()
        grad[layout.alpha_w] = g_zal @ data.R
        grad[layout.fix] = g_zf
    return {"mouse": mouse, "click": click, "satisfaction": sat}, grad


def _penalty(theta: np.ndarray, layout: ParamLayout) -> tuple[float, np.ndarray]:
    lam = layout.variant.reg_lambda
    mask = layout.penalty_mask()
    value = 0.5 * lam * float(np.sum(theta[mask] ** 2))
    return value, np.where(mask, lam * theta, 0.0)


# ---------------------------------------------------------------- public API


def session_loglik(
    session: Session,
    params: CasParams,
    variant: ModelVariant,
    norms: FeatureNormalization | None = None,
) -> float:
    norms = norms or fit_normalization([session])
    layout = ParamLayout.for_variant(variant)
    terms, _ = _evaluate(layout.pack(params), TrainingData.build([session], variant, norms), layout, False)
    return sum(terms.values())


def total_objective(
    sessions: Sequence[Session],
    params: CasParams,
    config: TrainConfig,
    norms: FeatureNormalization | None = None,
) -> float:
    """Sum of session log-likelihoods minus the L2 penalty on non-intercept weights."""
    norms = norms or fit_normalization(sessions)
    layout = ParamLayout.for_variant(config.variant)
    theta = layout.pack(params)
    terms, _ = _evaluate(theta, TrainingData.build(sessions, config.variant, norms), layout, False)
    return sum(terms.values()) - _penalty(theta, layout)[0]


def gradient(
    sessions: Sequence[Session],
    params: CasParams,
    config: TrainConfig,
    norms: FeatureNormalization | None = None,
) -> np.ndarray:
    """Analytic gradient of :func:`total_objective` over the variant's flat parameter vector."""
    norms = norms or fit_normalization(sessions)
    layout = ParamLayout.for_variant(config.variant)
    theta = layout.pack(params)
    _, grad = _evaluate(theta, TrainingData.build(sessions, config.variant, norms), layout)
    return grad - _penalty(theta, layout)[1]


def fit(
    sessions: Sequence[Session],
    config: TrainConfig = TrainConfig(),
    norms: FeatureNormalization | None = None,
) -> FitResult:
    """Maximize the penalized joint likelihood with L-BFGS."""
    if not sessions:
        raise ConfigurationError("no sessions")
    variant = config.variant
    problems = variant.violations()
    if problems:
        raise ConfigurationError("; ".join(problems))
    if variant.use_sat_term and not any(s.is_labeled for s in sessions):
        warnings.warn("no labeled sessions: satisfaction weights stay at their initial values")
    norms = norms or fit_normalization(sessions)
    layout = ParamLayout.for_variant(variant)
    data = TrainingData.build(sessions, variant, norms)

    theta0 = np.zeros(layout.size)
    if config.init_scale > 0:
        theta0 = np.random.default_rng(config.seed).normal(0.0, config.init_scale, layout.size)

    def negative(theta):
        terms, grad = _evaluate(theta, data, layout)
        pen, pen_grad = _penalty(theta, layout)
        return -(sum(terms.values()) - pen), -(grad - pen_grad)

    # collinear features (intercept vs. class one-hots, rank vs. offset) make the
    # problem badly conditioned; start L-BFGS from the local curvature
    h0 = lbfgs.inverse_hessian_guess(negative, theta0)
    res = lbfgs.minimize(
        negative, theta0, config.max_iterations, config.grad_tolerance, config.lbfgs_memory, h0=h0
    )
    terms, _ = _evaluate(res.x, data, layout, want_grad=False)
    penalty, _ = _penalty(res.x, layout)
    return FitResult(
        params=layout.unpack(res.x),
        final_objective=-res.fun,
        iterations=res.iterations,
        converged=res.converged,
        per_term_loglik=terms,
        penalty=penalty,
        normalization=norms,
        variant=variant,
        message=res.message,
        objective_trace=[-f for f in res.trace],
    )
