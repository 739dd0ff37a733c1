"""Reconstruction objectives and the candidate optimization loop.

All three objectives share the stationarity term

    || theta - sum_i lam_i * grad_theta f_i(x_i) ||^2

and differ in the scalar ``f_i``: ``y_i * Phi`` (binary), the margin gap
``Phi_{y_i} - max_{j != y_i} Phi_j`` (multiclass) or ``Phi`` itself with
free-signed ``lam_i`` (general loss, for models trained with weight decay).
The inner gradient uses the smooth ReLU backward so that the objective has a
useful derivative with respect to the candidates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import EXACT, BackwardMode, Var
from .models import (MarginGap, ModelSpec, Output, ParamVector, SignedOutput,
                     forward_graph, weight_leaves, weighted_param_gradient)

OBJECTIVES = ("binary", "multiclass", "general", "multiclass_pairs")


class ReconstructionFailed(FloatingPointError):
    pass


@dataclass(frozen=True)
class ReconstructionConfig:
    objective: str = "general"
    m: int = 20
    sigma_x: float = 1e-3
    lambda_min: float = 0.1
    alpha: float = 100.0
    lr: float = 1e-2
    iterations: int = 50_000
    seed: int = 0
    lambda_init: float = 0.5
    # exact: the outer gradient is the true derivative of the objective
    # smooth: also use the sigmoid surrogate for forward ReLUs in the outer pass
    outer_backward: str = "exact"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not self.sigma_x > 0:
            raise ValueError("sigma_x must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.objective != "general" and not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive")
        if self.outer_backward not in ("exact", "smooth"):
            raise ValueError("outer_backward must be 'exact' or 'smooth'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ReconstructionConfig:
        return cls(**d)


@dataclass
class CandidateSet:
    """Candidate inputs ``X`` (m, d), dual variables ``lam`` and fixed labels ``Y``.

    ``Y`` holds +-1 for the binary objective and class indices otherwise.
    """

    X: np.ndarray
    lam: np.ndarray
    Y: np.ndarray
    history: list = field(default_factory=list)
    final_loss: float = math.nan

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @staticmethod
    def concat(sets) -> CandidateSet:
        sets = list(sets)
        return CandidateSet(np.concatenate([s.X for s in sets]),
                            np.concatenate([s.lam.reshape(s.m, -1) for s in sets]).squeeze(-1)
                            if all(s.lam.ndim == 1 for s in sets)
                            else np.concatenate([s.lam for s in sets]),
                            np.concatenate([s.Y for s in sets]))


def default_candidate_count(n: int) -> int:
    """Twice the number of training samples."""
    if n < 1:
        raise ValueError("n must be positive")
    return 2 * n


def balanced_labels(m: int, n_classes: int, objective: str) -> np.ndarray:
    classes = max(n_classes, 2)
    if m % classes:
        raise ValueError(f"m={m} is not divisible by the {classes} classes")
    y = np.arange(m) % classes
    if objective in ("binary", "general"):
        return np.where(y == 0, 1, -1)
    return y


def init_candidates(cfg: ReconstructionConfig, d: int, n_classes: int,
                    seed: int | None = None) -> CandidateSet:
    """X ~ N(0, sigma_x^2 I), labels balanced over classes, lam constant."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    Y = balanced_labels(cfg.m, n_classes, cfg.objective)
    X = cfg.sigma_x * rng.standard_normal((cfg.m, d))
    if cfg.objective == "multiclass_pairs":
        lam = np.full((cfg.m, max(n_classes, 2)), cfg.lambda_init)
    else:
        lam = np.full(cfg.m, cfg.lambda_init)
    return CandidateSet(X, lam, Y)


def prior_penalty(X):
    """sum over entries of max(max(x - 1, 0), max(-x - 1, 0))."""
    as_float = not isinstance(X, Var)
    X = ad.constant(X)
    out = ad.maximum(ad.maximum(X - 1.0, 0.0), ad.maximum(-X - 1.0, 0.0)).sum()
    return float(out.value) if as_float else out


def lambda_penalty(lam, lambda_min: float, mask=None):
    """sum_i max(-lam_i, -lambda_min)."""
    if not lambda_min > 0:
        raise ValueError("lambda_min must be positive")
    as_float = not isinstance(lam, Var)
    terms = ad.maximum(-ad.constant(lam), -lambda_min)
    if mask is not None:
        terms = terms * mask
    out = terms.sum()
    return float(out.value) if as_float else out


def _pair_coefficients(out: Var, lam: Var, Y):
    """Coefficient matrix so that sum(out * M) = sum_{i, j != y_i} lam_ij (Phi_y - Phi_j)."""
    m, c = out.shape
    mask = np.ones((m, c))
    mask[np.arange(m), Y] = 0.0
    masked = lam * mask
    own = ad.scatter(masked.sum(axis=1), Y, c)
    return own - masked, mask


def stationary_residual_nodes(objective: str, spec: ModelSpec, leaves, X, lam, Y,
                              mode: BackwardMode):
    """Per-tensor ``theta - sum_i lam_i grad_theta f_i(x_i)`` nodes."""
    C = spec.num_outputs
    if objective in ("binary", "general") and C != 1:
        raise ValueError(f"{objective} objective needs a single-output model, got {C} outputs")
    if objective in ("multiclass", "multiclass_pairs") and C < 2:
        raise ValueError(f"{objective} objective needs at least two outputs")
    if objective == "multiclass_pairs":
        out = forward_graph(spec, leaves, X)
        coeff, _ = _pair_coefficients(out, lam, np.asarray(Y, dtype=np.int64))
        grads = ad.gradient((out * coeff).sum(), leaves, mode)
    else:
        functional = {"binary": SignedOutput(Y), "general": Output(0),
                      "multiclass": MarginGap(Y)}[objective]
        grads = weighted_param_gradient(spec, leaves, X, lam, functional, mode)
    return [w - g for w, g in zip(leaves, grads)]


def rec_loss(objective: str, spec: ModelSpec, params: ParamVector, X, lam, Y,
             alpha: float, lambda_min: float = 0.1, penalties: bool = True) -> Var:
    """Reconstruction objective as a graph node, differentiable in ``X`` and ``lam``.

    ``penalties=False`` drops both the dual-variable and the box penalty.
    The general-loss objective never includes the dual-variable penalty.
    """
    leaves = weight_leaves(params)
    resid = stationary_residual_nodes(objective, spec, leaves, ad.constant(X),
                                      ad.constant(lam), Y, BackwardMode.smooth(alpha))
    total = sum((r * r).sum() for r in resid)
    if not penalties:
        return total
    if objective in ("binary", "multiclass"):
        total = total + lambda_penalty(ad.constant(lam), lambda_min)
    elif objective == "multiclass_pairs":
        m, c = np.shape(lam)
        mask = np.ones((m, c))
        mask[np.arange(m), np.asarray(Y, dtype=np.int64)] = 0.0
        total = total + lambda_penalty(ad.constant(lam), lambda_min, mask)
    return total + prior_penalty(ad.constant(X))


def reconstruct(spec: ModelSpec, params: ParamVector, cfg: ReconstructionConfig,
                record_every: int = 0) -> CandidateSet:
    """Jointly optimize candidates and dual variables with Adam.

    Returns the iterate with the lowest objective value seen, including the
    initial one.
    """
    if not np.all(np.isfinite(params.theta)):
        raise ValueError("parameters are not finite")
    cands = init_candidates(cfg, spec.input_dim, spec.num_outputs)
    X, lam, Y = cands.X, cands.lam, cands.Y
    outer = EXACT if cfg.outer_backward == "exact" else BackwardMode.smooth(cfg.alpha)
    state = [(np.zeros_like(X), np.zeros_like(X)), (np.zeros_like(lam), np.zeros_like(lam))]
    best = (math.inf, X, lam)
    history = []
    for it in range(cfg.iterations + 1):
        xv, lv = ad.variable(X), ad.variable(lam)
        loss = rec_loss(cfg.objective, spec, params, xv, lv, Y, cfg.alpha, cfg.lambda_min)
        value = float(loss.value)
        if not math.isfinite(value):
            raise ReconstructionFailed(f"non-finite objective at iteration {it}")
        if value < best[0]:
            best = (value, X, lam)
        if record_every and it % record_every == 0:
            history.append((it, value))
        if it == cfg.iterations:
            break
        gx, gl = ad.gradient(loss, [xv, lv], outer)
        t = it + 1
        new = []
        for (m1, m2), p, g in zip(state, (X, lam), (gx.value, gl.value)):
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            step = (m1 / (1 - cfg.beta1 ** t)) / (np.sqrt(m2 / (1 - cfg.beta2 ** t)) + cfg.eps)
            new.append(((m1, m2), p - cfg.lr * step))
        state = [s for s, _ in new]
        X, lam = new[0][1], new[1][1]
    return CandidateSet(best[1], best[2], Y, history, best[0])
