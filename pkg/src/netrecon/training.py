"""Full-batch gradient descent with optional weight decay, and convergence checks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import EXACT
from .data_io import Dataset
from .models import Dense, ModelSpec, ParamVector, Relu, forward_graph, init_params, network_forward

LOSS_KINDS = ("bce", "ce", "mse", "lp", "huber")


class TrainingDiverged(FloatingPointError):
    pass


class Undefined(ValueError):
    pass


@dataclass(frozen=True)
class Loss:
    """Per-sample loss. ``p`` is used by ``lp``, ``delta`` by ``huber``."""

    kind: str = "bce"
    p: float = 2.0
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.kind == "lp" and not self.p > 1:
            raise ValueError("Lp loss needs p > 1")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("Huber loss needs delta > 0")


def per_sample_loss(loss: Loss, out, labels) -> ad.Var:
    """Loss of each row of the (n, C) output node; returns an (n,) node."""
    out = ad.constant(out)
    n, c = out.shape
    labels = np.asarray(labels)
    if loss.kind == "ce":
        y = labels.astype(np.int64)
        if np.any((y < 0) | (y >= c)):
            raise ValueError(f"class label out of range for {c} outputs")
        return ad.logsumexp(out) - ad.pick(out, y)
    if c != 1:
        raise ValueError(f"{loss.kind} loss needs a single output, got {c}")
    phi = ad.reshape(out, (n,))
    y = labels.astype(np.float64)
    if loss.kind == "bce":
        return ad.softplus(-(phi * y))
    r = phi - y
    if loss.kind == "mse":
        return r * r
    if loss.kind == "lp":
        return ad.vabs(r) ** loss.p
    inside = (np.abs(r.value) <= loss.delta).astype(np.float64)
    quad = 0.5 * (r * r)
    lin = loss.delta * (ad.vabs(r) - 0.5 * loss.delta)
    return inside * quad + (1.0 - inside) * lin


def primal_loss(loss: Loss, output, label) -> float:
    out = np.atleast_1d(np.asarray(output, dtype=np.float64))[None, :]
    return float(per_sample_loss(loss, out, np.atleast_1d(label)).value[0])


@dataclass(frozen=True)
class TrainConfig:
    loss: Loss = field(default_factory=Loss)
    lr: float = 0.01
    epochs: int = 1000
    weight_decay: float = 0.0
    init: str = "standard"
    init_scale: float = 1e-4
    seed: int = 0
    grad_tol: float = 1e-9
    log_every: int = 100
    # "gd" is the supported path; "momentum" is experimental
    optimizer: str = "gd"
    momentum: float = 0.9

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.optimizer not in ("gd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["loss"] = Loss(**d.get("loss", {}))
        return cls(**d)


@dataclass
class TrainTrace:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    train_err: list = field(default_factory=list)
    min_margin: list = field(default_factory=list)

    def record(self, epoch, loss, grad_norm, train_err, min_margin):
        self.epoch.append(epoch)
        self.loss.append(loss)
        self.grad_norm.append(grad_norm)
        self.train_err.append(train_err)
        self.min_margin.append(min_margin)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "grad_norm", "train_err", "min_margin"])
        for row in zip(self.epoch, self.loss, self.grad_norm, self.train_err, self.min_margin):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def margin(spec: ModelSpec, params: ParamVector, x, y):
    """y * Phi(x) for one output, Phi_y - max_{j != y} Phi_j otherwise."""
    out = network_forward(spec, params, np.atleast_2d(x))
    y = np.atleast_1d(y)
    if spec.num_outputs == 1:
        m = np.asarray(y, dtype=np.float64) * out
    else:
        y = y.astype(np.int64)
        rows = np.arange(out.shape[0])
        own = out[rows, y]
        masked = out.copy()
        masked[rows, y] = -np.inf
        m = own - masked.max(axis=1)
    return float(m[0]) if np.ndim(x) == 1 else m


def train_error(spec: ModelSpec, params: ParamVector, ds: Dataset) -> float:
    out = network_forward(spec, params, ds.X)
    if spec.num_outputs == 1:
        return float(np.mean(np.sign(out) != np.sign(ds.labels)))
    return float(np.mean(np.argmax(out, axis=1) != ds.labels))


def total_loss_graph(spec, leaves, ds: Dataset, loss: Loss, weight_decay: float):
    out = forward_graph(spec, leaves, ds.X)
    total = per_sample_loss(loss, out, ds.labels).sum()
    if weight_decay:
        total = total + (0.5 * weight_decay) * sum((w * w).sum() for w in leaves)
    return total


def _loss_and_dphi(loss: Loss, out: np.ndarray, labels):
    """Per-sample losses and d loss / d output for an (n, C) output array."""
    n, c = out.shape
    if loss.kind == "ce":
        y = np.asarray(labels, dtype=np.int64)
        top = out.max(axis=1, keepdims=True)
        z = np.exp(out - top)
        s = z.sum(axis=1, keepdims=True)
        values = (top[:, 0] + np.log(s[:, 0])) - out[np.arange(n), y]
        d = z / s
        d[np.arange(n), y] -= 1.0
        return values, d
    phi = out[:, 0]
    y = np.asarray(labels, dtype=np.float64)
    if loss.kind == "bce":
        values = np.logaddexp(0.0, -y * phi)
        d = -y * expit(-y * phi)
    else:
        r = phi - y
        if loss.kind == "mse":
            values, d = r * r, 2.0 * r
        elif loss.kind == "lp":
            a = np.abs(r)
            values, d = a ** loss.p, loss.p * a ** (loss.p - 1.0) * np.sign(r)
        else:
            inside = np.abs(r) <= loss.delta
            values = np.where(inside, 0.5 * r * r, loss.delta * (np.abs(r) - 0.5 * loss.delta))
            d = np.where(inside, r, loss.delta * np.sign(r))
    return values, d[:, None]


def _is_plain_mlp(spec: ModelSpec) -> bool:
    return all(isinstance(layer, (Dense, Relu)) for layer in spec.layers)


class _MLPKernel:
    """Hand-written forward/backward for Dense/ReLU stacks.

    Works on views into one flat parameter buffer and one flat gradient
    buffer, so an epoch allocates no parameter-sized arrays. Cross-checked
    against the tape in the test suite.
    """

    def __init__(self, spec: ModelSpec, theta: np.ndarray, layout):
        self.spec = spec
        self.theta = theta
        self.grad = np.empty_like(theta)
        self.params = [theta[off:off + int(np.prod(s))].reshape(s) for _, _, off, s in layout]
        self.grads = [self.grad[off:off + int(np.prod(s))].reshape(s) for _, _, off, s in layout]
        self.scratch = np.empty_like(theta)

    def __call__(self, X, labels, loss, weight_decay):
        acts, h, k = [], X, 0
        for layer in self.spec.layers:
            if isinstance(layer, Dense):
                acts.append((k, h, layer.bias))
                h = h @ self.params[k].T
                k += 1
                if layer.bias:
                    h = h + self.params[k]
                    k += 1
            else:
                acts.append((None, h > 0, None))
                h = np.maximum(h, 0.0)
        values, g = _loss_and_dphi(loss, h, labels)
        for k, saved, bias in reversed(acts):
            if k is None:
                g = g * saved
                continue
            if bias:
                np.sum(g, axis=0, out=self.grads[k + 1])
            np.matmul(g.T, saved, out=self.grads[k])
            if k > 0:
                g = g @ self.params[k]
        total = float(values.sum())
        if weight_decay:
            total += 0.5 * weight_decay * float(self.theta @ self.theta)
            np.multiply(self.theta, weight_decay, out=self.scratch)
            self.grad += self.scratch
        return total, self.grad


def loss_and_grad(spec, params: ParamVector, ds: Dataset, loss: Loss, weight_decay: float,
                  fast: bool = True):
    """Total regularized loss and its flat gradient (exact ReLU backward)."""
    if fast and _is_plain_mlp(spec):
        total, grad = _MLPKernel(spec, params.theta.copy(), params.layout)(
            ds.X, ds.labels, loss, weight_decay)
        return total, grad.copy()
    leaves = [ad.variable(a) for a in params.arrays()]
    total = total_loss_graph(spec, leaves, ds, loss, weight_decay)
    grads = ad.gradient(total, leaves, EXACT)
    return float(total.value), np.concatenate([g.value.ravel() for g in grads])


def train(spec: ModelSpec, ds: Dataset, cfg: TrainConfig, params: ParamVector | None = None):
    """Minimize ``sum_i loss_i + weight_decay/2 * |theta|^2`` by full-batch descent.

    Stops early once the gradient norm drops below ``cfg.grad_tol``.
    """
    if ds.n == 0:
        raise ValueError("empty dataset")
    if params is None:
        params = init_params(spec, cfg.init, cfg.seed, cfg.init_scale)
    theta = params.theta.copy()
    layout = params.layout
    if _is_plain_mlp(spec):
        kernel = _MLPKernel(spec, theta, layout)
        step = lambda: kernel(ds.X, ds.labels, cfg.loss, cfg.weight_decay)  # noqa: E731
    else:
        step = lambda: loss_and_grad(spec, ParamVector(theta, layout), ds,  # noqa: E731
                                     cfg.loss, cfg.weight_decay)
    velocity = np.zeros_like(theta) if cfg.optimizer == "momentum" else None
    update = np.empty_like(theta)
    trace = TrainTrace()
    epoch = 0
    while True:
        with np.errstate(over="ignore", invalid="ignore"):
            value, grad = step()
            gnorm = math.sqrt(float(grad @ grad))
        if not (math.isfinite(value) and math.isfinite(gnorm)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={cfg.lr})")
        done = gnorm < cfg.grad_tol or epoch == cfg.epochs
        if epoch % cfg.log_every == 0 or done:
            current = ParamVector(theta.copy(), layout)
            m = margin(spec, current, ds.X, ds.labels)
            trace.record(epoch, value, gnorm, train_error(spec, current, ds), float(np.min(m)))
        if done:
            break
        if velocity is not None:
            velocity *= cfg.momentum
            velocity += grad
            np.multiply(velocity, cfg.lr, out=update)
        else:
            np.multiply(grad, cfg.lr, out=update)
        theta -= update
        epoch += 1
    return ParamVector(theta.copy(), layout), trace


@dataclass(frozen=True)
class StationarityReport:
    residual: float
    coefficients: np.ndarray


def stationarity_residual(spec: ModelSpec, params: ParamVector, ds: Dataset,
                          loss: Loss, weight_decay: float) -> StationarityReport:
    """Relative residual of ``theta = sum_i c_i grad_theta Phi(x_i)``.

    At a stationary point of the regularized loss the coefficients are
    ``c_i = -(1/weight_decay) * dloss_i/dPhi``.
    """
    if not weight_decay > 0:
        raise Undefined("stationarity coefficients need a positive weight decay")
    outputs = np.atleast_2d(network_forward(spec, params, ds.X).T).T
    out = ad.variable(outputs)
    (dl,) = ad.gradient(per_sample_loss(loss, out, ds.labels).sum(), [out])
    coeffs = -dl.value / weight_decay
    leaves = [ad.variable(a) for a in params.arrays()]
    pred = forward_graph(spec, leaves, ds.X)
    grads = ad.gradient((pred * coeffs).sum(), leaves, EXACT)
    g = np.concatenate([v.value.ravel() for v in grads])
    resid = np.linalg.norm(params.theta - g) / np.linalg.norm(params.theta)
    c = coeffs[:, 0] if coeffs.shape[1] == 1 else coeffs
    return StationarityReport(float(resid), c)
