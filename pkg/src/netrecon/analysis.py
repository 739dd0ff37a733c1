"""Match candidates to training samples and score them with SSIM.

For every training sample, candidates are ranked by a normalized L2 distance
(both vectors standardized to zero mean and unit sample variance). The
closest candidates within a factor ``B`` of the nearest one are averaged,
shifted by the training-set mean image and stretched to [0, 1]. The training
image gets the same stretch before the two are compared.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .data_io import Dataset
from .models import ModelSpec, ParamVector, network_forward
from .training import Loss, margin, per_sample_loss


class Degenerate(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisConfig:
    B: float = 1.1
    tau: float = 0.4
    win_size: int = 11
    win_sigma: float = 1.5
    K1: float = 0.01
    K2: float = 0.03
    # "inf": a zero-variance vector is infinitely far from everything
    degenerate: str = "inf"

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.degenerate not in ("inf", "raise"):
            raise ValueError("degenerate must be 'inf' or 'raise'")

    def to_dict(self) -> dict:
        return asdict(self)


def pairwise_normalized_l2(A, B, degenerate: str = "inf") -> np.ndarray:
    """Distances between rows of ``A`` (n, d) and rows of ``B`` (m, d).

    Uses ``|za - zb|^2 = 2 (d - 1) (1 - r)`` with ``r`` the Pearson correlation,
    which is the squared distance between the standardized vectors when the
    standard deviation uses the ``d - 1`` denominator.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    d = A.shape[1]
    if d < 2 or B.shape[1] != d:
        raise ValueError("vectors must have equal dimension of at least 2")
    Ac = A - A.mean(axis=1, keepdims=True)
    Bc = B - B.mean(axis=1, keepdims=True)
    sa = np.einsum("ij,ij->i", Ac, Ac)
    sb = np.einsum("ij,ij->i", Bc, Bc)
    bad_a, bad_b = sa == 0, sb == 0
    if degenerate == "raise" and (bad_a.any() or bad_b.any()):
        raise Degenerate("zero-variance vector")
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (Ac @ Bc.T) / np.sqrt(np.outer(sa, sb))
    dist = np.maximum(2.0 * (d - 1) * (1.0 - r), 0.0)
    dist[bad_a, :] = np.inf
    dist[:, bad_b] = np.inf
    return dist


def normalized_l2(x, y, degenerate: str = "inf") -> float:
    return float(pairwise_normalized_l2(np.ravel(x)[None], np.ravel(y)[None], degenerate)[0, 0])


def prefix_count(sorted_dists, B: float) -> int:
    """Length of the longest prefix with every distance <= B * nearest."""
    limit = B * sorted_dists[0]
    return int(np.searchsorted(sorted_dists, limit, side="right")) or 1


def aggregate_matches(train_X, candidates, B: float = 1.1, degenerate: str = "inf"):
    """Average of the nearest candidates for each training sample.

    Returns ``(x_hat, counts, nn_dist)``: the (n, d) averaged candidates, the
    number of candidates averaged per sample and the nearest distance.
    Candidates are ordered stably by (distance, candidate index).
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.shape[0] == 0:
        raise ValueError("no candidates")
    if B < 1:
        raise ValueError("B must be at least 1")
    dist = pairwise_normalized_l2(train_X, candidates, degenerate)
    n = dist.shape[0]
    x_hat = np.empty((n, candidates.shape[1]))
    counts = np.empty(n, dtype=np.int64)
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        c = prefix_count(dist[i, order], B)
        x_hat[i] = candidates[order[:c]].mean(axis=0)
        counts[i] = c
    return x_hat, counts, dist.min(axis=1)


def rescale_to_image(x_raw, mean_image) -> np.ndarray:
    """Add the mean image and stretch min/max to [0, 1]; constant -> 0.5."""
    v = np.asarray(x_raw, dtype=np.float64) + np.asarray(mean_image, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, window):
    k = window.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, K1: float = 0.01,
         K2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid Gaussian windows.

    ``a`` and ``b`` are (H, W) or (channels, H, W); channel scores are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError("expected (H, W) or (C, H, W) images")
    if a.shape[1] < win_size or a.shape[2] < win_size:
        raise ValueError(f"image {a.shape[1:]} is smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    C1, C2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        vx = _filter_valid(x * x, w) - mx * mx
        vy = _filter_valid(y * y, w) - my * my
        cxy = _filter_valid(x * y, w) - mx * my
        smap = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
        scores.append(smap.mean())
    return float(np.mean(scores))


@dataclass
class MatchReport:
    sample_id: np.ndarray
    label: np.ndarray
    axis_value: np.ndarray
    nn_distance: np.ndarray
    count: np.ndarray
    ssim: np.ndarray
    reconstructions: np.ndarray
    tau: float = 0.4
    axis: str = "margin"

    def good_count(self, tau: float | None = None) -> int:
        return int(np.sum(self.ssim > (self.tau if tau is None else tau)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "label", "axis_value", "nn_distance", "C", "ssim", "good"])
        for i in range(len(self.sample_id)):
            w.writerow([int(self.sample_id[i]), _fmt_label(self.label[i]),
                        repr(float(self.axis_value[i])), repr(float(self.nn_distance[i])),
                        int(self.count[i]), repr(float(self.ssim[i])),
                        str(bool(self.ssim[i] > self.tau)).lower()])
        return buf.getvalue()

    def to_svg(self, width: int = 480, height: int = 360) -> str:
        return scatter_svg(self.axis_value, self.ssim, self.tau,
                           "margin" if self.axis == "margin" else "per-sample loss",
                           width, height)


def _fmt_label(v):
    f = float(v)
    return str(int(f)) if f.is_integer() else repr(f)


def axis_values(spec: ModelSpec, params: ParamVector, ds: Dataset, axis: str = "margin",
                loss: Loss | None = None) -> np.ndarray:
    if axis == "margin":
        return np.atleast_1d(margin(spec, params, ds.X, ds.labels))
    if axis == "loss":
        if loss is None:
            raise ValueError("axis='loss' needs the training loss")
        out = np.atleast_2d(network_forward(spec, params, ds.X).T).T
        return per_sample_loss(loss, out, ds.labels).value
    raise ValueError(f"unknown axis {axis!r}")


def build_report(spec: ModelSpec, params: ParamVector, ds: Dataset, candidates,
                 cfg: AnalysisConfig = AnalysisConfig(), axis: str = "margin",
                 loss: Loss | None = None) -> MatchReport:
    x_hat, counts, nn = aggregate_matches(ds.X, candidates, cfg.B, cfg.degenerate)
    train_images = ds.images()
    recon = np.empty_like(train_images)
    scores = np.empty(ds.n)
    for i in range(ds.n):
        recon[i] = rescale_to_image(x_hat[i], ds.mean_image).reshape(train_images.shape[1:])
        target = rescale_to_image(train_images[i], 0.0)
        scores[i] = ssim(target, recon[i], cfg.win_size, cfg.win_sigma, cfg.K1, cfg.K2)
    return MatchReport(np.arange(ds.n), np.asarray(ds.labels), axis_values(spec, params, ds, axis, loss),
                       nn, counts, scores, recon, cfg.tau, axis)


def scatter_svg(xs, ys, tau: float, xlabel: str, width: int = 480, height: int = 360) -> str:
    """Standalone SVG scatter of SSIM against ``xs`` with a dashed line at ``tau``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    left, right, top, bottom = 56, 16, 16, 44
    pw, ph = width - left - right, height - top - bottom
    finite = xs[np.isfinite(xs)]
    x0, x1 = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    y0, y1 = min(0.0, float(np.nanmin(ys)) if ys.size else 0.0), 1.0

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
             f'<line x1="{left}" y1="{py(tau):.2f}" x2="{left + pw}" y2="{py(tau):.2f}" '
             'stroke="gray" stroke-dasharray="4 3"/>']
    for x, y in zip(xs, ys):
        if np.isfinite(x) and np.isfinite(y):
            color = "#1f5fbf" if y > tau else "#bf1f1f"
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
    for v in (x0, x1):
        parts.append(f'<text x="{px(v):.2f}" y="{top + ph + 16}" font-size="11" '
                     f'text-anchor="middle">{v:.3g}</text>')
    for v in (y0, tau, y1):
        parts.append(f'<text x="{left - 6}" y="{py(v) + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{v:.2g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" font-size="12" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2:.1f})">SSIM</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
