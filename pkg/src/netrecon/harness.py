"""Random hyperparameter search over reconstruction runs, and on-disk formats.

Every artifact is a directory holding a ``manifest.json`` and raw
little-endian float64 arrays. Manifests carry only deterministic content, so
repeating a run with the same seeds reproduces every file byte for byte;
timings go to a separate ``run.json``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .models import ModelSpec, ParamVector
from .reconstruction import CandidateSet, ReconstructionConfig, reconstruct

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "netrecon-checkpoint/1"
CANDIDATES_FORMAT = "netrecon-candidates/1"
CHECKPOINT_FIELDS = ("format", "code_version", "spec", "p", "seed", "init",
                     "train_config", "dataset_fingerprint")


class SchemaError(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_f64(path: Path, a) -> None:
    path.write_bytes(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_f64(path: Path, count: int, error=CorruptCheckpoint) -> np.ndarray:
    data = path.read_bytes()
    if len(data) != 8 * count:
        raise error(f"{path.name}: expected {8 * count} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(spec: ModelSpec, params: ParamVector, manifest: dict, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    full = {"format": CHECKPOINT_FORMAT, "code_version": __version__,
            "spec": spec.to_dict(), "p": params.size, **manifest}
    missing = [k for k in CHECKPOINT_FIELDS if k not in full]
    if missing:
        raise SchemaError(f"checkpoint manifest is missing {missing}")
    _dump_json(path / "manifest.json", full)
    _write_f64(path / "theta.f64", params.theta)


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    missing = [k for k in CHECKPOINT_FIELDS if k not in manifest]
    if missing:
        raise SchemaError(f"checkpoint manifest is missing {missing}")
    if manifest["format"] != CHECKPOINT_FORMAT:
        raise VersionMismatch(f"unsupported checkpoint format {manifest['format']!r}")
    spec = ModelSpec.from_dict(manifest["spec"])
    theta = _read_f64(path / "theta.f64", manifest["p"])
    params = ParamVector.from_theta(spec, theta)
    return spec, params, manifest


# -- candidate dumps -------------------------------------------------------

def save_candidates(cands: CandidateSet, cfg: ReconstructionConfig | None, path,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": CANDIDATES_FORMAT, "code_version": __version__,
                "m": cands.m, "d": cands.X.shape[1], "lambda_shape": list(cands.lam.shape),
                "config": cfg.to_dict() if cfg else None,
                "seed": cfg.seed if cfg else None,
                "final_loss": None if not math.isfinite(cands.final_loss) else cands.final_loss,
                **(extra or {})}
    _dump_json(path / "manifest.json", manifest)
    _write_f64(path / "X.f64", cands.X)
    _write_f64(path / "lambda.f64", cands.lam)
    _write_f64(path / "labels.f64", cands.Y)


def load_candidates(path) -> CandidateSet:
    """Load one candidate dump, or merge every ``run_*`` dump below ``path``."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        runs = sorted(p for p in path.glob("run_*") if (p / "manifest.json").exists())
        if not runs:
            raise FileNotFoundError(f"no candidate dumps under {path}")
        return CandidateSet.concat(load_candidates(p) for p in runs)
    m = json.loads((path / "manifest.json").read_text())
    if m.get("format") != CANDIDATES_FORMAT:
        raise VersionMismatch(f"unsupported candidate format {m.get('format')!r}")
    n, d = m["m"], m["d"]
    lam_shape = tuple(m["lambda_shape"])
    X = _read_f64(path / "X.f64", n * d).reshape(n, d)
    lam = _read_f64(path / "lambda.f64", int(np.prod(lam_shape))).reshape(lam_shape)
    Y = _read_f64(path / "labels.f64", n)
    loss = m.get("final_loss")
    return CandidateSet(X, lam, Y, final_loss=math.nan if loss is None else loss)


# -- search ----------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    """Ranges of the random search; ``lr`` and ``sigma_x`` are log-uniform."""

    lr: tuple[float, float] = (1e-5, 1.0)
    sigma_x: tuple[float, float] = (1e-6, 0.1)
    lambda_min: tuple[float, float] = (0.01, 0.5)
    alpha: tuple[float, float] = (10.0, 500.0)
    runs: int = 100
    base: ReconstructionConfig = field(default_factory=ReconstructionConfig)

    def __post_init__(self):
        for name in ("lr", "sigma_x"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must be positive and ordered")
        for name in ("lambda_min", "alpha"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range must be ordered")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SearchSpace:
        d = dict(d)
        base = ReconstructionConfig.from_dict(d.pop("base", {}))
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()},
                   base=base)


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_hyperparams(space: SearchSpace, rng: np.random.Generator) -> ReconstructionConfig:
    return replace(space.base,
                   lr=_log_uniform(rng, *space.lr),
                   sigma_x=_log_uniform(rng, *space.sigma_x),
                   lambda_min=float(rng.uniform(*space.lambda_min)),
                   alpha=float(rng.uniform(*space.alpha)),
                   seed=int(rng.integers(2 ** 31)))


def run_config(space: SearchSpace, seed: int, index: int) -> ReconstructionConfig:
    """Configuration of run ``index``; independent of how runs are scheduled."""
    return sample_hyperparams(space, np.random.default_rng([seed, index]))


@dataclass
class RunManifest:
    run_index: int
    config: dict
    dataset_fingerprint: str | None
    code_version: str
    final_loss: float | None
    wall_time: float
    status: str = "ok"
    error: str | None = None


def _one_run(spec_dict, theta, cfg_dict, index, out_dir, fingerprint):
    spec = ModelSpec.from_dict(spec_dict)
    params = ParamVector.from_theta(spec, theta)
    cfg = ReconstructionConfig.from_dict(cfg_dict)
    start = time.perf_counter()
    try:
        cands = reconstruct(spec, params, cfg)
        status, error = "ok", None
    except (FloatingPointError, ValueError) as exc:
        cands, status, error = None, "failed", f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - start
    if cands is not None and out_dir is not None:
        save_candidates(cands, cfg, Path(out_dir) / f"run_{index:03d}",
                        {"run_index": index, "dataset_fingerprint": fingerprint})
    manifest = RunManifest(index, cfg.to_dict(), fingerprint, __version__,
                           None if cands is None else cands.final_loss, wall, status, error)
    if out_dir is not None:
        run_dir = Path(out_dir) / f"run_{index:03d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        _dump_json(run_dir / "run.json", asdict(manifest))
    return index, cands, manifest


def run_search(spec: ModelSpec, params: ParamVector, space: SearchSpace, k: int | None = None,
               jobs: int = 1, out_dir=None, seed: int = 0, fingerprint: str | None = None):
    """Run ``k`` independent reconstructions and merge their candidates.

    Failed runs are recorded in their manifests and skipped in the merge. The
    merged set is ordered by run index, whatever the level of parallelism.
    """
    k = space.runs if k is None else k
    configs = [run_config(space, seed, i) for i in range(k)]
    args = [(spec.to_dict(), params.theta, c.to_dict(), i,
             None if out_dir is None else str(out_dir), fingerprint)
            for i, c in enumerate(configs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_run, *zip(*args)))
    else:
        results = [_one_run(*a) for a in args]
    results.sort(key=lambda r: r[0])
    manifests = [r[2] for r in results]
    for mf in manifests:
        if mf.status != "ok":
            log.warning("run %d failed: %s", mf.run_index, mf.error)
    ok = [r[1] for r in results if r[1] is not None]
    merged = CandidateSet.concat(ok) if ok else None
    if out_dir is not None:
        _dump_json(Path(out_dir) / "search.json",
                   {"space": space.to_dict(), "seed": seed, "runs": k,
                    "failed": [m.run_index for m in manifests if m.status != "ok"],
                    "dataset_fingerprint": fingerprint, "code_version": __version__})
    return merged, manifests
