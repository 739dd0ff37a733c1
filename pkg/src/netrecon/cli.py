"""Command-line entry point: ``netrecon {train,reconstruct,search,analyze,verify}``.

Configs are JSON files. On failure a single machine-readable line
``error: {"type": ..., "message": ...}`` goes to stderr and the exit code is 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .analysis import AnalysisConfig, build_report
from .data_io import (ANIMALS_VS_VEHICLES, Dataset, load_cifar10, load_cifar100,
                      load_dataset, load_mnist, preprocess, save_dataset, synthetic)
from .harness import (SearchSpace, load_candidates, load_checkpoint, run_search,
                      save_candidates, save_checkpoint)
from .models import (ModelSpec, NotHomogeneous, Output, ParamVector, homogeneity_degree,
                     network_forward, param_gradient)
from .reconstruction import ReconstructionConfig, reconstruct
from .training import (Loss, TrainConfig, Undefined, loss_and_grad, stationarity_residual,
                       total_loss_graph, train)

log = logging.getLogger("netrecon")

CLASS_SCHEMES = {"animals_vs_vehicles": ANIMALS_VS_VEHICLES, "all10": list(range(10)),
                 "all100": list(range(100))}


class VerificationFailed(RuntimeError):
    pass


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def build_dataset(cfg: dict) -> Dataset:
    """Dataset described by the ``data`` section of a training config."""
    kind = cfg.get("kind", "synthetic")
    if kind == "synthetic":
        return synthetic(cfg.get("generator", "gaussian_blobs"), cfg["n"], cfg["d"],
                         cfg.get("seed", 0), cfg.get("image_shape"))
    if kind == "dataset":
        return load_dataset(cfg["path"])
    if kind in ("cifar10", "cifar100"):
        loader = load_cifar10 if kind == "cifar10" else load_cifar100
        extra = {"files": cfg["files"]} if "files" in cfg else {}
        pixels, labels = loader(cfg["path"], **extra)
        shape = (3, 32, 32)
    elif kind == "mnist":
        pixels, labels = load_mnist(cfg["images"], cfg["labels"])
        shape = (1, 28, 28)
    else:
        raise ValueError(f"unknown data kind {kind!r}")
    classes = cfg.get("classes", list(range(10)))
    if isinstance(classes, str):
        classes = CLASS_SCHEMES[classes]
    label_kind = cfg.get("label_kind", "binary" if len(classes) == 2 else "class")
    return preprocess(pixels, labels, cfg["per_class"], classes, cfg.get("seed", 0),
                      shape, label_kind, kind)


def build_model(cfg: dict, ds: Dataset) -> ModelSpec:
    outputs = cfg.get("outputs", 1 if ds.label_kind != "class" else ds.num_classes)
    kind = cfg.get("type", "mlp")
    if kind == "mlp":
        return ModelSpec.mlp(ds.d, cfg.get("hidden", [100, 100]), outputs, cfg.get("bias", False))
    if kind == "conv":
        return ModelSpec.conv_mlp(ds.image_shape, cfg["kernel"], cfg["channels"],
                                  cfg.get("hidden", []), outputs, cfg.get("bias", False))
    raise ValueError(f"unknown model type {kind!r}")


def cmd_train(args) -> dict:
    config = _read_json(args.config)
    ds = build_dataset(config.get("data", {}))
    spec = build_model(config.get("model", {}), ds)
    tcfg = TrainConfig.from_dict(config.get("train", {}))
    params, trace = train(spec, ds, tcfg)
    out = Path(args.out)
    save_dataset(ds, out / "data")
    (out / "trace.csv").parent.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(trace.to_csv())
    manifest = {"seed": tcfg.seed, "init": tcfg.init, "train_config": tcfg.to_dict(),
                "dataset_fingerprint": ds.fingerprint(), "epochs_run": trace.epoch[-1],
                "final_loss": trace.loss[-1], "final_grad_norm": trace.grad_norm[-1]}
    save_checkpoint(spec, params, manifest, out)
    return {"epochs": trace.epoch[-1], "loss": trace.loss[-1],
            "grad_norm": trace.grad_norm[-1], "train_err": trace.train_err[-1]}


def cmd_reconstruct(args) -> dict:
    spec, params, manifest = load_checkpoint(args.ckpt)
    cfg = ReconstructionConfig.from_dict(_read_json(args.config))
    cands = reconstruct(spec, params, cfg)
    save_candidates(cands, cfg, args.out, {"dataset_fingerprint": manifest["dataset_fingerprint"]})
    return {"m": cands.m, "final_loss": cands.final_loss}


def cmd_search(args) -> dict:
    spec, params, manifest = load_checkpoint(args.ckpt)
    space = SearchSpace.from_dict(_read_json(args.space)) if args.space else SearchSpace()
    merged, manifests = run_search(spec, params, space, args.runs, args.jobs, args.out,
                                   args.seed, manifest["dataset_fingerprint"])
    failed = [m.run_index for m in manifests if m.status != "ok"]
    return {"runs": len(manifests), "failed": failed,
            "candidates": 0 if merged is None else merged.m}


def _loss_of(manifest) -> Loss:
    return Loss(**manifest["train_config"]["loss"])


def cmd_analyze(args) -> dict:
    spec, params, manifest = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    cands = load_candidates(args.candidates)
    acfg = AnalysisConfig(**_read_json(args.config)) if args.config else AnalysisConfig()
    report = build_report(spec, params, ds, cands.X, acfg, args.axis, _loss_of(manifest))
    for target in args.out.split(","):
        path = Path(target)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.to_svg() if path.suffix == ".svg" else report.to_csv())
    return {"samples": ds.n, "good": report.good_count(), "tau": acfg.tau}


def cmd_verify(args) -> dict:
    spec, params, manifest = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    loss = _loss_of(manifest)
    wd = manifest["train_config"]["weight_decay"]
    rng = np.random.default_rng(args.seed)
    coords = rng.choice(params.size, size=min(args.coords, params.size), replace=False)

    def value(theta):
        leaves = [ad.constant(a) for a in ParamVector.from_theta(spec, theta).arrays()]
        return float(total_loss_graph(spec, leaves, ds, loss, wd).value)

    # central differences on a random subset of coordinates
    _, grad = loss_and_grad(spec, params, ds, loss, wd, fast=False)
    worst, h = 0.0, 1e-6
    for i in coords:
        step = np.zeros(params.size)
        step[i] = h
        numeric = (value(params.theta + step) - value(params.theta - step)) / (2 * h)
        worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(grad[i])))
    result = {"gradient_check": worst, "gradient_norm": float(np.linalg.norm(grad))}
    try:
        L = homogeneity_degree(spec)
        x = ds.X[:1]
        phi = network_forward(spec, params, x)
        phi_c = network_forward(spec, params.scaled(2.0), x)
        scale = max(np.max(np.abs(phi)) * 2.0 ** L, 1e-300)
        result["homogeneity"] = float(np.max(np.abs(phi_c - 2.0 ** L * phi)) / scale)
        euler = float(params.theta @ _flat_output_grad(spec, params, x[0]))
        out0 = float(np.atleast_1d(phi[0])[0])
        result["euler"] = abs(euler - L * out0) / max(abs(L * out0), 1e-300)
    except NotHomogeneous as exc:
        result["homogeneity"] = f"skipped: {exc}"
    try:
        result["stationarity_residual"] = stationarity_residual(spec, params, ds, loss, wd).residual
    except Undefined as exc:
        result["stationarity_residual"] = f"undefined: {exc}"
    if worst > args.tol:
        raise VerificationFailed(f"gradient check error {worst:.3e} exceeds {args.tol:g}")
    return result


def _flat_output_grad(spec, params, x):
    return param_gradient(spec, params, x, Output(0)).value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netrecon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="one reconstruction run")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("search", help="random hyperparameter search over reconstruction runs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--space", default=None)
    s.add_argument("--runs", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("analyze", help="match candidates to the training set")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--candidates", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--axis", choices=("margin", "loss"), default="margin")
    s.add_argument("--config", default=None, help="JSON with AnalysisConfig fields")
    s.add_argument("--out", required=True, help="report.csv[,scatter.svg]")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("verify", help="gradient, homogeneity and stationarity checks")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--coords", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
