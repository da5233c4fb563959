"""Command-line entry point: ``trunlearn <subcommand> --config run.yaml``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, SweepPoint, derive_seed, load_config
from .dataset import BiasSpec, FormatError, InfeasibleSpecError, sample_biased_deletion
from .eval import (
    MIAConfig,
    kl_sweep,
    prepare_data,
    train_base,
    train_config_for,
    resolve_deletion_count,
    run_method,
    u_mia_auc,
    utility_report,
    write_sweep,
)
from .model import TrainingError, load_params, micro_f1, save_params, train
from .unlearn import certify, load_result, save_result

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTE = 0, 2, 3
OUT_ENV = "TRUNLEARN_OUT"

logger = logging.getLogger("trunlearn")


class MissingArtifacts(Exception):
    def __init__(self, paths: Sequence[Path]):
        super().__init__("missing artifacts: " + ", ".join(map(str, paths)))
        self.paths = list(paths)


# ---------------------------------------------------------------- helpers


def _out_dir(cfg: RunConfig, args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV) or cfg.output_dir)


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_default) + "\n")
    return path


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_manifest(out: Path, command: str, cfg: RunConfig, artifacts: Sequence[Path],
                   started: datetime) -> Path:
    import scipy

    doc = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "artifacts": sorted(str(Path(p).relative_to(out)) for p in artifacts),
        "versions": {"trunlearn": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "timestamps": {"started": started.isoformat(),
                       "finished": datetime.now(timezone.utc).isoformat()},
    }
    return _write_json(out / f"manifest-{command}.json", doc)


def _require(paths: Sequence[Path]) -> None:
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise MissingArtifacts(missing)


def _split(cfg: RunConfig, train_data, out: Path):
    """Build the configured forget/retain split, or reuse split.json from the output dir."""
    path = out / "split.json"
    if path.exists():
        doc = json.loads(path.read_text())
        from .dataset import split_from_forget
        return split_from_forget(train_data, doc["forget_indices"]), None
    seed = derive_seed(cfg.seed, "split")
    bias_map, m = resolve_deletion_count(cfg, train_data, SweepPoint(), seed)
    split = sample_biased_deletion(train_data, BiasSpec(bias_map, m, seed, cfg.bias.default_weight))
    _write_json(path, {"deletion_count": split.m, "achieved_kl": split.achieved_kl,
                       "bias_map": {str(k): v for k, v in bias_map.items()}, "seed": seed,
                       "forget_indices": split.forget_indices.tolist()})
    return split, path


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    started = datetime.now(timezone.utc)
    train_data, test_data = prepare_data(cfg)
    spec, _, res, seconds = train_base(cfg, train_data, cfg.seed)
    model = out / "w_star.trpv"
    out.mkdir(parents=True, exist_ok=True)
    save_params(model, res.w)
    report = {"spec": spec.to_dict(), "converged": res.converged, "iterations": res.iterations,
              "grad_norm": res.grad_norm, "loss": res.loss}
    if spec.is_classifier:
        report["train_f1"] = micro_f1(res.w, train_data, None, spec)
        report["test_f1"] = micro_f1(res.w, test_data, None, spec)
    rep = _write_json(out / "train.json", report)
    timing = _write_json(out / "train-timing.json", {"seconds": seconds})
    write_manifest(out, "train", cfg, [model, rep, timing], started)
    print(f"trained {spec.kind} ({spec.num_params} params) -> {model}")
    return EXIT_OK


def cmd_retrain(cfg: RunConfig, out: Path, args) -> int:
    started = datetime.now(timezone.utc)
    train_data, _ = prepare_data(cfg)
    split, split_path = _split(cfg, train_data, out)
    spec = cfg.model_spec(train_data.dim, train_data.num_classes)
    import time
    t0 = time.perf_counter()
    res = train(spec, train_data, split.retain_indices, train_config_for(cfg, cfg.seed),
                cfg.loss_config(spec))
    seconds = time.perf_counter() - t0
    model = out / "w_hat.trpv"
    save_params(model, res.w)
    rep = _write_json(out / "retrain.json", {"converged": res.converged, "iterations": res.iterations,
                                             "grad_norm": res.grad_norm, "loss": res.loss,
                                             "achieved_kl": split.achieved_kl, "deletion_count": split.m})
    timing = _write_json(out / "retrain-timing.json", {"seconds": seconds})
    arts = [model, rep, timing] + ([split_path] if split_path else [])
    write_manifest(out, "retrain", cfg, arts, started)
    print(f"retrained on {len(split.retain_indices)} examples (KL {split.achieved_kl:.4g}) -> {model}")
    return EXIT_OK


def cmd_unlearn(cfg: RunConfig, out: Path, args) -> int:
    started = datetime.now(timezone.utc)
    model_path = Path(args.model) if args.model else out / "w_star.trpv"
    _require([model_path])
    train_data, _ = prepare_data(cfg)
    spec = cfg.model_spec(train_data.dim, train_data.num_classes)
    w_star = load_params(model_path)
    if w_star.shape != (spec.num_params,):
        raise ConfigError("model", f"{model_path} holds {w_star.size} parameters, spec needs {spec.num_params}")
    split, split_path = _split(cfg, train_data, out)
    loss_cfg = cfg.loss_config(spec)
    artifacts = [split_path] if split_path else []
    completed = 0
    for method in cfg.methods:
        res = run_method(cfg, method, w_star, train_data, split.retain_indices, loss_cfg)
        if res.w_pre_noise is not None and res.bound is not None:
            certify(res, res.bound, cfg.cert, derive_seed(cfg.seed, f"noise/{method}"))
            completed += 1
            print(f"{method}: status={res.status} bound={res.bound.value:.6g} sigma={res.sigma:.6g}")
        else:
            print(f"{method}: failed ({res.info.get('error') or res.info.get('bound_error')})")
        artifacts += save_result(res, out / method)
    write_manifest(out, "unlearn", cfg, artifacts, started)
    return EXIT_OK if completed else EXIT_COMPUTE


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    started = datetime.now(timezone.utc)
    retrained = Path(args.retrained) if args.retrained else out / "w_hat.trpv"
    targets = ([("custom", Path(args.unlearned))] if args.unlearned
               else [(m, out / m) for m in cfg.methods])
    needed = [retrained, out / "split.json"] + [
        p if p.suffix == ".trpv" else p / "result.json" for _, p in targets]
    _require(needed)
    train_data, test_data = prepare_data(cfg)
    spec = cfg.model_spec(train_data.dim, train_data.num_classes)
    split, _ = _split(cfg, train_data, out)
    w_hat = load_params(retrained)
    forget = train_data.subset(split.forget_indices) if split.m else None
    mia = MIAConfig(derive_seed(cfg.seed, "mia"), cfg.mia.class_matched)
    auc_r = u_mia_auc(w_hat, forget, test_data, spec, mia) if forget is not None else None
    artifacts, ok = [], True
    for name, path in targets:
        if path.suffix == ".trpv":
            w, unlearn_seconds = load_params(path), None
        else:
            res = load_result(path)
            w, unlearn_seconds = res.w_certified, res.seconds
        if w is None:
            ok = False
            print(f"{name}: no certified parameters (failed run)")
            continue
        rep = utility_report(w, w_hat, test_data, spec)
        rep.achieved_kl = split.achieved_kl
        rep.mia_auc_retrain = auc_r
        if forget is not None:
            rep.mia_auc_unlearn = u_mia_auc(w, forget, test_data, spec, mia)
            rep.delta_mia = abs(auc_r - rep.mia_auc_unlearn)
        doc = rep.to_dict()
        timing = {"unlearn_seconds": unlearn_seconds}
        rt = out / "retrain-timing.json"
        if rt.exists():
            timing["retrain_seconds"] = json.loads(rt.read_text())["seconds"]
        for k in ("unlearn_seconds", "retrain_seconds"):
            doc.pop(k)
        artifacts.append(_write_json(out / f"eval-{name}.json", doc))
        artifacts.append(_write_json(out / f"eval-{name}-timing.json", timing))
        print(f"{name}: ΔF1={rep.delta_f1} Δloss={rep.delta_loss:.4g} ΔU-MIA={rep.delta_mia}")
    write_manifest(out, "eval", cfg, artifacts, started)
    return EXIT_OK if ok else EXIT_COMPUTE


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    started = datetime.now(timezone.utc)
    result = kl_sweep(cfg, workers=args.workers)
    paths = write_sweep(result, out)
    write_manifest(out, "sweep", cfg, paths, started)
    failed = sum(r["status"] == "failed" for r in result.rows)
    print(f"{len(result.rows)} rows ({failed} failed) -> {out / 'series.csv'}")
    return EXIT_OK


def cmd_inspect_trace(args) -> int:
    path = Path(args.path)
    doc_path = path / "result.json" if path.is_dir() else path
    _require([doc_path])
    doc = json.loads(doc_path.read_text())
    cols = ("t", "delta_bar", "g_norm", "L", "rho", "accepted", "path", "U", "PR")
    print(f"method={doc['method']} status={doc['status']} sigma={doc['sigma']}")
    print("  ".join(f"{c:>11}" for c in cols))
    for rec in doc.get("trace", []):
        cells = []
        for c in cols:
            v = rec.get(c)
            cells.append(f"{v:11.4g}" if isinstance(v, float) else f"{str(v):>11}")
        print("  ".join(cells))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "retrain": cmd_retrain, "unlearn": cmd_unlearn,
            "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trunlearn", description="Trust-region certified unlearning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", help="output directory (overrides config and $%s)" % OUT_ENV)
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, default=1, help="parallel sweep workers")
        if name == "unlearn":
            p.add_argument("--model", help="parameter file of w* (default OUT/w_star.trpv)")
        if name == "eval":
            p.add_argument("--unlearned", help="parameter file to evaluate (default: each method's run)")
            p.add_argument("--retrained", help="parameter file of ŵ (default OUT/w_hat.trpv)")
    p = sub.add_parser("inspect-trace")
    p.add_argument("path", help="result.json or the method directory holding it")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect-trace":
            return cmd_inspect_trace(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be nonnegative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        return COMMANDS[args.command](cfg, _out_dir(cfg, args), args)
    except (ConfigError, FormatError, InfeasibleSpecError, MissingArtifacts) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, TrainingError) as exc:
        print(f"compute failure: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
