"""Evaluation harness: utility deltas against retraining, U-MIA AUC, Taylor-remainder
diagnostics, KL sweeps and timing tables."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .config import RunConfig, SweepPoint, derive_seed
from .dataset import (
    BiasSpec,
    Dataset,
    InfeasibleSpecError,
    deletion_count_for_kl,
    gen_synthetic,
    load_idx,
    sample_biased_deletion,
)
from .model import LossConfig, ModelSpec, Objective, TrainConfig, micro_f1, train
from .spectral import spectral_norm
from .unlearn import (
    BaselineBoundParams,
    BoundInvalidError,
    SensitivityBound,
    UnlearnResult,
    certify,
    run_newton_baseline,
    tr_unlearn,
    zhang_sensitivity_bound,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- utility


@dataclass
class EvalReport:
    retrain_f1: float | None
    retrain_loss: float
    unlearn_f1: float | None
    unlearn_loss: float
    delta_f1: float | None
    delta_loss: float
    under_noise: bool
    achieved_kl: float | None = None
    mia_auc_retrain: float | None = None
    mia_auc_unlearn: float | None = None
    delta_mia: float | None = None
    unlearn_seconds: float | None = None
    retrain_seconds: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def heldout_loss(w: np.ndarray, data: Dataset, spec: ModelSpec) -> float:
    """Mean per-example loss, no damping term."""
    return Objective(data, None, LossConfig(spec, 0.0)).data_loss(w)


def utility_report(w_unlearned: np.ndarray, w_retrained: np.ndarray, data_test: Dataset,
                   spec: ModelSpec) -> EvalReport:
    """F1 and loss of both models on held-out data; ΔF1 = retrain - unlearn.

    A negative ΔF1 (the unlearned model beats retraining) is flagged as
    possible under-noise.
    """
    for name, w in (("unlearned", w_unlearned), ("retrained", w_retrained)):
        if np.shape(w) != (spec.num_params,):
            raise ValueError(f"{name} parameters have shape {np.shape(w)}, spec needs ({spec.num_params},)")
    loss_r = heldout_loss(w_retrained, data_test, spec)
    loss_u = heldout_loss(w_unlearned, data_test, spec)
    if spec.is_classifier:
        f1_r = micro_f1(w_retrained, data_test, None, spec)
        f1_u = micro_f1(w_unlearned, data_test, None, spec)
        d_f1 = f1_r - f1_u
    else:
        f1_r = f1_u = d_f1 = None
    return EvalReport(f1_r, loss_r, f1_u, loss_u, d_f1, loss_u - loss_r,
                      under_noise=d_f1 is not None and d_f1 < 0)


# ---------------------------------------------------------------- membership inference


@dataclass(frozen=True)
class MIAConfig:
    seed: int = 0
    class_matched: bool = True


def auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(score_pos > score_neg) + ½ P(tie), by rank-sum with midranks."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def class_matched_indices(forget_labels: np.ndarray, unseen_labels: np.ndarray,
                          seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per class, subsample both sides to the smaller count so label mix is shared."""
    rng = np.random.default_rng(seed)
    fi, ui = [], []
    for c in np.union1d(forget_labels, unseen_labels):
        f_c = np.flatnonzero(forget_labels == c)
        u_c = np.flatnonzero(unseen_labels == c)
        k = min(f_c.size, u_c.size)
        if k == 0:
            continue
        fi.append(np.sort(rng.choice(f_c, k, replace=False)))
        ui.append(np.sort(rng.choice(u_c, k, replace=False)))
    if not fi:
        raise ValueError("forget and unseen sets share no class")
    return np.concatenate(fi), np.concatenate(ui)


def u_mia_auc(w: np.ndarray, forget: Dataset, unseen: Dataset, spec: ModelSpec,
              cfg: MIAConfig = MIAConfig()) -> float:
    """Loss-threshold attack: AUC for telling forget examples from unseen ones.

    Lower loss counts as "member".  ``forget`` and ``unseen`` must be disjoint
    populations (training rows versus the held-out split).
    """
    if forget.n == 0 or unseen.n == 0:
        raise ValueError("forget and unseen sets must be non-empty")
    if cfg.class_matched and spec.is_classifier:
        fi, ui = class_matched_indices(forget.y, unseen.y, cfg.seed)
    else:
        fi, ui = np.arange(forget.n), np.arange(unseen.n)
    cfg0 = LossConfig(spec, 0.0)
    lf = Objective(forget, fi, cfg0).per_example_loss(w)
    lu = Objective(unseen, ui, cfg0).per_example_loss(w)
    return auc_from_scores(-lf, -lu)


def control_auc(w: np.ndarray, pool: Dataset, spec: ModelSpec, seed: int) -> float:
    """Identical-population control: two random halves of one split."""
    perm = np.random.default_rng(seed).permutation(pool.n)
    half = pool.n // 2
    return u_mia_auc(w, pool.subset(perm[:half]), pool.subset(perm[half:2 * half]), spec,
                     MIAConfig(seed, class_matched=False))


# ---------------------------------------------------------------- Taylor remainder


@dataclass
class TaylorReport:
    r3: float
    r2_norm: float
    delta_norm: float


def taylor_remainder_diagnostic(w_star: np.ndarray, w_hat: np.ndarray, data: Dataset,
                                retain: Sequence[int] | None, loss_cfg: LossConfig) -> TaylorReport:
    """Gaps between the retained objective at ŵ and its second-order model at w*."""
    obj = Objective(data, retain, loss_cfg)
    delta = w_hat - w_star
    f0, g0 = obj.value_and_grad(w_star)
    Hd = obj.hessian_at(w_star)(delta)
    f1, g1 = obj.value_and_grad(w_hat)
    r3 = f1 - (f0 + float(g0 @ delta) + 0.5 * float(delta @ Hd))
    r2 = g1 - (g0 + Hd)
    return TaylorReport(float(r3), float(np.linalg.norm(r2)), float(np.linalg.norm(delta)))


# ---------------------------------------------------------------- pipeline pieces


def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and held-out test sets for a run configuration."""
    ds = cfg.dataset
    if ds.source == "idx":
        s = ds.idx
        return (load_idx(s.train_images, s.train_labels, s.num_classes),
                load_idx(s.test_images, s.test_labels, s.num_classes))
    s = ds.synthetic
    full = gen_synthetic(s.num_classes, s.dim, s.per_class + s.test_per_class, s.separation,
                         derive_seed(cfg.seed, "data"))
    # stratified cut of one sample so both halves share the feature scaling
    test_idx = np.concatenate([np.flatnonzero(full.y == c)[: s.test_per_class]
                               for c in range(s.num_classes)])
    mask = np.ones(full.n, dtype=bool)
    mask[test_idx] = False
    return full.subset(np.flatnonzero(mask)), full.subset(np.sort(test_idx))


def train_config_for(cfg: RunConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=derive_seed(seed, f"init/{cfg.train.seed}") % 2**32)


def train_base(cfg: RunConfig, train_data: Dataset, seed: int):
    """Train w* on the full training set.  Returns (spec, loss_cfg, TrainResult, seconds)."""
    spec = cfg.model_spec(train_data.dim, train_data.num_classes)
    loss_cfg = cfg.loss_config(spec)
    start = time.perf_counter()
    res = train(spec, train_data, None, train_config_for(cfg, seed), loss_cfg)
    return spec, loss_cfg, res, time.perf_counter() - start


def resolve_deletion_count(cfg: RunConfig, data: Dataset, point: SweepPoint, seed: int) -> tuple[dict, int]:
    bias_map = {} if point.iid else dict(cfg.bias.bias_map)
    if point.target_kl is not None:
        m = deletion_count_for_kl(data, bias_map, point.target_kl, seed, cfg.bias.default_weight)
    elif point.deletion_count is not None:
        m = point.deletion_count
    elif cfg.bias.target_kl is not None:
        m = deletion_count_for_kl(data, bias_map, cfg.bias.target_kl, seed, cfg.bias.default_weight)
    elif cfg.bias.deletion_count is not None:
        m = cfg.bias.deletion_count
    else:
        raise InfeasibleSpecError("no deletion count or target KL configured")
    return bias_map, m


def baseline_bound(cfg: RunConfig, w_star: np.ndarray, train_data: Dataset, loss_cfg: LossConfig,
                   lam: float) -> SensitivityBound:
    b = cfg.baseline.bound
    C = float(np.linalg.norm(w_star)) if b.C == "auto" else float(b.C)
    if b.L == "auto":
        H = Objective(train_data, None, loss_cfg).hessian_at(w_star)
        L = spectral_norm(H, loss_cfg.spec.num_params, cfg.spectral)
    else:
        L = float(b.L)
    params = BaselineBoundParams(C, b.G, L, b.M, b.lambda_min, loss_cfg.spec.num_params, b.rho_b)
    return zhang_sensitivity_bound(params, lam)


def _timed(fn, repeats: int):
    times, out = [], None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return out, times


SERIES_FIELDS = (
    "seed", "point", "method", "status", "deletion_count", "achieved_kl", "bound", "sigma",
    "retrain_f1", "unlearn_f1", "delta_f1", "retrain_loss", "unlearn_loss", "delta_loss",
    "pre_noise_f1", "pre_noise_delta_f1", "distance_to_retrain", "mia_auc_retrain",
    "mia_auc_unlearn", "delta_mia", "mia_control_auc", "under_noise", "iterations",
)
TIMING_FIELDS = ("seed", "point", "method", "achieved_kl", "unlearn_min", "unlearn_median",
                 "retrain_min", "retrain_median")


@dataclass
class PointOutcome:
    row: dict
    timing: dict
    result: UnlearnResult | None = None
    w_retrained: np.ndarray | None = None


def run_method(cfg: RunConfig, method: str, w_star: np.ndarray, train_data: Dataset,
               retain: np.ndarray, loss_cfg: LossConfig) -> UnlearnResult:
    if method == "tr":
        res = tr_unlearn(w_star, train_data, retain, loss_cfg, cfg.tr_config, cfg.spectral, cfg.budget,
                         mu_method=cfg.tr.mu_method)
        if res.bound is None:
            res.status = "failed" if res.status == "ok" else res.status
        return res
    lam = cfg.baseline.damping if cfg.baseline.damping is not None else cfg.damping
    res = run_newton_baseline(method, w_star, train_data, retain, loss_cfg, cfg.baseline.cg, lam)
    if not res.failed:
        try:
            res.bound = baseline_bound(cfg, w_star, train_data, loss_cfg, lam)
        except BoundInvalidError as exc:
            res.status, res.info["bound_error"] = "failed", str(exc)
    return res


def run_point(cfg: RunConfig, train_data: Dataset, test_data: Dataset, spec: ModelSpec,
              loss_cfg: LossConfig, w_star: np.ndarray, point: SweepPoint, seed: int,
              index: int, keep_params: bool = False) -> list[PointOutcome]:
    """Split, retrain, unlearn with each configured method, certify and evaluate one grid point."""
    split_seed = derive_seed(seed, f"split/{index}")
    bias_map, m = resolve_deletion_count(cfg, train_data, point, split_seed)
    split = sample_biased_deletion(train_data, BiasSpec(bias_map, m, split_seed, cfg.bias.default_weight))
    reps = cfg.sweep.timing_repeats
    retrained, retrain_times = _timed(
        lambda: train(spec, train_data, split.retain_indices, train_config_for(cfg, seed), loss_cfg), reps)
    w_hat = retrained.w
    forget = train_data.subset(split.forget_indices) if split.m else None
    mia = MIAConfig(derive_seed(seed, f"mia/{index}"), cfg.mia.class_matched)
    auc_r = u_mia_auc(w_hat, forget, test_data, spec, mia) if forget is not None else None
    auc_c = control_auc(w_hat, test_data, spec, derive_seed(seed, f"control/{index}"))
    outcomes = []
    for method in cfg.methods:
        res, times = _timed(lambda: run_method(cfg, method, w_star, train_data, split.retain_indices,
                                               loss_cfg), reps)
        row = {k: None for k in SERIES_FIELDS}
        row.update(seed=seed, point=index, method=method, status=res.status, deletion_count=m,
                   achieved_kl=split.achieved_kl, iterations=res.info.get("iterations"),
                   mia_control_auc=auc_c)
        if res.w_pre_noise is not None and res.bound is not None:
            certify(res, res.bound, cfg.cert, derive_seed(seed, f"noise/{index}/{method}"))
            rep = utility_report(res.w_certified, w_hat, test_data, spec)
            pre = utility_report(res.w_pre_noise, w_hat, test_data, spec)
            auc_u = u_mia_auc(res.w_certified, forget, test_data, spec, mia) if forget is not None else None
            row.update(bound=res.bound.value, sigma=res.sigma, retrain_f1=rep.retrain_f1,
                       unlearn_f1=rep.unlearn_f1, delta_f1=rep.delta_f1, retrain_loss=rep.retrain_loss,
                       unlearn_loss=rep.unlearn_loss, delta_loss=rep.delta_loss,
                       pre_noise_f1=pre.unlearn_f1, pre_noise_delta_f1=pre.delta_f1,
                       distance_to_retrain=float(np.linalg.norm(res.w_pre_noise - w_hat)),
                       mia_auc_retrain=auc_r, mia_auc_unlearn=auc_u,
                       delta_mia=abs(auc_r - auc_u) if auc_u is not None else None,
                       under_noise=rep.under_noise)
        else:
            row.update(bound=math.nan, sigma=math.nan, delta_f1=math.nan, unlearn_f1=math.nan,
                       mia_auc_retrain=auc_r)
        timing = {"seed": seed, "point": index, "method": method, "achieved_kl": split.achieved_kl,
                  "unlearn_min": min(times), "unlearn_median": statistics.median(times),
                  "retrain_min": min(retrain_times), "retrain_median": statistics.median(retrain_times)}
        outcomes.append(PointOutcome(row, timing, res if keep_params else None,
                                     w_hat if keep_params else None))
    return outcomes


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    rows: list[dict]
    timing: list[dict]


def _sweep_seed(args) -> list[PointOutcome]:
    cfg, seed, points = args
    train_data, test_data = prepare_data(cfg)
    spec, loss_cfg, base, _ = train_base(cfg, train_data, seed)
    out = []
    for i, point in enumerate(points):
        try:
            out.extend(run_point(cfg, train_data, test_data, spec, loss_cfg, base.w, point, seed, i))
        except (InfeasibleSpecError, ArithmeticError) as exc:
            logger.warning("seed %d point %d failed: %s", seed, i, exc)
            for method in cfg.methods:
                row = {k: None for k in SERIES_FIELDS}
                row.update(seed=seed, point=i, method=method, status="failed")
                out.append(PointOutcome(row, {"seed": seed, "point": i, "method": method}))
    return out


def kl_sweep(cfg: RunConfig, points: Sequence[SweepPoint] | None = None,
             seeds: Sequence[int] | None = None, workers: int = 1) -> SweepResult:
    """Run every (seed, grid point) pair; one base model per seed.

    Rows are ordered by (seed, point, method) regardless of worker count.
    Per-point failures are recorded as ``status = failed`` rows.
    """
    points = tuple(points if points is not None else cfg.sweep.points) or (SweepPoint(),)
    seeds = tuple(seeds if seeds is not None else cfg.sweep.seeds)
    tasks = [(cfg, derive_seed(cfg.seed, f"seed/{s}") % 2**32, points) for s in seeds]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_sweep_seed, tasks))
    else:
        chunks = [_sweep_seed(t) for t in tasks]
    rows, timing = [], []
    for user_seed, chunk in zip(seeds, chunks):
        for o in chunk:
            rows.append({**o.row, "seed": user_seed})
            timing.append({**o.timing, "seed": user_seed})
    return SweepResult(rows, timing)


def series_ranges(rows: Iterable[dict], key: str = "delta_f1") -> list[dict]:
    """Min, mean and max of ``key`` across seeds for every (point, method)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["point"], r["method"]), []).append(r)
    out = []
    for (point, method), grp in sorted(groups.items()):
        vals = [r[key] for r in grp if r[key] is not None and not math.isnan(r[key])]
        kls = [r["achieved_kl"] for r in grp if r["achieved_kl"] is not None]
        out.append({"point": point, "method": method,
                    "kl_mean": float(np.mean(kls)) if kls else None,
                    "min": min(vals) if vals else None, "mean": float(np.mean(vals)) if vals else None,
                    "max": max(vals) if vals else None, "n": len(vals)})
    return out


def timing_report(runs: Sequence[dict]) -> list[dict]:
    """Per (method, point) wall-clock summary plus ordering flags."""
    groups: dict[tuple, list[dict]] = {}
    for r in runs:
        if r.get("unlearn_min") is None:
            continue
        groups.setdefault((r["method"], r["point"]), []).append(r)
    table = []
    for (method, point), grp in sorted(groups.items()):
        table.append({
            "method": method, "point": point,
            "achieved_kl": float(np.mean([g["achieved_kl"] for g in grp])),
            "unlearn_min": min(g["unlearn_min"] for g in grp),
            "unlearn_median": statistics.median(g["unlearn_median"] for g in grp),
            "retrain_min": min(g["retrain_min"] for g in grp),
            "retrain_median": statistics.median(g["retrain_median"] for g in grp),
            "faster_than_retrain": all(g["unlearn_median"] < g["retrain_median"] for g in grp),
        })
    return table


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for r in rows:
        writer.writerow([_fmt(r.get(f)) for f in fields])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_sweep(result: SweepResult, out_dir: Path) -> list[Path]:
    """series.csv/json hold deterministic fields; wall-clock lives in timing.csv/json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "series.csv": rows_to_csv(result.rows, SERIES_FIELDS),
        "series.json": json.dumps(_json_safe({"rows": result.rows,
                                              "ranges": series_ranges(result.rows)}), indent=2, sort_keys=True),
        "timing.csv": rows_to_csv(result.timing, TIMING_FIELDS),
        "timing.json": json.dumps(_json_safe(timing_report(result.timing)), indent=2, sort_keys=True),
    }
    written = []
    for name, text in paths.items():
        (out_dir / name).write_text(text + ("" if text.endswith("\n") else "\n"))
        written.append(out_dir / name)
    return written
