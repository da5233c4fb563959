"""Unlearning updates (one-step Newton, damped Newton, trust-region iterative),
sensitivity bounds and Gaussian-mechanism noise."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .model import LossConfig, Objective
from .spectral import (
    CurvatureFloor,
    LipschitzEstimate,
    SpectralConfig,
    estimate_local_lipschitz,
    estimate_mu,
    update_lipschitz,
)
from .trsolver import (
    DegenerateModel,
    QuadModel,
    TRConfig,
    agreement_ratio,
    clipped_radius,
    solve_subproblem,
    update_radius,
)

logger = logging.getLogger(__name__)


class SingularHessianError(ArithmeticError):
    """CG could not invert the Hessian (indefinite or not converged)."""


class BoundInvalidError(ValueError):
    pass


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class CertParams:
    epsilon: float
    delta: float

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class SensitivityBound:
    value: float
    method: str  # "tr-corollary" | "zhang-appendix-b" | "oracle-exact"
    components: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (np.isfinite(self.value) and self.value > 0):
            raise BoundInvalidError(f"sensitivity bound must be positive and finite, got {self.value}")


@dataclass(frozen=True)
class ErrorBudget:
    eps_g: float = 0.0
    eps_H: float = 0.0
    eps_ihvp: float = 0.0

    def __post_init__(self) -> None:
        if min(self.eps_g, self.eps_H, self.eps_ihvp) < 0:
            raise ValueError("error budget terms must be nonnegative")


@dataclass(frozen=True)
class BaselineBoundParams:
    C: float
    G: float
    L: float
    M: float
    lambda_min: float
    d: int
    rho_b: float

    def __post_init__(self) -> None:
        if min(self.C, self.G, self.L, self.M, self.rho_b) <= 0 or self.d < 1:
            raise ValueError("C, G, L, M, rho_b must be positive and d >= 1")


@dataclass(frozen=True)
class CGConfig:
    tol: float = 1e-8
    max_iter: int = 1000


@dataclass
class UnlearnResult:
    method: str
    w_pre_noise: np.ndarray | None
    bound: SensitivityBound | None = None
    sigma: float = 0.0
    w_certified: np.ndarray | None = None
    trace: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    status: str = "ok"  # "ok" | "stalled" | "failed"
    info: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.status == "failed"


# ---------------------------------------------------------------- linear solves


def conjugate_gradient(op: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       cfg: CGConfig = CGConfig()) -> tuple[np.ndarray, int]:
    """Solve op(x) = b for SPD ``op`` to relative residual ``cfg.tol``."""
    x = np.zeros_like(b)
    r = b.copy()
    bn = float(np.linalg.norm(b))
    if bn == 0:
        return x, 0
    p = r.copy()
    rr = float(r @ r)
    for k in range(1, cfg.max_iter + 1):
        Ap = op(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0:
            raise SingularHessianError(f"non-positive curvature {pAp:.3e} at CG iteration {k}")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= cfg.tol * bn:
            return x, k
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise SingularHessianError(f"CG did not reach relative residual {cfg.tol} in {cfg.max_iter} steps")


# ---------------------------------------------------------------- baselines


def newton_one_step(w_star: np.ndarray, data: Dataset, retain: Sequence[int], loss_cfg: LossConfig,
                    cg_cfg: CGConfig = CGConfig(),
                    hessian_subset: Sequence[int] | None = None) -> np.ndarray:
    """w* - H_D(w*)^{-1} ∇f_R(w*), the Hessian taken on the full training set by default."""
    g = Objective(data, retain, loss_cfg).grad(w_star)
    H = Objective(data, hessian_subset, loss_cfg).hessian_at(w_star)
    step, _ = conjugate_gradient(H, g, cg_cfg)
    return w_star - step


def damped_newton(w_star: np.ndarray, data: Dataset, retain: Sequence[int], loss_cfg: LossConfig,
                  lam: float, cg_cfg: CGConfig = CGConfig()) -> np.ndarray:
    """w* - (∇²L_R(w*) + λI)^{-1} ∇f_R(w*).

    The data Hessian excludes the objective's own damping; ``lam`` replaces it.
    With ``lam == loss_cfg.damping`` this is the exact Newton step on f.
    """
    if lam < 0:
        raise ValueError("damping must be >= 0")
    obj = Objective(data, retain, loss_cfg)
    step, _ = conjugate_gradient(obj.hessian_at(w_star, damping=lam), obj.grad(w_star), cg_cfg)
    return w_star - step


def run_newton_baseline(method: str, w_star: np.ndarray, data: Dataset, retain: Sequence[int],
                        loss_cfg: LossConfig, cg_cfg: CGConfig = CGConfig(),
                        lam: float | None = None) -> UnlearnResult:
    """Run ``newton`` or ``damped`` and wrap failures as a NaN outcome."""
    start = time.perf_counter()
    try:
        if method == "newton":
            w = newton_one_step(w_star, data, retain, loss_cfg, cg_cfg)
        elif method == "damped":
            w = damped_newton(w_star, data, retain, loss_cfg,
                              loss_cfg.damping if lam is None else lam, cg_cfg)
        else:
            raise ValueError(f"unknown baseline {method!r}")
    except SingularHessianError as exc:
        logger.warning("%s update failed: %s", method, exc)
        return UnlearnResult(method, None, seconds=time.perf_counter() - start, status="failed",
                             info={"error": str(exc)})
    return UnlearnResult(method, w, seconds=time.perf_counter() - start)


# ---------------------------------------------------------------- bounds


def prerun_gradient_bound(g0_norm: float, radii: Sequence[float], L_max: float) -> float:
    """U_t = ||g_0|| + L_max * sum of the clipped radii taken so far."""
    if g0_norm < 0 or L_max < 0 or any(r < 0 for r in radii):
        raise ValueError("inputs must be nonnegative")
    return g0_norm + L_max * math.fsum(radii)


def predicted_reduction_floor(pr_est: float, delta_bar: float, U_t: float, H_norm: float,
                              lam: float, budget: ErrorBudget = ErrorBudget()) -> float:
    """Model reduction minus gradient, HVP and inverse-HVP error allowances, floored at 0."""
    if min(delta_bar, U_t, H_norm, lam) < 0:
        raise ValueError("inputs must be nonnegative")
    ihvp = budget.eps_ihvp * U_t * U_t + (H_norm + lam) * delta_bar * budget.eps_ihvp * U_t
    return max(0.0, pr_est - budget.eps_g * delta_bar - 0.5 * budget.eps_H * delta_bar ** 2 - ihvp)


def tr_distance_bound(f0: float, f_hat_lower: float, mu: float, cfg: TRConfig, L_max: float,
                      T: int) -> SensitivityBound:
    """sqrt(2/μ) (1 - η₁κτμ/L_max)^{T/2} sqrt(f0 - f_hat_lower)."""
    if not mu > 0:
        raise BoundInvalidError("curvature floor must be positive")
    if f0 < f_hat_lower:
        raise BoundInvalidError("f0 must be >= the lower bound on f(ŵ)")
    rate = cfg.eta1 * cfg.kappa * cfg.tau * mu / L_max
    if not 0 < rate < 1:
        raise BoundInvalidError(f"contraction factor 1 - {rate:.4g} is not in (0, 1)")
    contraction = (1.0 - rate) ** (T / 2)
    scale = math.sqrt(2.0 / mu)
    gap = math.sqrt(f0 - f_hat_lower)
    return SensitivityBound(scale * contraction * gap, "tr-corollary", {
        "sqrt_2_over_mu": scale, "contraction": contraction, "sqrt_gap": gap,
        "rate": rate, "T": T, "mu": mu, "L_max": L_max, "f0": f0, "f_hat_lower": f_hat_lower,
    })


def zhang_sensitivity_bound(p: BaselineBoundParams, lam: float) -> SensitivityBound:
    denom = lam + p.lambda_min
    if not denom > 0:
        raise BoundInvalidError("λ + λ_min must be positive")
    curvature = (2 * p.C * (p.M * p.C + lam) + p.G) / denom
    concentration = 16 * math.log(p.d) / p.rho_b / denom
    gradient = (2 * p.L * p.C + p.G) / 16
    return SensitivityBound(curvature + concentration + gradient, "zhang-appendix-b", {
        "curvature": curvature, "concentration": concentration, "gradient": gradient,
    })


def noise_sigma(delta: float, cert: CertParams) -> float:
    """σ = Δ sqrt(2 ln(1.25/δ)) / ε."""
    if not delta > 0:
        raise ValueError("sensitivity must be positive")
    return delta * math.sqrt(2.0 * math.log(1.25 / cert.delta)) / cert.epsilon


def add_noise(w: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return np.array(w, dtype=np.float64)
    return w + sigma * np.random.default_rng(seed).standard_normal(w.shape)


def certify(result: UnlearnResult, bound: SensitivityBound, cert: CertParams, seed: int) -> UnlearnResult:
    """Attach the bound, σ and the noised parameters to a completed run."""
    if result.w_pre_noise is None:
        raise ValueError("cannot certify a failed run")
    result.bound = bound
    result.sigma = noise_sigma(bound.value, cert)
    result.w_certified = add_noise(result.w_pre_noise, result.sigma, seed)
    return result


# ---------------------------------------------------------------- trust-region unlearning


def tr_unlearn(w_star: np.ndarray, data: Dataset, retain: Sequence[int], loss_cfg: LossConfig,
               tr_cfg: TRConfig = TRConfig(), spectral_cfg: SpectralConfig = SpectralConfig(),
               budget: ErrorBudget = ErrorBudget(), *, L0: float | None = None,
               mu_method: str = "damping-floor", audit_lipschitz: bool = False) -> UnlearnResult:
    """Iterate trust-region Newton steps on the retained objective, starting at w*.

    Returns the pre-noise iterate, a per-iteration trace and the pre-run
    distance bound (which uses f(ŵ) >= 0).  ``L0`` overrides the initial
    Lipschitz estimate.
    """
    if not loss_cfg.damping > 0:
        raise ValueError("trust-region unlearning needs damping λ > 0")
    start = time.perf_counter()
    lam = loss_cfg.damping
    obj = Objective(data, retain, loss_cfg)
    d = loss_cfg.spec.num_params
    w = np.array(w_star, dtype=np.float64)
    f, g = obj.value_and_grad(w)
    if not np.isfinite(f):
        raise ArithmeticError("objective is non-finite at w*")
    f0 = f
    g0_norm = float(np.linalg.norm(g))
    grad_tol = tr_cfg.grad_tol if tr_cfg.grad_tol is not None else 1e-6 * max(1.0, g0_norm)

    H0 = obj.hessian_at(w)
    mu = estimate_mu(H0, lam, mu_method, d, spectral_cfg)
    delta = tr_cfg.delta0
    radii: list[float] = []
    L_hist: list[float] = []
    trace: list[dict] = []
    status = "ok"
    L_est: LipschitzEstimate | None = None
    accepted_steps = certified_steps = 0
    sufficient = tr_cfg.eta1 * tr_cfg.kappa * tr_cfg.tau / 2.0

    for t in range(tr_cfg.max_iter):
        g_norm = float(np.linalg.norm(g))
        if g_norm <= grad_tol:
            break
        H = H0 if t == 0 else obj.hessian_at(w)
        if t == 0:
            L_est = (LipschitzEstimate(L0, "override") if L0 is not None
                     else estimate_local_lipschitz(w, data, retain, loss_cfg, spectral_cfg, obj))
        elif spectral_cfg.refresh_every and t % spectral_cfg.refresh_every == 0 and L0 is None:
            L_est = estimate_local_lipschitz(w, data, retain, loss_cfg, spectral_cfg, obj)
        else:
            L_est = update_lipschitz(L_est, spectral_cfg)
        L_t = L_est.value
        L_hist.append(L_t)
        L_max = max(L_hist)
        U_t = prerun_gradient_bound(g0_norm, radii, L_max)
        model = QuadModel(f, g, H)
        Hg = H(g)
        rejections = 0
        while True:
            delta_t = delta
            delta_bar = clipped_radius(delta, g_norm, L_t, tr_cfg.tau)
            p, path = solve_subproblem(model, delta_bar, tr_cfg, Hg=Hg)
            pred = model.reduction(p)
            f_new = obj.value(w + p)
            actual = f - f_new
            try:
                rho = agreement_ratio(f, f_new, f, f - pred)
            except DegenerateModel:
                rho = -math.inf
            accepted = rho >= tr_cfg.eta1 and actual > 0 and np.isfinite(f_new)
            delta = update_radius(delta, rho, tr_cfg)
            if accepted:
                break
            rejections += 1
            if rejections >= tr_cfg.max_rejections:
                status = "stalled"
                break
        record = {
            "t": t, "delta": delta_t, "delta_bar": delta_bar, "g_norm": g_norm,
            "L": L_t, "L_source": L_est.source, "rho": rho if np.isfinite(rho) else None,
            "accepted": bool(accepted), "path": path, "model_reduction": pred,
            "actual_reduction": actual, "f": f, "U": U_t, "rejections": rejections,
            "PR": predicted_reduction_floor(max(pred, 0.0), delta_bar, U_t, max(L_t - lam, 0.0),
                                            lam, budget),
            "step_norm": float(np.linalg.norm(p)),
        }
        if audit_lipschitz:
            record["L_power"] = estimate_local_lipschitz(w, data, retain, loss_cfg,
                                                         spectral_cfg, obj).value
        if not accepted:
            trace.append(record)
            break
        # per-step decrease required by the distance-bound chain
        record["sufficient_decrease"] = bool(actual >= sufficient * g_norm ** 2 / L_t)
        trace.append(record)
        accepted_steps += 1
        certified_steps += record["sufficient_decrease"]
        radii.append(delta_bar)
        w = w + p
        f, g = obj.value_and_grad(w)

    L_max = max(L_hist) if L_hist else (L0 or estimate_local_lipschitz(
        w, data, retain, loss_cfg, spectral_cfg, obj).value)
    info = {
        "f0": f0, "f_final": f, "g0_norm": g0_norm, "g_final_norm": float(np.linalg.norm(g)),
        "grad_tol": grad_tol, "mu": mu.mu, "mu_method": mu.method, "L_max": L_max,
        "accepted_steps": accepted_steps, "certified_steps": certified_steps,
        "iterations": len(trace), "radii": radii,
    }
    bound = None
    try:
        bound = tr_distance_bound(f0, 0.0, mu.mu, tr_cfg, L_max, certified_steps)
    except BoundInvalidError as exc:
        info["bound_error"] = str(exc)
    return UnlearnResult("tr", w, bound=bound, trace=trace, status=status,
                         seconds=time.perf_counter() - start, info=info)


def posthoc_tr_bound(result: UnlearnResult, f_hat: float, tr_cfg: TRConfig) -> SensitivityBound:
    """Distance bound using a known f(ŵ) instead of the pre-run lower bound 0."""
    info = result.info
    return tr_distance_bound(info["f0"], f_hat, info["mu"], tr_cfg, info["L_max"],
                             info["certified_steps"])


# ---------------------------------------------------------------- TR vs Newton diagnostic


def dense_operator(op: Callable[[np.ndarray], np.ndarray], d: int) -> np.ndarray:
    """Materialise a symmetric linear operator column by column (small d only)."""
    A = np.column_stack([op(e) for e in np.eye(d)])
    return 0.5 * (A + A.T)


@dataclass
class NewtonComparison:
    r_t: float
    inv_norm: float
    kappa_tr: float
    alpha_n: float
    c1: bool
    c2: bool
    grad_norm_tr: float
    grad_norm_newton: float
    inequality_holds: bool
    newton_step_norm: float
    tr_step_norm: float


def tr_vs_newton_diagnostic(obj: Objective, w_t: np.ndarray, L_hat: float, mu: float,
                            lam_N: float, H_est: np.ndarray | None = None,
                            tr_cfg: TRConfig = TRConfig(cg_tol=1e-12, cg_max_iter=10_000)
                            ) -> NewtonComparison:
    """Compare one TR step (radius ||g||/L_hat) against a damped Newton step.

    ``H_est`` estimates the undamped data Hessian; it defaults to the exact one
    at ``w_t`` (the no-shift case).  Conditions C1 and C2 are evaluated and the
    post-step gradient norms reported; nothing is raised on violation.
    """
    d = obj.spec.num_params
    lam = obj.damping
    g = obj.grad(w_t)
    H_t = dense_operator(obj.hessian_at(w_t), d)  # ∇²f = data Hessian + λI
    if H_est is None:
        H_est = H_t - lam * np.eye(d)
    A = H_est + lam_N * np.eye(d)
    A_inv = np.linalg.inv(A)
    inv_norm = float(np.linalg.norm(A_inv, 2))
    alpha_n = float(np.linalg.norm(np.eye(d) - H_t @ A_inv, 2))
    kappa_tr = lam / (mu + lam)
    g_norm = float(np.linalg.norm(g))
    r_t = g_norm / L_hat
    p_n = -A_inv @ g
    model = QuadModel(obj.value(w_t), g, lambda v: H_t @ v)
    p_tr, _ = solve_subproblem(model, r_t, tr_cfg)
    gn_tr = float(np.linalg.norm(obj.grad(w_t + p_tr)))
    gn_n = float(np.linalg.norm(obj.grad(w_t + p_n)))
    c1 = r_t <= inv_norm * g_norm
    c2 = kappa_tr <= alpha_n
    return NewtonComparison(r_t, inv_norm, kappa_tr, alpha_n, c1, c2, gn_tr, gn_n,
                            gn_tr <= gn_n + 1e-6, float(np.linalg.norm(p_n)),
                            float(np.linalg.norm(p_tr)))


# ---------------------------------------------------------------- serialization


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    return v


def save_result(result: UnlearnResult, directory: str | Path) -> list[Path]:
    """Write result.json plus sidecar parameter files; wall-clock goes to timing.json."""
    from .model import save_params

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"method": result.method, "status": result.status, "sigma": result.sigma,
           "bound": None if result.bound is None else {
               "value": result.bound.value, "method": result.bound.method,
               "components": result.bound.components},
           "info": result.info, "trace": result.trace, "params": {}}
    written = []
    for key in ("w_pre_noise", "w_certified"):
        w = getattr(result, key)
        if w is not None:
            save_params(directory / f"{key}.trpv", w)
            doc["params"][key] = f"{key}.trpv"
            written.append(directory / f"{key}.trpv")
    (directory / "result.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    (directory / "timing.json").write_text(json.dumps({"seconds": result.seconds}, indent=2) + "\n")
    return [directory / "result.json", *written, directory / "timing.json"]


def load_result(directory: str | Path) -> UnlearnResult:
    from .model import load_params

    directory = Path(directory)
    doc = json.loads((directory / "result.json").read_text())
    params = {k: load_params(directory / v) for k, v in doc["params"].items()}
    b = doc["bound"]
    bound = None if b is None else SensitivityBound(b["value"], b["method"], b["components"])
    timing = directory / "timing.json"
    seconds = json.loads(timing.read_text())["seconds"] if timing.exists() else 0.0
    return UnlearnResult(doc["method"], params.get("w_pre_noise"), bound, doc["sigma"] or 0.0,
                         params.get("w_certified"), doc["trace"], seconds, doc["status"], doc["info"])
