"""Curvature scales: Hessian spectral norm, local Lipschitz constants and the curvature floor."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .model import LossConfig, Objective


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SpectralConfig:
    iterations: int = 20
    rel_tol: float = 1e-3
    alpha_L: float = 1.05
    seed: int = 0
    refresh_every: int = 5

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha_L < 1:
            raise ValueError("alpha_L must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.refresh_every < 0:
            raise ValueError("refresh_every must be >= 0 (0 disables refresh)")


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    source: str  # "power-iteration" | "recursion"
    iterations: int = 0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.value) and self.value > 0):
            raise ValueError(f"Lipschitz estimate must be positive and finite, got {self.value}")


@dataclass(frozen=True)
class CurvatureFloor:
    mu: float
    method: str  # "damping-floor" | "smallest-eigenvalue-estimate"


def _checked(y: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NumericError("HVP oracle returned a non-finite vector")
    return y


def power_iteration(op: Callable[[np.ndarray], np.ndarray], d: int, cfg: SpectralConfig,
                    signed: bool = False) -> tuple[float, int]:
    """Dominant eigenvalue estimate of a symmetric operator.

    With ``signed=False`` returns ||A x|| for the unit iterate, which converges to
    the largest |eigenvalue| even when +λ and -λ are both present.  With
    ``signed=True`` returns the Rayleigh quotient instead.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    est = 0.0
    for k in range(1, cfg.iterations + 1):
        y = _checked(op(x))
        ny = float(np.linalg.norm(y))
        new = float(x @ y) if signed else ny
        if ny == 0.0:
            return 0.0, k
        x = y / ny
        if k > 1 and abs(new - est) <= cfg.rel_tol * abs(new):
            return new, k
        est = new
    return est, cfg.iterations


def spectral_norm(hvp_oracle: Callable[[np.ndarray], np.ndarray], d: int,
                  cfg: SpectralConfig = SpectralConfig()) -> float:
    return power_iteration(hvp_oracle, d, cfg)[0]


def estimate_local_lipschitz(w_t: np.ndarray, data: Dataset, retain: Sequence[int] | None,
                             loss_cfg: LossConfig, cfg: SpectralConfig = SpectralConfig(),
                             objective: Objective | None = None) -> LipschitzEstimate:
    """L_t = ||H_λ(w_t)|| on the retained objective, by power iteration on HVPs."""
    obj = objective if objective is not None else Objective(data, retain, loss_cfg)
    value, iters = power_iteration(obj.hessian_at(w_t), loss_cfg.spec.num_params, cfg)
    return LipschitzEstimate(value, "power-iteration", iters)


def update_lipschitz(prev: LipschitzEstimate, cfg: SpectralConfig = SpectralConfig()) -> LipschitzEstimate:
    return LipschitzEstimate(cfg.alpha_L * prev.value, "recursion", 0)


def estimate_mu(hvp_oracle: Callable[[np.ndarray], np.ndarray], lam: float,
                method: str = "damping-floor", d: int | None = None,
                cfg: SpectralConfig = SpectralConfig()) -> CurvatureFloor:
    """Curvature floor μ of the damped Hessian.

    ``damping-floor`` returns λ, valid when the undamped Hessian is PSD.
    ``smallest-eigenvalue-estimate`` runs power iteration on σI - H_λ with
    σ = ||H_λ|| and returns max(σ - top, 1e-3 λ).
    """
    if not lam > 0:
        raise ValueError("certified paths need damping λ > 0")
    if method == "damping-floor":
        return CurvatureFloor(float(lam), method)
    if method != "smallest-eigenvalue-estimate":
        raise ValueError(f"unknown curvature-floor method {method!r}")
    if d is None:
        raise ValueError("dimension d required for the eigenvalue method")
    sigma = spectral_norm(hvp_oracle, d, cfg)
    top, _ = power_iteration(lambda v: sigma * v - hvp_oracle(v), d, cfg, signed=True)
    return CurvatureFloor(max(sigma - top, lam * 1e-3), method)
