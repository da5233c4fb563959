"""Trust-region machinery: clipped radius, Steihaug-Toint truncated CG, Cauchy fallback,
agreement ratio and radius adaptation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .spectral import NumericError

HVPOperator = Callable[[np.ndarray], np.ndarray]

PATH_INTERIOR = "cg-interior"
PATH_BOUNDARY = "cg-boundary"
PATH_CAUCHY = "cauchy-fallback"


class StationaryPoint(Exception):
    """Gradient norm is zero: the caller should stop iterating."""


class DegenerateModel(Exception):
    """Predicted reduction is not positive; the step must be rejected."""


@dataclass(frozen=True)
class TRConfig:
    eta1: float = 0.1
    eta2: float = 0.9
    gamma_dec: float = 0.5
    gamma_inc: float = 2.0
    tau: float = 1.0
    delta0: float = 1.0
    max_iter: int = 10
    cg_max_iter: int = 250
    cg_tol: float | None = None  # None: forcing term min(0.5, sqrt(||g||)) * ||g||
    kappa: float = 0.5
    max_rejections: int = 10
    grad_tol: float | None = None  # None: 1e-6 * max(1, ||g_0||)

    def __post_init__(self) -> None:
        if not 0 < self.eta1 < self.eta2 < 1:
            raise ValueError("need 0 < eta1 < eta2 < 1")
        if not 0 < self.gamma_dec < 1 < self.gamma_inc:
            raise ValueError("need 0 < gamma_dec < 1 < gamma_inc")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")
        if self.max_iter < 0 or self.cg_max_iter < 1 or self.max_rejections < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class QuadModel:
    """m(p) = f0 + g·p + ½ p·Hp."""

    f0: float
    g: np.ndarray
    hvp: HVPOperator

    def reduction(self, p: np.ndarray, Hp: np.ndarray | None = None) -> float:
        """m(0) - m(p)."""
        if Hp is None:
            Hp = self.hvp(p)
        return -float(self.g @ p) - 0.5 * float(p @ Hp)


@dataclass
class TRState:
    w: np.ndarray
    delta: float
    delta_bar: float
    L: float
    t: int = 0
    radii: list[float] = field(default_factory=list)


@dataclass
class StepOutcome:
    p: np.ndarray
    model_reduction: float
    actual_reduction: float
    rho: float
    accepted: bool
    next_delta: float
    path: str


def clipped_radius(delta_t: float, g_norm: float, L_t: float, tau: float) -> float:
    """min(Δ_t, τ ||g|| / L_t)."""
    if g_norm == 0:
        raise StationaryPoint("zero gradient")
    if not (delta_t > 0 and g_norm > 0 and L_t > 0 and 0 < tau <= 1):
        raise ValueError("clipped_radius needs positive inputs and tau in (0, 1]")
    return min(delta_t, tau * g_norm / L_t)


def cauchy_point(g: np.ndarray, Hg: np.ndarray, radius: float) -> np.ndarray:
    """Minimiser of the quadratic model along -g within the ball."""
    gn = float(np.linalg.norm(g))
    if gn == 0:
        raise StationaryPoint("zero gradient")
    t = radius / gn
    curv = float(g @ Hg)
    if curv > 0:
        t = min(t, gn * gn / curv)
    return -t * g


def _boundary_tau(p: np.ndarray, d: np.ndarray, radius: float) -> float:
    """Positive root τ of ||p + τ d|| = radius."""
    dd = float(d @ d)
    pd = float(p @ d)
    pp = float(p @ p)
    disc = max(pd * pd + dd * (radius * radius - pp), 0.0)
    root = math.sqrt(disc)
    # numerically stable form of (-pd + root) / dd
    return (radius * radius - pp) / (pd + root) if pd > 0 else (-pd + root) / dd


def steihaug_cg(model: QuadModel, radius: float, tol: float, max_iter: int
                ) -> tuple[np.ndarray, str, np.ndarray]:
    """Steihaug-Toint truncated CG from p = 0.  Returns (p, path, H p)."""
    g = model.g
    p = np.zeros_like(g)
    Hp = np.zeros_like(g)
    r = g.copy()
    d = -r
    rr = float(r @ r)
    if math.sqrt(rr) <= tol:
        return p, PATH_INTERIOR, Hp
    for _ in range(max_iter):
        Hd = model.hvp(d)
        if not np.all(np.isfinite(Hd)):
            raise NumericError("HVP oracle returned a non-finite vector")
        dHd = float(d @ Hd)
        if dHd <= 0:
            tau = _boundary_tau(p, d, radius)
            return p + tau * d, PATH_BOUNDARY, Hp + tau * Hd
        alpha = rr / dHd
        p_next = p + alpha * d
        if np.linalg.norm(p_next) >= radius:
            tau = _boundary_tau(p, d, radius)
            return p + tau * d, PATH_BOUNDARY, Hp + tau * Hd
        p = p_next
        Hp = Hp + alpha * Hd
        r = r + alpha * Hd
        rr_next = float(r @ r)
        if math.sqrt(rr_next) <= tol:
            return p, PATH_INTERIOR, Hp
        d = -r + (rr_next / rr) * d
        rr = rr_next
    return p, PATH_INTERIOR, Hp


def cg_tolerance(g_norm: float, cfg: TRConfig) -> float:
    if cfg.cg_tol is not None:
        return cfg.cg_tol * g_norm
    return min(0.5, math.sqrt(g_norm)) * g_norm


def solve_subproblem(model: QuadModel, radius: float, cfg: TRConfig = TRConfig(),
                     Hg: np.ndarray | None = None) -> tuple[np.ndarray, str]:
    """Approximately minimise m(p) over ||p|| <= radius.

    Steihaug CG is accepted only if it achieves κ times the Cauchy decrease;
    otherwise the Cauchy point is returned.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    gn = float(np.linalg.norm(model.g))
    if gn == 0:
        return np.zeros_like(model.g), PATH_INTERIOR
    p, path, Hp = steihaug_cg(model, radius, cg_tolerance(gn, cfg), cfg.cg_max_iter)
    if Hg is None:
        Hg = model.hvp(model.g)
    pc = cauchy_point(model.g, Hg, radius)
    # H pc = -t H g since pc is a multiple of g
    t = -float(pc @ model.g) / (gn * gn)
    cauchy_red = model.reduction(pc, -t * Hg)
    cg_red = model.reduction(p, Hp)
    if not np.isfinite(cg_red) or cg_red < cfg.kappa * cauchy_red:
        return pc, PATH_CAUCHY
    return p, path


def agreement_ratio(f_t: float, f_next: float, m0: float, m_p: float) -> float:
    pred = m0 - m_p
    if pred <= 1e-14:
        raise DegenerateModel(f"predicted reduction {pred:.3e} is not positive")
    return (f_t - f_next) / pred


def update_radius(delta_t: float, rho_t: float, cfg: TRConfig = TRConfig()) -> float:
    if not delta_t > 0:
        raise ValueError("radius must be positive")
    if rho_t >= cfg.eta2:
        return cfg.gamma_inc * delta_t
    if rho_t >= cfg.eta1:
        return delta_t
    return cfg.gamma_dec * delta_t
