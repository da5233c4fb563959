"""Differentiable model core: parameter layout, damped loss, gradient, exact HVPs, training.

Parameters live in one flat float64 vector.  Each layer contributes its weight
matrix (fan_in x fan_out, row-major) followed by its bias.  Linear models are a
single layer; MLPs stack ``layer_sizes``.

Second-order products use Pearlmutter's R-operator written out by hand, so the
HVP is the exact Hessian of the loss (including the activation curvature term
for MLPs), not a Gauss-Newton approximation.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .dataset import Dataset

logger = logging.getLogger(__name__)

ParamVector = np.ndarray
HVPOperator = Callable[[np.ndarray], np.ndarray]

KINDS = ("linear-regression", "logistic", "mlp")
ACTIVATIONS = ("tanh", "relu")

PARAM_MAGIC = b"TRPV"
PARAM_VERSION = 1


class TrainingError(RuntimeError):
    pass


class UnsupportedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    layer_sizes: tuple[int, ...] = ()
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind == "linear-regression":
            if self.num_classes not in (0, 1):
                raise ValueError("linear-regression has a single real output (num_classes 0)")
        elif self.num_classes < 2:
            raise ValueError("classifiers need num_classes >= 2")
        if self.kind == "mlp":
            sizes = tuple(int(s) for s in self.layer_sizes)
            object.__setattr__(self, "layer_sizes", sizes)
            if len(sizes) < 2 or any(s < 1 for s in sizes):
                raise ValueError("mlp layer_sizes must list >= 2 positive widths")
            if sizes[0] != self.input_dim or sizes[-1] != self.num_classes:
                raise ValueError("mlp layer_sizes must start at input_dim and end at num_classes")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"

    @property
    def widths(self) -> tuple[int, ...]:
        if self.kind == "mlp":
            return self.layer_sizes
        out = self.num_classes if self.is_classifier else 1
        return (self.input_dim, out)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return list(zip(w[:-1], w[1:]))

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes)

    def unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into (W, b) views, one pair per layer."""
        if w.shape != (self.num_params,):
            raise ValueError(f"parameter vector has shape {w.shape}, expected ({self.num_params},)")
        layers, k = [], 0
        for fan_in, fan_out in self.layer_shapes:
            W = w[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            layers.append((W, w[k:k + fan_out]))
            k += fan_out
        return layers

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "num_classes": self.num_classes,
                "layer_sizes": list(self.layer_sizes), "activation": self.activation}


@dataclass(frozen=True)
class LossConfig:
    """Objective f(w) = mean loss + (damping / 2) ||w||^2 for the model in ``spec``."""

    spec: ModelSpec
    damping: float = 0.0

    def __post_init__(self) -> None:
        if not self.damping >= 0:
            raise ValueError("damping must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "lbfgs"
    max_iter: int = 5000
    tol: float = 1e-6
    step_size: float = 1.0
    seed: int = 0
    memory: int = 20

    def __post_init__(self) -> None:
        if self.optimizer not in ("lbfgs", "gradient-descent"):
            raise ValueError("optimizer must be 'lbfgs' or 'gradient-descent'")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 0 or self.step_size <= 0:
            raise ValueError("max_iter must be >= 0 and step_size > 0")


@dataclass
class TrainResult:
    w: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    loss: float
    history: list[float] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- initialisation


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, weights and biases alike."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in spec.layer_shapes:
        scale = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-scale, scale, fan_in * fan_out))
        parts.append(rng.uniform(-scale, scale, fan_out))
    return np.concatenate(parts)


# ---------------------------------------------------------------- objective


def _act(name: str, z: np.ndarray):
    """Return (a, a', a'') for the activation applied to z."""
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    a = np.maximum(z, 0.0)
    d1 = (z > 0).astype(z.dtype)
    return a, d1, None  # relu'' = 0 almost everywhere


class Objective:
    """Damped empirical objective restricted to a subset of a dataset.

    The subset rows are gathered once, so repeated evaluations (CG, power
    iteration) do not copy the feature matrix again.
    """

    def __init__(self, data: Dataset, subset: Sequence[int] | None, cfg: LossConfig):
        spec = cfg.spec
        if data.dim != spec.input_dim:
            raise ValueError(f"dataset dim {data.dim} != model input_dim {spec.input_dim}")
        if spec.is_classifier != data.is_classification:
            raise ValueError("model kind does not match dataset labels")
        if subset is None:
            X, y = data.X, data.y
        else:
            idx = np.asarray(subset, dtype=np.int64)
            if idx.size == 0:
                raise ValueError("subset must be non-empty")
            X, y = data.X[idx], data.y[idx]
        self.spec = spec
        self.damping = float(cfg.damping)
        self.X = X
        self.y = y
        self.n = X.shape[0]
        if spec.is_classifier:
            self.onehot = np.zeros((self.n, spec.num_classes))
            self.onehot[np.arange(self.n), y] = 1.0

    # -- forward ---------------------------------------------------------
    def _forward(self, w: np.ndarray):
        layers = self.spec.unpack(w)
        acts, derivs = [self.X], []
        a = self.X
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            if i < len(layers) - 1:
                a, d1, d2 = _act(self.spec.activation, z)
                acts.append(a)
                derivs.append((d1, d2, z))
            else:
                out = z
        return layers, acts, derivs, out

    def outputs(self, w: np.ndarray) -> np.ndarray:
        return self._forward(w)[3]

    def per_example_loss(self, w: np.ndarray) -> np.ndarray:
        out = self.outputs(w)
        if self.spec.is_classifier:
            return logsumexp(out, axis=1) - out[np.arange(self.n), self.y]
        return 0.5 * (out[:, 0] - self.y) ** 2

    def data_loss(self, w: np.ndarray) -> float:
        return float(np.mean(self.per_example_loss(w)))

    def value(self, w: np.ndarray) -> float:
        return self.data_loss(w) + 0.5 * self.damping * float(w @ w)

    # -- first order -----------------------------------------------------
    def _output_delta(self, out: np.ndarray) -> np.ndarray:
        if self.spec.is_classifier:
            return (softmax(out, axis=1) - self.onehot) / self.n
        return (out - self.y[:, None]) / self.n

    def value_and_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        layers, acts, derivs, out = self._forward(w)
        if self.spec.is_classifier:
            logp = log_softmax(out, axis=1)
            data_loss = -float(np.mean(logp[np.arange(self.n), self.y]))
        else:
            data_loss = 0.5 * float(np.mean((out[:, 0] - self.y) ** 2))
        delta = self._output_delta(out)
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append((acts[i].T @ delta).ravel())
            if i > 0:
                delta = (delta @ layers[i][0].T) * derivs[i - 1][0]
        g = np.concatenate(grads[::-1])
        return data_loss + 0.5 * self.damping * float(w @ w), g + self.damping * w

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.value_and_grad(w)[1]

    # -- second order ----------------------------------------------------
    def hessian_at(self, w: np.ndarray, damping: float | None = None) -> HVPOperator:
        """Return v -> (data Hessian + damping I) v at ``w``, caching the forward pass.

        ``damping`` defaults to the objective's own λ.
        """
        lam = self.damping if damping is None else float(damping)
        spec = self.spec
        layers, acts, derivs, out = self._forward(w)
        n = self.n
        if spec.is_classifier:
            probs = softmax(out, axis=1)
            delta_out = (probs - self.onehot) / n
        else:
            probs = None
            delta_out = (out - self.y[:, None]) / n
        # backward deltas at the base point, layer by layer
        deltas = [None] * len(layers)
        delta = delta_out
        for i in range(len(layers) - 1, -1, -1):
            deltas[i] = delta
            if i > 0:
                delta = (delta @ layers[i][0].T) * derivs[i - 1][0]
        d = spec.num_params

        def hvp(v: np.ndarray) -> np.ndarray:
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (d,):
                raise ValueError(f"vector has shape {v.shape}, expected ({d},)")
            vlayers = spec.unpack(v)
            # forward R-pass
            r_acts = [None]
            r_z = []
            ra = None
            for i, ((W, _), (V, vb)) in enumerate(zip(layers, vlayers)):
                rz = acts[i] @ V + vb
                if ra is not None:
                    rz += ra @ W
                r_z.append(rz)
                if i < len(layers) - 1:
                    ra = derivs[i][0] * rz
                    r_acts.append(ra)
            rz_out = r_z[-1]
            if probs is not None:
                sr = probs * rz_out
                r_delta = (sr - probs * sr.sum(axis=1, keepdims=True)) / n
            else:
                r_delta = rz_out / n
            # backward R-pass
            parts = []
            for i in range(len(layers) - 1, -1, -1):
                W, _ = layers[i]
                V, _ = vlayers[i]
                hW = acts[i].T @ r_delta
                if r_acts[i] is not None:
                    hW += r_acts[i].T @ deltas[i]
                parts.append(r_delta.sum(axis=0))
                parts.append(hW.ravel())
                if i > 0:
                    d1, d2, _ = derivs[i - 1]
                    da = deltas[i] @ W.T
                    r_da = r_delta @ W.T + deltas[i] @ V.T
                    r_delta = r_da * d1
                    if d2 is not None:
                        r_delta += da * d2 * r_z[i - 1]
            return np.concatenate(parts[::-1]) + lam * v

        return hvp

    def hvp(self, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.hessian_at(w)(v)

    def predict(self, w: np.ndarray) -> np.ndarray:
        out = self.outputs(w)
        return np.argmax(out, axis=1) if self.spec.is_classifier else out[:, 0]


# ---------------------------------------------------------------- functional surface


def loss(w: np.ndarray, data: Dataset, subset: Sequence[int] | None, cfg: LossConfig) -> float:
    return Objective(data, subset, cfg).value(w)


def grad(w: np.ndarray, data: Dataset, subset: Sequence[int] | None, cfg: LossConfig) -> np.ndarray:
    return Objective(data, subset, cfg).grad(w)


def hvp(w: np.ndarray, data: Dataset, subset: Sequence[int] | None, cfg: LossConfig,
        v: np.ndarray) -> np.ndarray:
    return Objective(data, subset, cfg).hvp(w, v)


def per_example_loss(w: np.ndarray, data: Dataset, subset: Sequence[int] | None,
                     spec: ModelSpec) -> np.ndarray:
    return Objective(data, subset, LossConfig(spec)).per_example_loss(w)


def predict(w: np.ndarray, data: Dataset, subset: Sequence[int] | None, spec: ModelSpec) -> np.ndarray:
    return Objective(data, subset, LossConfig(spec)).predict(w)


def micro_f1(w: np.ndarray, data: Dataset, subset: Sequence[int] | None, spec: ModelSpec) -> float:
    """Micro-averaged F1 of argmax predictions (ties go to the lowest class index).

    For single-label multiclass data every error is one false positive and one
    false negative, so micro precision = micro recall = accuracy.
    """
    if not spec.is_classifier:
        raise UnsupportedMetricError("micro F1 is undefined for regression models")
    obj = Objective(data, subset, LossConfig(spec))
    pred = obj.predict(w)
    tp = int(np.sum(pred == obj.y))
    fp = fn = obj.n - tp
    return 2 * tp / (2 * tp + fp + fn)


# ---------------------------------------------------------------- training


def train(spec: ModelSpec, data: Dataset, subset: Sequence[int] | None, cfg: TrainConfig,
          loss_cfg: LossConfig, w0: np.ndarray | None = None) -> TrainResult:
    """Minimise the damped objective on ``subset`` until ||grad|| <= cfg.tol."""
    if loss_cfg.spec != spec:
        raise ValueError("loss config refers to a different model spec")
    obj = Objective(data, subset, loss_cfg)
    w = init_params(spec, cfg.seed) if w0 is None else np.array(w0, dtype=np.float64)
    if cfg.optimizer == "lbfgs":
        return _lbfgs(obj, w, cfg)
    return _gradient_descent(obj, w, cfg)


def _check_finite(f: float, it: int) -> None:
    if not np.isfinite(f):
        raise TrainingError(f"objective became non-finite at iteration {it}")


def _gradient_descent(obj: Objective, w: np.ndarray, cfg: TrainConfig) -> TrainResult:
    f, g = obj.value_and_grad(w)
    _check_finite(f, 0)
    history = [f]
    step = cfg.step_size
    it = 0
    while it < cfg.max_iter and np.linalg.norm(g) > cfg.tol:
        gg = float(g @ g)
        while True:
            w_new = w - step * g
            f_new, g_new = obj.value_and_grad(w_new)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * step * gg:
                break
            if np.isfinite(f_new) and abs(f_new - f) <= 1e-14 * max(1.0, abs(f)) \
                    and np.linalg.norm(g_new) < np.linalg.norm(g):
                break  # roundoff floor: accept on gradient decrease
            step *= 0.5
            if step < 1e-20:
                raise TrainingError("gradient descent line search failed")
        w, f, g = w_new, f_new, g_new
        it += 1
        history.append(f)
        step = min(step * 2.0, cfg.step_size)
    gn = float(np.linalg.norm(g))
    return TrainResult(w, gn <= cfg.tol, it, gn, f, history)


def _lbfgs(obj: Objective, w: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Limited-memory BFGS: two-loop recursion plus backtracking Armijo search.

    Near the optimum, objective differences fall below float64 resolution; a
    step is then accepted when it reduces the gradient norm instead.
    """
    f, g = obj.value_and_grad(w)
    _check_finite(f, 0)
    history = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    it = 0
    gn = float(np.linalg.norm(g))
    while it < cfg.max_iter and gn > cfg.tol:
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q *= min(1.0, cfg.step_size / max(gn, 1e-300))
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        p = -q
        slope = float(g @ p)
        if slope >= 0:  # lost descent; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            p = -g * min(1.0, cfg.step_size / gn)
            slope = float(g @ p)
        step = 1.0
        while True:
            w_new = w + step * p
            f_new, g_new = obj.value_and_grad(w_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                break
            gn_new = float(np.linalg.norm(g_new)) if np.isfinite(f_new) else np.inf
            if np.isfinite(f_new) and abs(f_new - f) <= 1e-14 * max(1.0, abs(f)) and gn_new < gn:
                break
            step *= 0.5
            if step < 1e-12:
                if s_hist:
                    s_hist.clear()
                    y_hist.clear()
                    break
                raise TrainingError(f"line search failed at iteration {it}")
        if step < 1e-12:
            continue
        _check_finite(f_new, it + 1)
        s, yv = w_new - w, g_new - g
        if s @ yv > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        w, f, g = w_new, f_new, g_new
        gn = float(np.linalg.norm(g))
        it += 1
        history.append(f)
    if gn > cfg.tol:
        logger.info("training stopped at max_iter=%d with ||g||=%.3e", cfg.max_iter, gn)
    return TrainResult(w, gn <= cfg.tol, it, gn, f, history)


# ---------------------------------------------------------------- serialization


def save_params(path: str | Path, w: np.ndarray) -> None:
    """Write ``w`` as little-endian float64 after a 16-byte header (magic, version, length)."""
    w = np.asarray(w, dtype="<f8")
    if not np.all(np.isfinite(w)):
        raise ValueError("refusing to save non-finite parameters")
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC + struct.pack("<IQ", PARAM_VERSION, w.size))
        fh.write(w.tobytes())


def load_params(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter vector file")
    version, length = struct.unpack("<IQ", blob[4:16])
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if len(blob) != 16 + 8 * length:
        raise ValueError(f"{path}: expected {length} values, file size disagrees")
    return np.frombuffer(blob[16:], dtype="<f8").astype(np.float64)
