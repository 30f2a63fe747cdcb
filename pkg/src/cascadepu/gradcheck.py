"""Central finite-difference checks of every differentiable operation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .geometry import chamfer_distance
from .network import StageConfig, expand_features, init_stage, stage_forward

STEP = 1e-5
TOLERANCE = 1e-4


def noise_floor(f_value: float, step: float = STEP) -> float:
    """Gradient norm below which a central difference is mostly rounding error.

    One difference carries roughly ``eps * |f| / step`` of noise; gradients
    within a factor 1e5 of that are compared on an absolute scale instead.
    """
    return 1e5 * np.finfo(np.float64).eps * max(1.0, abs(f_value)) / step


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative error; ``floor`` bounds the denominator from below."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - n) / denom)


def _evaluate(f: Callable[[], float]) -> tuple[float, list[np.ndarray]]:
    with T.record_branches() as log:
        value = f()
    return value, log


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f: Callable[[], float], x: np.ndarray, coords=None,
                 step: float = STEP) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``f`` w.r.t. entries of ``x`` (perturbed in place).

    Also returns, per entry, whether both probes took the same discrete
    branches as the unperturbed point. Where they did not, the difference
    straddles a kink and says nothing about the derivative.
    """
    _, base = _evaluate(f)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    grads, smooth = [], []
    for i in coords:
        old = flat[i]
        flat[i] = old + step
        hi, log_hi = _evaluate(f)
        flat[i] = old - step
        lo, log_lo = _evaluate(f)
        flat[i] = old
        grads.append((hi - lo) / (2 * step))
        smooth.append(_same_branches(base, log_hi) and _same_branches(base, log_lo))
    return np.array(grads), np.array(smooth, dtype=bool)


def directional_grad(f: Callable[[], float], x: np.ndarray, direction: np.ndarray,
                     step: float = STEP) -> tuple[float, bool]:
    _, base = _evaluate(f)
    old = x.copy()
    x += step * direction
    hi, log_hi = _evaluate(f)
    x[...] = old - step * direction
    lo, log_lo = _evaluate(f)
    x[...] = old
    return (hi - lo) / (2 * step), _same_branches(base, log_hi) and _same_branches(base, log_lo)


@dataclass
class _Tally:
    worst: float = 0.0
    checked: int = 0
    skipped: int = 0

    def add(self, analytic: np.ndarray, numeric: np.ndarray, smooth: np.ndarray, floor: float) -> None:
        smooth = np.asarray(smooth, dtype=bool).reshape(-1)
        self.checked += int(smooth.sum())
        self.skipped += int((~smooth).sum())
        if smooth.any():
            a, n = np.ravel(analytic)[smooth], np.ravel(numeric)[smooth]
            self.worst = max(self.worst, rel_error(a, n, floor))


def check_function(build: Callable[[Sequence[T.Tensor]], T.Tensor], arrays: Sequence[np.ndarray],
                   rng: np.random.Generator, corrupt: bool = False) -> _Tally:
    """Worst relative error over all inputs of ``sum(build(inputs) * R)`` for a fixed random R."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    probe = build(tensors)
    weights = rng.standard_normal(probe.shape)

    def loss_value() -> float:
        with T.no_grad():
            return float(np.sum(build(tensors).data * weights))

    loss = T.tsum(T.mul(build(tensors), weights))
    T.backward(loss)
    floor = noise_floor(loss.item())
    tally = _Tally()
    for t in tensors:
        analytic = t.grad.copy() * (1.1 if corrupt else 1.0)
        tally.add(analytic, *numeric_grad(loss_value, t.data), floor)
    return tally


def _generic(rng, *shape, margin=1e-3):
    x = rng.standard_normal(shape)
    x[np.abs(x) < margin] += 10 * margin
    return x


def _stage_check(rng: np.random.Generator, corrupt: bool, n: int = 8, r: int = 2,
                 samples: int = 3) -> _Tally:
    """End-to-end stage on ``n`` points: input coordinates fully, every parameter
    tensor through one random direction plus a few sampled entries."""
    cfg = StageConfig(r=r, k_attention=4)
    params = init_stage(cfg, rng, zero_attention_out=False)
    points = T.Tensor(rng.uniform(-1, 1, (n, 3)), requires_grad=True)
    weights = rng.standard_normal((r * n, 3))

    def loss_value() -> float:
        with T.no_grad():
            return float(np.sum(stage_forward(points, params).data * weights))

    params_list = params.parameters()
    for p in params_list:
        p.zero_grad()
    loss = T.tsum(T.mul(stage_forward(points, params), weights))
    T.backward(loss)
    floor = noise_floor(loss.item())
    scale = 1.1 if corrupt else 1.0
    tally = _Tally()
    tally.add(points.grad * scale, *numeric_grad(loss_value, points.data), floor)
    for p in params_list:
        direction = rng.standard_normal(p.shape)
        direction /= np.linalg.norm(direction)
        coords = rng.choice(p.size, size=min(samples, p.size), replace=False)
        analytic = np.concatenate([[np.sum(p.grad * direction)], p.grad.reshape(-1)[coords]]) * scale
        d_value, d_smooth = directional_grad(loss_value, p.data, direction)
        c_values, c_smooth = numeric_grad(loss_value, p.data, coords)
        tally.add(analytic, np.concatenate([[d_value], c_values]),
                  np.concatenate([[d_smooth], c_smooth]), floor)
    return tally


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable[[bool], _Tally]]]:
    idx = rng.integers(0, 5, size=(5, 3))
    r = 3
    return [
        ("linear", lambda c: check_function(
            lambda t: T.linear(t[0], t[1], t[2]),
            [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)], rng, c)),
        ("relu", lambda c: check_function(lambda t: T.relu(t[0]), [_generic(rng, 4, 5)], rng, c)),
        ("softmax_rows", lambda c: check_function(
            lambda t: T.softmax_rows(t[0]), [rng.standard_normal((4, 6))], rng, c)),
        ("max_pool_points", lambda c: check_function(
            lambda t: T.max_pool_points(t[0]), [rng.standard_normal((6, 4))], rng, c)),
        ("concat_channels", lambda c: check_function(
            lambda t: T.concat_channels(t[0], t[1]),
            [rng.standard_normal((4, 2)), rng.standard_normal((4, 3))], rng, c)),
        ("duplicate_points", lambda c: check_function(
            lambda t: T.duplicate_points(t[0], r), [rng.standard_normal((3, 2))], rng, c)),
        ("deconv1d_points", lambda c: check_function(
            lambda t: T.deconv1d_points(t[0], t[1], t[2], 2),
            [rng.standard_normal((3, 4)), rng.standard_normal((2, 4, 5)), rng.standard_normal(5)], rng, c)),
        ("gather_rows", lambda c: check_function(
            lambda t: T.gather_rows(t[0], idx), [rng.standard_normal((5, 4))], rng, c)),
        ("elementwise", lambda c: check_function(
            lambda t: T.mul(T.sub(t[0], t[1]), T.add(t[0], T.reshape(t[2], (1, 3)))),
            [rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), rng.standard_normal(3)], rng, c)),
        ("chamfer_distance", lambda c: check_function(
            lambda t: T.reshape(chamfer_distance(t[0], t[1]), (1,)),
            [rng.uniform(-1, 1, (7, 3)), rng.uniform(-1, 1, (5, 3))], rng, c)),
        ("expand_features", lambda c: _expand_check(rng, c)),
        ("stage_forward", lambda c: _stage_check(rng, c)),
    ]


def _expand_check(rng: np.random.Generator, corrupt: bool) -> _Tally:
    params = init_stage(StageConfig(r=2, k_attention=4), rng)
    return check_function(lambda t: expand_features(t[0], params, 2),
                          [rng.standard_normal((6, 128))], rng, corrupt)


OPERATIONS = [name for name, _ in _cases(np.random.default_rng(0))]


@dataclass(frozen=True)
class CheckResult:
    """``skipped`` counts probes whose +/- step crossed a kink (ReLU,
    max-pool or neighbour choice) and were therefore not compared."""

    op: str
    worst: float
    checked: int
    skipped: int

    @property
    def ok(self) -> bool:
        return self.checked > 0 and self.worst < TOLERANCE


def run_suite(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    """Run every check in a fixed order. ``corrupt`` names an op whose
    analytic gradient is deliberately scaled, as a negative control."""
    if corrupt is not None and corrupt not in OPERATIONS:
        raise ValueError(f"unknown operation {corrupt!r}; choose from {OPERATIONS}")
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in _cases(rng):
        tally = fn(name == corrupt)
        results.append(CheckResult(name, tally.worst, tally.checked, tally.skipped))
    return results
