"""Neighborhood flatness estimators and curvature diagnostics.

Two complementary notions over a radius-rho ball around a point:

* zeroth order: the worst loss increase inside the ball,
* first order: rho times the largest gradient norm inside the ball.

Their convex combination ``alpha*r0 + (1-alpha)*r1`` is the regularizer the
fad optimizer targets; near a minimum where a quadratic model holds, that
combination pins the top Hessian eigenvalue via

    lambda_max = r_fad / (rho^2 * (1 - alpha/2)).

Curvature is probed matrix-free: power iteration with finite-difference
Hessian-vector products for the leading eigenvalues, and Rademacher probes for
the trace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, ConfigError
from .objectives import (
    DEFAULT_FD_STEP,
    Batch,
    Objective,
    Vector,
    eval_grad,
    eval_loss,
    hvp_fd,
)


@dataclass(frozen=True)
class FlatnessBudget:
    """Restart/step budget for the ball-ascent estimators.

    ``ascent_lr = None`` selects gradient-normalized steps of length 10*rho
    (a projected power-type update, accurate on near-quadratic bowls); a float
    requests plain fixed-rate gradient ascent with that learning rate.
    """

    n_random: int = 16
    n_ascent_steps: int = 50
    ascent_lr: float | None = None

    def __post_init__(self) -> None:
        if self.n_random < 1 or self.n_ascent_steps < 1:
            raise BudgetError(
                f"budget must be positive, got restarts={self.n_random}, "
                f"steps={self.n_ascent_steps}"
            )
        if self.ascent_lr is not None and self.ascent_lr <= 0.0:
            raise BudgetError(f"ascent_lr must be positive, got {self.ascent_lr}")

    def to_dict(self) -> dict:
        return {
            "n_random": self.n_random,
            "n_ascent_steps": self.n_ascent_steps,
            "ascent_lr": self.ascent_lr,
        }


def _uniform_in_ball(dim: int, rho: float, rng: np.random.Generator) -> Vector:
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return np.zeros(dim)
    radius = rho * rng.uniform() ** (1.0 / dim)
    return direction * (radius / norm)


def _project_to_ball(center: Vector, rho: float, x: Vector) -> Vector:
    offset = x - center
    norm = float(np.linalg.norm(offset))
    if norm <= rho:
        return x
    return center + offset * (rho / norm)


def _ascent_move(
    center: Vector, rho: float, x: Vector, direction: Vector, budget: FlatnessBudget
) -> Vector:
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return x
    if budget.ascent_lr is not None:
        step = budget.ascent_lr
    else:
        step = 10.0 * rho / norm
    return _project_to_ball(center, rho, x + step * direction)


def zeroth_order_flatness(
    obj: Objective,
    theta: Vector,
    rho: float,
    batch: Batch | None = None,
    budget: FlatnessBudget | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Estimate max over the rho-ball of loss(theta') - loss(theta), clamped at 0.

    Multi-restart projected gradient ascent; every evaluated point lies inside
    the ball, so the estimate never exceeds the true maximum.
    """
    if rho <= 0.0:
        raise ConfigError(f"rho must be positive, got {rho}")
    budget = budget or FlatnessBudget()
    rng = rng or np.random.default_rng(0)
    base = eval_loss(obj, theta, batch)
    best = base
    for _ in range(budget.n_random):
        x = theta + _uniform_in_ball(obj.dim, rho, rng)
        best = max(best, eval_loss(obj, x, batch))
        for _ in range(budget.n_ascent_steps):
            g = eval_grad(obj, x, batch)
            x = _ascent_move(theta, rho, x, g, budget)
            best = max(best, eval_loss(obj, x, batch))
    return max(best - base, 0.0)


def first_order_flatness(
    obj: Objective,
    theta: Vector,
    rho: float,
    batch: Batch | None = None,
    budget: FlatnessBudget | None = None,
    rng: np.random.Generator | None = None,
    fd_step: float = DEFAULT_FD_STEP,
) -> float:
    """Estimate rho times the largest gradient norm over the rho-ball.

    Ascent follows the gradient of ||grad||, i.e. H(x) @ grad / ||grad||,
    approximated with one finite-difference Hessian-vector product per step.
    """
    if rho <= 0.0:
        raise ConfigError(f"rho must be positive, got {rho}")
    budget = budget or FlatnessBudget()
    rng = rng or np.random.default_rng(0)
    best = float(np.linalg.norm(eval_grad(obj, theta, batch)))
    for _ in range(budget.n_random):
        x = theta + _uniform_in_ball(obj.dim, rho, rng)
        for _ in range(budget.n_ascent_steps):
            g = eval_grad(obj, x, batch)
            norm_g = float(np.linalg.norm(g))
            best = max(best, norm_g)
            if norm_g == 0.0:
                break
            direction = hvp_fd(obj, x, g, batch, fd_step) / norm_g
            x = _ascent_move(theta, rho, x, direction, budget)
        best = max(best, float(np.linalg.norm(eval_grad(obj, x, batch))))
    return rho * best


def fad_regularizer(r0: float, r1: float, alpha: float) -> float:
    """Convex combination alpha*r0 + (1-alpha)*r1 of the two flatness orders."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * r0 + (1.0 - alpha) * r1


def total_objective(
    obj: Objective,
    theta: Vector,
    rho: float,
    alpha: float,
    beta: float,
    batch: Batch | None = None,
    budget: FlatnessBudget | None = None,
    seed: int = 0,
) -> float:
    """loss(theta) + beta * (alpha*r0 + (1-alpha)*r1) with estimated r0, r1."""
    if beta < 0.0:
        raise ConfigError(f"beta must be nonnegative, got {beta}")
    rng = np.random.default_rng(seed)
    r0 = zeroth_order_flatness(obj, theta, rho, batch, budget, rng)
    r1 = first_order_flatness(obj, theta, rho, batch, budget, rng)
    return eval_loss(obj, theta, batch) + beta * fad_regularizer(r0, r1, alpha)


def lambda_max_from_fad(r_fad: float, rho: float, alpha: float) -> float:
    """Invert the quadratic-model identity to read lambda_max off the regularizer."""
    if rho <= 0.0:
        raise ConfigError(f"rho must be positive, got {rho}")
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return r_fad / (rho * rho * (1.0 - alpha / 2.0))


def power_iteration_lambda_max(
    obj: Objective,
    theta: Vector,
    batch: Batch | None = None,
    k: int = 1,
    tol: float = 1e-8,
    max_iter: int = 1000,
    fd_step: float = DEFAULT_FD_STEP,
    rng: np.random.Generator | None = None,
) -> tuple[Vector, list[bool]]:
    """Top-k Hessian eigenvalues by deflated power iteration on FD products.

    Returns (eigenvalues sorted nonincreasing, per-eigenvalue convergence
    flags). An entry converged when successive Rayleigh quotients differed by
    less than ``tol``; False means max_iter was exhausted first.
    """
    if k < 1 or k > obj.dim:
        raise ConfigError(f"k must be in [1, {obj.dim}], got {k}")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    rng = rng or np.random.default_rng(0)
    basis: list[Vector] = []
    values: list[float] = []
    flags: list[bool] = []
    for _ in range(k):
        v = rng.choice(np.array([-1.0, 1.0]), size=obj.dim)
        for u in basis:
            v = v - (u @ v) * u
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            values.append(0.0)
            flags.append(True)
            continue
        v = v / norm
        rq_prev = np.inf
        converged = False
        rq = 0.0
        for _ in range(max_iter):
            w = hvp_fd(obj, theta, v, batch, fd_step)
            for u in basis:
                w = w - (u @ w) * u
            rq = float(v @ w)
            norm_w = float(np.linalg.norm(w))
            if norm_w == 0.0:
                converged = True
                break
            v = w / norm_w
            for u in basis:
                v = v - (u @ v) * u
            v = v / np.linalg.norm(v)
            if abs(rq - rq_prev) < tol:
                converged = True
                break
            rq_prev = rq
        basis.append(v)
        values.append(rq)
        flags.append(converged)
    order = np.argsort(values)[::-1]
    return (
        np.array([values[i] for i in order], dtype=np.float64),
        [flags[i] for i in order],
    )


def hutchinson_trace(
    obj: Objective,
    theta: Vector,
    batch: Batch | None = None,
    n_probes: int = 64,
    fd_step: float = DEFAULT_FD_STEP,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Hessian trace estimate (mean, standard error) from Rademacher probes."""
    if n_probes < 2:
        raise BudgetError(f"need at least 2 probes, got {n_probes}")
    rng = rng or np.random.default_rng(0)
    signs = np.array([-1.0, 1.0])
    vals = np.empty(n_probes)
    for i in range(n_probes):
        v = rng.choice(signs, size=obj.dim)
        vals[i] = float(v @ hvp_fd(obj, theta, v, batch, fd_step))
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n_probes))


@dataclass(frozen=True)
class FlatnessReport:
    """Flatness and curvature summary of one point of one loss surface."""

    rho: float
    alpha: float
    r0: float
    r1: float
    r_fad: float
    lambda_max: float
    top_eigs: tuple[float, ...]
    trace: float
    trace_stderr: float
    budget: dict
    seed: int

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "alpha": self.alpha,
            "r0": self.r0,
            "r1": self.r1,
            "r_fad": self.r_fad,
            "lambda_max": self.lambda_max,
            "top_eigs": list(self.top_eigs),
            "trace": self.trace,
            "trace_stderr": self.trace_stderr,
            "budget": dict(self.budget),
            "seed": self.seed,
        }


def build_flatness_report(
    obj: Objective,
    theta: Vector,
    rho: float,
    alpha: float,
    batch: Batch | None = None,
    budget: FlatnessBudget | None = None,
    k_eigs: int = 2,
    n_probes: int = 64,
    fd_step: float = DEFAULT_FD_STEP,
    tol: float = 1e-8,
    max_iter: int = 1000,
    seed: int = 0,
) -> FlatnessReport:
    """Run all estimators at one point with a single seeded RNG stream."""
    if rho <= 0.0:
        raise ConfigError(f"rho must be positive, got {rho}")
    budget = budget or FlatnessBudget()
    k_eigs = min(k_eigs, obj.dim)
    rng = np.random.default_rng(seed)
    r0 = zeroth_order_flatness(obj, theta, rho, batch, budget, rng)
    r1 = first_order_flatness(obj, theta, rho, batch, budget, rng, fd_step)
    r_fad = fad_regularizer(r0, r1, alpha)
    eigs, _ = power_iteration_lambda_max(
        obj, theta, batch, k=k_eigs, tol=tol, max_iter=max_iter, fd_step=fd_step, rng=rng
    )
    trace, trace_se = hutchinson_trace(obj, theta, batch, n_probes, fd_step, rng)
    budget_doc = budget.to_dict()
    budget_doc.update({"k_eigs": k_eigs, "n_probes": n_probes, "fd_step": fd_step})
    return FlatnessReport(
        rho=float(rho),
        alpha=float(alpha),
        r0=float(r0),
        r1=float(r1),
        r_fad=float(r_fad),
        lambda_max=float(eigs[0]),
        top_eigs=tuple(float(e) for e in eigs),
        trace=float(trace),
        trace_stderr=float(trace_se),
        budget=budget_doc,
        seed=int(seed),
    )
