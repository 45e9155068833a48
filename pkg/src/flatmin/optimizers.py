"""First-order optimizers with flatness-aware perturbation steps.

The flatness-aware step (``fad``) estimates two sharpness corrections per
iteration from gradients at three auxiliary points and descends along

    delta = g0 + beta * (alpha * h0 + (1 - alpha) * h1)

where h0 is the gradient change toward the local ascent point and h1 the
gradient change along a second probe started from the h0 direction. ``sam``
keeps only the ascent-point gradient, ``gam`` only the h1 correction; both are
exact reductions of the fad step. All gradients within one step are evaluated
on the same minibatch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericalError
from .objectives import Batch, Objective, Vector, eval_grad, eval_loss, sample_batch

METHODS = ("sgd", "momentum_sgd", "adam", "adamw", "sam", "gam", "fad")
SCHEDULES = ("constant", "inverse_sqrt")

LOG_COLUMNS = (
    "run_id",
    "method",
    "seed",
    "t",
    "eta_t",
    "rho_t",
    "loss",
    "norm_g0",
    "norm_h0",
    "norm_h1",
    "norm_delta",
    "fad_applied",
    "wall_ms",
)


@dataclass(frozen=True)
class OptimizerConfig:
    method: str
    eta0: float
    rho0: float = 0.0
    alpha: float = 0.5
    beta: float = 0.1
    xi: float = 1e-12
    schedule: str = "constant"
    fad_ratio: float = 1.0
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}', expected one of {METHODS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule '{self.schedule}', expected one of {SCHEDULES}")
        if not (self.eta0 > 0.0):
            raise ConfigError(f"eta0 must be positive, got {self.eta0}")
        if self.rho0 < 0.0:
            raise ConfigError(f"rho0 must be nonnegative, got {self.rho0}")
        if self.method in ("sam", "gam", "fad") and not (self.rho0 > 0.0):
            raise ConfigError(f"method '{self.method}' needs rho0 > 0")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.xi < 0.0:
            raise ConfigError(f"xi must be nonnegative, got {self.xi}")
        if not (0.0 <= self.fad_ratio <= 1.0):
            raise ConfigError(f"fad_ratio must be in [0, 1], got {self.fad_ratio}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("adam_beta1", "adam_beta2"):
            val = getattr(self, name)
            if not (0.0 <= val < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {val}")
        if not (self.adam_eps > 0.0):
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class OptimizerState:
    """Mutable per-run state: step counter, moment buffers, RNG streams.

    ``rng`` drives batch sampling; ``ratio_rng`` is a separate stream for the
    per-step fad_ratio coin flips so that turning the ratio up or down never
    changes which batches a run sees.
    """

    t: int
    rng: np.random.Generator
    ratio_rng: np.random.Generator
    momentum_buf: Vector | None = None
    adam_m: Vector | None = None
    adam_v: Vector | None = None

    @classmethod
    def fresh(cls, seed: int) -> "OptimizerState":
        return cls(
            t=0,
            rng=np.random.default_rng(int(seed)),
            ratio_rng=np.random.default_rng([int(seed), 1]),
        )


@dataclass(frozen=True)
class StepTrace:
    """Everything one optimizer step computed, for logging and diagnostics."""

    t: int
    eta_t: float
    rho_t: float
    loss_before: float
    g0: Vector
    h0: Vector
    h1: Vector
    delta: Vector
    fad_applied: bool
    g1: Vector | None = None
    g2: Vector | None = None
    g3: Vector | None = None

    @property
    def norm_g0(self) -> float:
        return float(np.linalg.norm(self.g0))

    @property
    def norm_h0(self) -> float:
        return float(np.linalg.norm(self.h0))

    @property
    def norm_h1(self) -> float:
        return float(np.linalg.norm(self.h1))

    @property
    def norm_delta(self) -> float:
        return float(np.linalg.norm(self.delta))


def schedule_value(base: float, schedule: str, t: int) -> float:
    """Value of a scheduled coefficient at 1-indexed step t."""
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    if schedule == "constant":
        return base
    if schedule == "inverse_sqrt":
        return base / np.sqrt(float(t))
    raise ConfigError(f"unknown schedule '{schedule}'")


def _draw_batch(obj: Objective, state: OptimizerState, config: OptimizerConfig) -> Batch | None:
    if obj.dataset is None or config.batch_size is None:
        return None
    return sample_batch(obj.dataset, config.batch_size, state.rng)


def _grad(obj: Objective, theta: Vector, batch: Batch | None, wd: float) -> Vector:
    # coupled L2: the regularized objective's gradient at the evaluation point
    g = eval_grad(obj, theta, batch)
    if wd != 0.0:
        g = g + wd * theta
    return g


def _finish(theta_next: Vector) -> Vector:
    if not np.all(np.isfinite(theta_next)):
        raise NumericalError("parameter update produced non-finite values")
    return theta_next


StepFn = Callable[[Objective, Vector, OptimizerState, OptimizerConfig], tuple[Vector, StepTrace]]


def sgd_step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    t = state.t + 1
    eta = schedule_value(config.eta0, config.schedule, t)
    rho = schedule_value(config.rho0, config.schedule, t)
    batch = _draw_batch(obj, state, config)
    loss0 = eval_loss(obj, theta, batch)
    g0 = _grad(obj, theta, batch, config.weight_decay)
    zero = np.zeros_like(g0)
    state.t = t
    trace = StepTrace(t, eta, rho, loss0, g0, zero, zero, g0, False)
    return _finish(theta - eta * g0), trace


def momentum_sgd_step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    t = state.t + 1
    eta = schedule_value(config.eta0, config.schedule, t)
    rho = schedule_value(config.rho0, config.schedule, t)
    batch = _draw_batch(obj, state, config)
    loss0 = eval_loss(obj, theta, batch)
    g0 = _grad(obj, theta, batch, config.weight_decay)
    if state.momentum_buf is None:
        state.momentum_buf = np.zeros_like(g0)
    state.momentum_buf = config.momentum * state.momentum_buf + g0
    zero = np.zeros_like(g0)
    state.t = t
    trace = StepTrace(t, eta, rho, loss0, g0, zero, zero, state.momentum_buf, False)
    return _finish(theta - eta * state.momentum_buf), trace


def _adam_direction(
    g0: Vector, state: OptimizerState, config: OptimizerConfig, t: int
) -> Vector:
    if state.adam_m is None:
        state.adam_m = np.zeros_like(g0)
        state.adam_v = np.zeros_like(g0)
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.adam_m = b1 * state.adam_m + (1.0 - b1) * g0
    state.adam_v = b2 * state.adam_v + (1.0 - b2) * g0 * g0
    mhat = state.adam_m / (1.0 - b1**t)
    vhat = state.adam_v / (1.0 - b2**t)
    return mhat / (np.sqrt(vhat) + config.adam_eps)


def adam_step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    t = state.t + 1
    eta = schedule_value(config.eta0, config.schedule, t)
    rho = schedule_value(config.rho0, config.schedule, t)
    batch = _draw_batch(obj, state, config)
    loss0 = eval_loss(obj, theta, batch)
    g0 = _grad(obj, theta, batch, config.weight_decay)
    direction = _adam_direction(g0, state, config, t)
    zero = np.zeros_like(g0)
    state.t = t
    trace = StepTrace(t, eta, rho, loss0, g0, zero, zero, direction, False)
    return _finish(theta - eta * direction), trace


def adamw_step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    """Adam with decoupled decay: theta shrinks by (1 - eta_t*wd) outside the moments."""
    t = state.t + 1
    eta = schedule_value(config.eta0, config.schedule, t)
    rho = schedule_value(config.rho0, config.schedule, t)
    batch = _draw_batch(obj, state, config)
    loss0 = eval_loss(obj, theta, batch)
    g0 = _grad(obj, theta, batch, 0.0)
    direction = _adam_direction(g0, state, config, t)
    zero = np.zeros_like(g0)
    state.t = t
    trace = StepTrace(t, eta, rho, loss0, g0, zero, zero, direction, False)
    return _finish(theta * (1.0 - eta * config.weight_decay) - eta * direction), trace


def sam_step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    """Descend along the gradient at the local ascent point theta + rho*g0/(|g0|+xi)."""
    t = state.t + 1
    eta = schedule_value(config.eta0, config.schedule, t)
    rho = schedule_value(config.rho0, config.schedule, t)
    batch = _draw_batch(obj, state, config)
    loss0 = eval_loss(obj, theta, batch)
    g0 = _grad(obj, theta, batch, config.weight_decay)
    ascent = theta + rho * g0 / (np.linalg.norm(g0) + config.xi)
    g1 = _grad(obj, ascent, batch, config.weight_decay)
    state.t = t
    trace = StepTrace(
        t, eta, rho, loss0, g0, g1 - g0, np.zeros_like(g0), g1, True, g1=g1
    )
    return _finish(theta - eta * g1), trace


def _fad_core(
    obj: Objective,
    theta: Vector,
    state: OptimizerState,
    config: OptimizerConfig,
    alpha: float,
) -> tuple[Vector, StepTrace]:
    t = state.t + 1
    eta = schedule_value(config.eta0, config.schedule, t)
    rho = schedule_value(config.rho0, config.schedule, t)
    batch = _draw_batch(obj, state, config)
    loss0 = eval_loss(obj, theta, batch)
    g0 = _grad(obj, theta, batch, config.weight_decay)
    applied = bool(state.ratio_rng.uniform() < config.fad_ratio)
    if applied:
        xi = config.xi
        ascent1 = theta + rho * g0 / (np.linalg.norm(g0) + xi)
        g1 = _grad(obj, ascent1, batch, config.weight_decay)
        h0 = g1 - g0
        ascent2 = theta + rho * h0 / (np.linalg.norm(h0) + xi)
        g2 = _grad(obj, ascent2, batch, config.weight_decay)
        ascent3 = ascent2 + rho * g2 / (np.linalg.norm(g2) + xi)
        g3 = _grad(obj, ascent3, batch, config.weight_decay)
        h1 = g3 - g2
        delta = g0 + config.beta * (alpha * h0 + (1.0 - alpha) * h1)
        trace = StepTrace(t, eta, rho, loss0, g0, h0, h1, delta, True, g1=g1, g2=g2, g3=g3)
    else:
        zero = np.zeros_like(g0)
        delta = g0
        trace = StepTrace(t, eta, rho, loss0, g0, zero, zero, delta, False)
    state.t = t
    return _finish(theta - eta * delta), trace


def fad_step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    """One flatness-aware descent step; see the module docstring for the update."""
    return _fad_core(obj, theta, state, config, config.alpha)


def gam_step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    """Gradient-norm-only variant: the fad step with alpha pinned to 0."""
    return _fad_core(obj, theta, state, config, 0.0)


STEP_FUNCTIONS: dict[str, StepFn] = {
    "sgd": sgd_step,
    "momentum_sgd": momentum_sgd_step,
    "adam": adam_step,
    "adamw": adamw_step,
    "sam": sam_step,
    "gam": gam_step,
    "fad": fad_step,
}


def step(
    obj: Objective, theta: Vector, state: OptimizerState, config: OptimizerConfig
) -> tuple[Vector, StepTrace]:
    return STEP_FUNCTIONS[config.method](obj, theta, state, config)


@dataclass
class RunRecord:
    run_id: str
    method: str
    seed: int
    theta_final: Vector
    rows: list[dict]
    traces: list[StepTrace] = field(default_factory=list)
    total_step_ms: float = 0.0


def trace_to_row(
    trace: StepTrace, run_id: str, method: str, seed: int, wall_ms: float
) -> dict:
    return {
        "run_id": run_id,
        "method": method,
        "seed": seed,
        "t": trace.t,
        "eta_t": trace.eta_t,
        "rho_t": trace.rho_t,
        "loss": trace.loss_before,
        "norm_g0": trace.norm_g0,
        "norm_h0": trace.norm_h0,
        "norm_h1": trace.norm_h1,
        "norm_delta": trace.norm_delta,
        "fad_applied": int(trace.fad_applied),
        "wall_ms": wall_ms,
    }


def run_training(
    obj: Objective,
    theta0: Vector,
    config: OptimizerConfig,
    iterations: int,
    seed: int = 0,
    run_id: str = "run",
    log_sink: Callable[[dict], None] | None = None,
    capture_traces: bool = False,
) -> RunRecord:
    """Run ``iterations`` optimizer steps from theta0, streaming one log row each.

    Deterministic given (objective, theta0, config, seed); wall_ms values are
    the only nondeterministic row entries. A non-finite loss or update raises
    NumericalError after the rows produced so far have been flushed to
    ``log_sink``.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    theta = np.array(theta0, dtype=np.float64, copy=True)
    state = OptimizerState.fresh(seed)
    step_fn = STEP_FUNCTIONS[config.method]
    record = RunRecord(run_id, config.method, int(seed), theta, [])
    for _ in range(iterations):
        t0 = time.perf_counter()
        theta, trace = step_fn(obj, theta, state, config)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        record.total_step_ms += wall_ms
        row = trace_to_row(trace, run_id, config.method, int(seed), wall_ms)
        record.rows.append(row)
        if log_sink is not None:
            log_sink(row)
        if capture_traces:
            record.traces.append(trace)
    record.theta_final = theta
    return record


@dataclass(frozen=True)
class ConvergenceReport:
    """Summary of how fast the composite step norms shrink over a run.

    The fit regresses y(T') = C(T') * sqrt(T') on (1, log T') over the second
    half of the run, where C is the running sum of squared step norms; a good
    fit with a small remainder indicates the scheduled decay is doing its job.
    """

    n_steps: int
    c1: float
    c2: float
    residual: float
    r_squared: float
    min_delta_sq: float
    first_decile_min: float
    last_decile_min: float
    schedule_ok: bool
    note: str

    def to_dict(self) -> dict:
        return {
            "n_steps": self.n_steps,
            "c1": self.c1,
            "c2": self.c2,
            "residual": self.residual,
            "r_squared": self.r_squared,
            "min_delta_sq": self.min_delta_sq,
            "first_decile_min": self.first_decile_min,
            "last_decile_min": self.last_decile_min,
            "schedule_ok": self.schedule_ok,
            "note": self.note,
        }


def convergence_check(
    traces: "list[StepTrace]", eta0: float, rho0: float
) -> ConvergenceReport:
    """Fit the decay profile of ||delta_t||^2 and check the 1/sqrt(t) schedules."""
    n = len(traces)
    if n < 10:
        raise InsufficientDataError(f"need at least 10 traces, got {n}")
    t = np.array([tr.t for tr in traces], dtype=np.float64)
    eta = np.array([tr.eta_t for tr in traces])
    rho = np.array([tr.rho_t for tr in traces])
    ok_eta = np.allclose(eta * np.sqrt(t), eta0, rtol=1e-9, atol=0.0)
    ok_rho = np.allclose(rho * np.sqrt(t), rho0, rtol=1e-9, atol=1e-300)
    schedule_ok = bool(ok_eta and ok_rho)
    note = (
        "eta_t and rho_t follow the 1/sqrt(t) decay"
        if schedule_ok
        else "schedule violates the 1/sqrt(t) decay the guarantee assumes"
    )
    d2 = np.array([tr.norm_delta**2 for tr in traces])
    cum = np.cumsum(d2)
    half = t >= (n // 2)
    y = cum[half] * np.sqrt(t[half])
    design = np.stack([np.ones(int(half.sum())), np.log(t[half])], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = design @ coef
    ssr = float(np.sum((y - pred) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if sst == 0.0 and ssr == 0.0 else (1.0 - ssr / sst if sst > 0.0 else 0.0)
    decile = max(1, n // 10)
    return ConvergenceReport(
        n_steps=n,
        c1=float(coef[0]),
        c2=float(coef[1]),
        residual=ssr,
        r_squared=float(r2),
        min_delta_sq=float(d2.min()),
        first_decile_min=float(d2[:decile].min()),
        last_decile_min=float(d2[n - decile :].min()),
        schedule_ok=schedule_ok,
        note=note,
    )
