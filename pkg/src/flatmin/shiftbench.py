"""Synthetic covariate-shift benchmark with a leave-one-domain-out protocol.

Domains share one labeling rule defined in a canonical coordinate frame;
each domain sees the same class-conditional Gaussians pushed through its own
input transform (rotation or translation), so P(y | canonical x) is invariant
while P(x) shifts. Training pools all but one domain, model selection uses a
stratified validation split of the pool, and the held-out domain is only ever
touched for the final evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchSizeError, ConfigError, NumericalError, ProtocolError
from .flatness import FlatnessBudget, build_flatness_report
from .objectives import Dataset, MLPObjective, Vector
from .optimizers import OptimizerConfig, run_training

TRANSFORMS = ("rotation", "translation", "identity")


@dataclass(frozen=True)
class DomainSpec:
    """Generator settings for one multi-domain dataset."""

    n_domains: int = 3
    per_domain_n: int = 150
    num_classes: int = 3
    feature_dim: int = 2
    transform: str = "rotation"
    angle_step_deg: float = 30.0
    translation_step: float = 1.0
    class_separation: float = 2.0
    noise: float = 0.4

    def __post_init__(self) -> None:
        if self.n_domains < 3:
            raise ConfigError(f"need at least 3 domains, got {self.n_domains}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.per_domain_n < 10 * self.num_classes:
            raise ConfigError(
                f"per_domain_n must be >= 10 * num_classes "
                f"({10 * self.num_classes}), got {self.per_domain_n}"
            )
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(
                f"unknown transform '{self.transform}', expected one of {TRANSFORMS}"
            )
        if self.noise < 0.0:
            raise ConfigError(f"noise must be nonnegative, got {self.noise}")

    def to_dict(self) -> dict:
        return {
            "n_domains": self.n_domains,
            "per_domain_n": self.per_domain_n,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "transform": self.transform,
            "angle_step_deg": self.angle_step_deg,
            "translation_step": self.translation_step,
            "class_separation": self.class_separation,
            "noise": self.noise,
        }


@dataclass(frozen=True)
class MultiDomainDataset:
    domains: tuple[Dataset, ...]
    domain_params: tuple[dict, ...]
    num_classes: int
    feature_dim: int

    @property
    def n_domains(self) -> int:
        return len(self.domains)


def _class_means(num_classes: int, feature_dim: int, separation: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, feature_dim))
    means[:, 0] = separation * np.cos(angles)
    means[:, 1] = separation * np.sin(angles)
    return means


def _rotation(feature_dim: int, angle_deg: float) -> np.ndarray:
    # rotate the first two coordinates, identity on the rest
    theta = np.deg2rad(angle_deg)
    rot = np.eye(feature_dim)
    rot[0, 0] = rot[1, 1] = np.cos(theta)
    rot[0, 1] = -np.sin(theta)
    rot[1, 0] = np.sin(theta)
    return rot


def generate_domains(spec: DomainSpec, seed: int) -> MultiDomainDataset:
    """Sample every domain's rows; labels are assigned in the canonical frame."""
    rng = np.random.default_rng(int(seed))
    means = _class_means(spec.num_classes, spec.feature_dim, spec.class_separation)
    base, extra = divmod(spec.per_domain_n, spec.num_classes)
    counts = [base + (1 if c < extra else 0) for c in range(spec.num_classes)]
    domains = []
    params = []
    for d in range(spec.n_domains):
        labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), counts)
        canonical = means[labels] + spec.noise * rng.standard_normal(
            (spec.per_domain_n, spec.feature_dim)
        )
        if spec.transform == "rotation":
            angle = d * spec.angle_step_deg
            inputs = canonical @ _rotation(spec.feature_dim, angle).T
            params.append({"rotation_deg": angle, "noise": spec.noise})
        elif spec.transform == "translation":
            offset = np.zeros(spec.feature_dim)
            offset[0] = d * spec.translation_step
            inputs = canonical + offset
            params.append({"translation": offset.tolist(), "noise": spec.noise})
        else:
            inputs = canonical
            params.append({"noise": spec.noise})
        order = rng.permutation(spec.per_domain_n)
        domains.append(
            Dataset(
                inputs[order],
                labels[order],
                np.full(spec.per_domain_n, d, dtype=np.int64),
            )
        )
    return MultiDomainDataset(
        domains=tuple(domains),
        domain_params=tuple(params),
        num_classes=spec.num_classes,
        feature_dim=spec.feature_dim,
    )


@dataclass(frozen=True)
class LeaveOneOutSplit:
    test_domain: int
    train_domains: tuple[int, ...]


def leave_one_out_splits(md: MultiDomainDataset) -> list[LeaveOneOutSplit]:
    """One split per domain: that domain held out, all others pooled for training."""
    return [
        LeaveOneOutSplit(
            test_domain=d,
            train_domains=tuple(i for i in range(md.n_domains) if i != d),
        )
        for d in range(md.n_domains)
    ]


def pool_domains(md: MultiDomainDataset, domain_indices: tuple[int, ...]) -> Dataset:
    parts = [md.domains[i] for i in domain_indices]
    return Dataset(
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.domain_ids for p in parts]),
    )


def stratified_split(
    dataset: Dataset, val_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train, validation) row indices, stratified by (domain, class)."""
    if not (0.0 < val_fraction < 1.0):
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train: list[np.ndarray] = []
    val: list[np.ndarray] = []
    keys = dataset.domain_ids * (dataset.labels.max() + 1) + dataset.labels
    for key in np.unique(keys):
        rows = np.flatnonzero(keys == key)
        rows = rng.permutation(rows)
        n_val = int(round(val_fraction * rows.size))
        n_val = min(max(n_val, 1), rows.size - 1)
        val.append(rows[:n_val])
        train.append(rows[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


@dataclass(frozen=True)
class SearchSpace:
    """Random-search distributions (log-uniform ranges and discrete sets)."""

    log2_batch: tuple[float, float] = (3.0, 5.5)
    log10_lr: tuple[float, float] = (-5.0, -3.5)
    log10_momentum: tuple[float, float] = (-1.0, 0.0)
    log10_weight_decay: tuple[float, float] = (-6.0, -3.0)
    sam_rho: tuple[float, ...] = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)
    fad_rho: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
    fad_alpha: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    fad_beta: tuple[float, ...] = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)

    def to_dict(self) -> dict:
        return {
            "log2_batch": list(self.log2_batch),
            "log10_lr": list(self.log10_lr),
            "log10_momentum": list(self.log10_momentum),
            "log10_weight_decay": list(self.log10_weight_decay),
            "sam_rho": list(self.sam_rho),
            "fad_rho": list(self.fad_rho),
            "fad_alpha": list(self.fad_alpha),
            "fad_beta": list(self.fad_beta),
        }


def _log_uniform(rng: np.random.Generator, base: float, lo: float, hi: float) -> float:
    return float(base ** rng.uniform(lo, hi))


def _pick(rng: np.random.Generator, values: tuple[float, ...]) -> float:
    return float(values[int(rng.integers(len(values)))])


def sample_hparams(method: str, rng: np.random.Generator, space: SearchSpace) -> dict:
    """Draw one hyperparameter trial for ``method`` (fixed draw order)."""
    hp: dict = {
        "batch_size": int(round(_log_uniform(rng, 2.0, *space.log2_batch))),
        "eta0": _log_uniform(rng, 10.0, *space.log10_lr),
        "weight_decay": _log_uniform(rng, 10.0, *space.log10_weight_decay),
    }
    if method == "momentum_sgd":
        hp["momentum"] = _log_uniform(rng, 10.0, *space.log10_momentum)
    elif method == "sam":
        hp["rho0"] = _pick(rng, space.sam_rho)
    elif method == "gam":
        hp["rho0"] = _pick(rng, space.fad_rho)
        hp["beta"] = _pick(rng, space.fad_beta)
    elif method == "fad":
        hp["rho0"] = _pick(rng, space.fad_rho)
        hp["alpha"] = _pick(rng, space.fad_alpha)
        hp["beta"] = _pick(rng, space.fad_beta)
    return hp


@dataclass(frozen=True)
class ProtocolConfig:
    n_hparam_trials: int = 20
    val_fraction: float = 0.2
    seeds_per_trial: int = 3
    iterations: int = 500
    hidden_units: int = 16
    search: SearchSpace = field(default_factory=SearchSpace)
    report_rho: float = 0.1
    report_alpha: float = 0.5
    report_probes: int = 64
    report_k_eigs: int = 2
    report_restarts: int = 8
    report_ascent_steps: int = 30

    def __post_init__(self) -> None:
        if self.n_hparam_trials < 1:
            raise ConfigError(f"n_hparam_trials must be >= 1, got {self.n_hparam_trials}")
        if self.seeds_per_trial < 1:
            raise ConfigError(f"seeds_per_trial must be >= 1, got {self.seeds_per_trial}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.hidden_units < 1:
            raise ConfigError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


def classification_accuracy(obj: MLPObjective, theta: Vector, dataset: Dataset) -> float:
    logits = obj.logits(theta, dataset.inputs)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def select_trial(val_accuracies: "list[float | None]") -> int:
    """Index of the best valid trial by validation accuracy; ties break low.

    This is the entire model-selection interface: it sees validation metrics
    and nothing else. ``None`` marks an invalid (failed) trial.
    """
    best = -1
    best_acc = -np.inf
    for i, acc in enumerate(val_accuracies):
        if acc is not None and acc > best_acc:
            best, best_acc = i, acc
    if best < 0:
        raise ProtocolError("every hyperparameter trial failed")
    return best


@dataclass(frozen=True)
class TrialOutcome:
    index: int
    hparams: dict
    val_accuracy: float | None
    error: str | None = None

    @property
    def valid(self) -> bool:
        return self.val_accuracy is not None


@dataclass
class BenchCell:
    method: str
    test_domain: int
    mean_accuracy: float
    std_accuracy: float
    seed_accuracies: tuple[float, ...]
    selected_trial: int
    selected_hparams: dict
    trial_val_accuracies: tuple
    lambda_maxes: tuple[float, ...]
    hessian_traces: tuple[float, ...]
    flatness: tuple[dict, ...]
    train_indices: np.ndarray
    val_indices: np.ndarray

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "test_domain": self.test_domain,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "seed_accuracies": list(self.seed_accuracies),
            "selected_trial": self.selected_trial,
            "selected_hparams": dict(self.selected_hparams),
            "trial_val_accuracies": list(self.trial_val_accuracies),
            "lambda_maxes": list(self.lambda_maxes),
            "hessian_traces": list(self.hessian_traces),
            "flatness": [dict(f) for f in self.flatness],
        }


@dataclass
class BenchResult:
    methods: tuple[str, ...]
    n_domains: int
    cells: list[BenchCell]
    events: list[tuple] = field(default_factory=list)

    def cell(self, method: str, test_domain: int) -> BenchCell:
        for c in self.cells:
            if c.method == method and c.test_domain == test_domain:
                return c
        raise KeyError((method, test_domain))

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "n_domains": self.n_domains,
            "cells": [c.to_dict() for c in self.cells],
        }

    def table_csv(self) -> str:
        lines = ["domain_out," + ",".join(self.methods)]
        for d in range(self.n_domains):
            row = [f"domain{d}"]
            for m in self.methods:
                c = self.cell(m, d)
                row.append(f"{c.mean_accuracy:.4f}±{c.std_accuracy:.4f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def selected_hparams_doc(self) -> dict:
        return {
            f"{c.method}/domain{c.test_domain}": dict(c.selected_hparams)
            for c in self.cells
        }


def _optimizer_config(method: str, hp: dict, train_n: int) -> OptimizerConfig:
    return OptimizerConfig(
        method=method,
        eta0=hp["eta0"],
        rho0=hp.get("rho0", 0.0),
        alpha=hp.get("alpha", 0.5),
        beta=hp.get("beta", 0.1),
        momentum=hp.get("momentum", 0.0),
        weight_decay=hp["weight_decay"],
        batch_size=min(hp["batch_size"], train_n),
    )


def _derived_seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31))


def run_protocol(
    md: MultiDomainDataset,
    methods: "list[str]",
    protocol: ProtocolConfig,
    seed: int = 0,
) -> BenchResult:
    """Leave-one-domain-out random search; see the module docstring.

    For every (method, held-out domain) cell: sample n_hparam_trials configs,
    train each on the stratified train split, score on the validation split,
    select by validation accuracy only, then retrain the winner over
    seeds_per_trial fresh seeds and report mean/std accuracy on the held-out
    domain plus a flatness report at each final point. Trials that fail
    numerically are excluded; a cell where every trial fails raises
    ProtocolError.
    """
    seed = int(seed)
    result = BenchResult(methods=tuple(methods), n_domains=md.n_domains, cells=[])
    clock = 0
    layer_sizes = (md.feature_dim, protocol.hidden_units, md.num_classes)
    report_budget = FlatnessBudget(
        n_random=protocol.report_restarts, n_ascent_steps=protocol.report_ascent_steps
    )
    for split in leave_one_out_splits(md):
        pool = pool_domains(md, split.train_domains)
        split_rng = np.random.default_rng([seed, 7, split.test_domain])
        tr_idx, va_idx = stratified_split(pool, protocol.val_fraction, split_rng)
        train_ds, val_ds = pool.subset(tr_idx), pool.subset(va_idx)
        train_obj = MLPObjective(layer_sizes, train_ds)
        for mi, method in enumerate(methods):
            outcomes: list[TrialOutcome] = []
            for trial in range(protocol.n_hparam_trials):
                hp_rng = np.random.default_rng([seed, 11, split.test_domain, mi, trial])
                hp = sample_hparams(method, hp_rng, protocol.search)
                init_rng = np.random.default_rng([seed, 13, split.test_domain, mi, trial])
                theta0 = train_obj.init_params(init_rng)
                try:
                    cfg = _optimizer_config(method, hp, train_ds.n)
                    rec = run_training(
                        train_obj,
                        theta0,
                        cfg,
                        protocol.iterations,
                        seed=_derived_seed(seed, 19, split.test_domain, mi, trial),
                    )
                    acc = classification_accuracy(train_obj, rec.theta_final, val_ds)
                    outcomes.append(TrialOutcome(trial, hp, acc))
                except (NumericalError, BatchSizeError) as err:
                    outcomes.append(TrialOutcome(trial, hp, None, error=str(err)))
                clock += 1
                result.events.append(
                    (clock, "trial_scored", method, split.test_domain, trial)
                )
            chosen = select_trial([o.val_accuracy for o in outcomes])
            clock += 1
            result.events.append((clock, "selected", method, split.test_domain, chosen))
            hp = outcomes[chosen].hparams
            cfg = _optimizer_config(method, hp, train_ds.n)
            accs: list[float] = []
            lams: list[float] = []
            hessian_traces: list[float] = []
            reports: list[dict] = []
            for s in range(protocol.seeds_per_trial):
                init_rng = np.random.default_rng([seed, 23, split.test_domain, mi, s])
                theta0 = train_obj.init_params(init_rng)
                rec = run_training(
                    train_obj,
                    theta0,
                    cfg,
                    protocol.iterations,
                    seed=_derived_seed(seed, 29, split.test_domain, mi, s),
                )
                accs.append(
                    classification_accuracy(
                        train_obj, rec.theta_final, md.domains[split.test_domain]
                    )
                )
                clock += 1
                result.events.append(
                    (clock, "test_eval", method, split.test_domain, s)
                )
                report = build_flatness_report(
                    train_obj,
                    rec.theta_final,
                    rho=protocol.report_rho,
                    alpha=protocol.report_alpha,
                    budget=report_budget,
                    k_eigs=protocol.report_k_eigs,
                    n_probes=protocol.report_probes,
                    seed=_derived_seed(seed, 31, split.test_domain, mi, s),
                )
                lams.append(report.lambda_max)
                hessian_traces.append(report.trace)
                reports.append(report.to_dict())
            acc_arr = np.array(accs)
            std = float(acc_arr.std(ddof=1)) if acc_arr.size > 1 else 0.0
            result.cells.append(
                BenchCell(
                    method=method,
                    test_domain=split.test_domain,
                    mean_accuracy=float(acc_arr.mean()),
                    std_accuracy=std,
                    seed_accuracies=tuple(accs),
                    selected_trial=chosen,
                    selected_hparams=hp,
                    trial_val_accuracies=tuple(o.val_accuracy for o in outcomes),
                    lambda_maxes=tuple(lams),
                    hessian_traces=tuple(hessian_traces),
                    flatness=tuple(reports),
                    train_indices=tr_idx,
                    val_indices=va_idx,
                )
            )
    return result
