"""``flatmin`` command line: train | flatness | converge | bench | sweep.

Every command takes a single JSON config (--config), an optional --seed
override, and an --out-dir for artifacts. Unknown config keys are rejected.
Result files embed the fully resolved config (JSON under a "config" key, CSV
as a leading ``# config: ...`` comment line) and are written atomically via a
temp file and rename. Exit codes: 0 success, 2 configuration problem,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .errors import (
    BatchSizeError,
    BudgetError,
    ConfigError,
    DegenerateDirectionError,
    DimensionError,
    FlatminError,
    InsufficientDataError,
    NumericalError,
    ProtocolError,
)
from .flatness import (
    FlatnessBudget,
    build_flatness_report,
    lambda_max_from_fad,
    power_iteration_lambda_max,
)
from .objectives import Dataset, MLPObjective, Objective, load_dataset, make_objective
from .optimizers import (
    LOG_COLUMNS,
    METHODS,
    OptimizerConfig,
    convergence_check,
    run_training,
)
from .shiftbench import (
    DomainSpec,
    MultiDomainDataset,
    ProtocolConfig,
    SearchSpace,
    classification_accuracy,
    generate_domains,
    pool_domains,
    run_protocol,
)

CONFIG_EXIT = 2
NUMERIC_EXIT = 3

_CONFIG_ERRORS = (
    ConfigError,
    DimensionError,
    BatchSizeError,
    BudgetError,
    InsufficientDataError,
)
_NUMERIC_ERRORS = (NumericalError, DegenerateDirectionError, ProtocolError)


def _canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _write_json(path: Path, doc: dict) -> None:
    _atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _csv_text(config: dict, columns: tuple[str, ...], rows: "list[dict]") -> str:
    buf = io.StringIO()
    buf.write(f"# config: {_canonical_json(config)}\n")
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _check_keys(doc: dict, allowed: "set[str]", where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where} is missing required key '{key}'")
    return doc[key]


def _parse_optimizer(doc: dict) -> OptimizerConfig:
    names = {f.name for f in fields(OptimizerConfig)}
    _check_keys(doc, names, "optimizer")
    _require(doc, "method", "optimizer")
    _require(doc, "eta0", "optimizer")
    return OptimizerConfig(**doc)


def _parse_budget(doc: dict | None) -> FlatnessBudget:
    if doc is None:
        return FlatnessBudget()
    _check_keys(doc, {"n_random", "n_ascent_steps", "ascent_lr"}, "budget")
    return FlatnessBudget(**doc)


def _parse_search(doc: dict | None) -> SearchSpace:
    if doc is None:
        return SearchSpace()
    names = {f.name for f in fields(SearchSpace)}
    _check_keys(doc, names, "protocol.search")
    return SearchSpace(**{k: tuple(v) for k, v in doc.items()})


def _parse_protocol(doc: dict | None) -> ProtocolConfig:
    if doc is None:
        return ProtocolConfig()
    names = {f.name for f in fields(ProtocolConfig)}
    _check_keys(doc, names, "protocol")
    doc = dict(doc)
    search = _parse_search(doc.pop("search", None))
    return ProtocolConfig(search=search, **doc)


def _protocol_dict(protocol: ProtocolConfig) -> dict:
    doc = asdict(protocol)
    doc["search"] = protocol.search.to_dict()
    return doc


def _parse_data(doc: dict) -> tuple[MultiDomainDataset, dict]:
    _check_keys(doc, {"spec", "seed"}, "data")
    spec_doc = _require(doc, "spec", "data")
    names = {f.name for f in fields(DomainSpec)}
    _check_keys(spec_doc, names, "data.spec")
    spec = DomainSpec(**spec_doc)
    data_seed = int(doc.get("seed", 0))
    md = generate_domains(spec, data_seed)
    return md, {"spec": spec.to_dict(), "seed": data_seed}


def _build_objective(
    doc: dict, data_block: dict | None, seed: int
) -> tuple[Objective, dict, MultiDomainDataset | None, dict | None]:
    """Returns (objective, resolved objective doc, generated data, resolved data doc)."""
    _require(doc, "kind", "objective")
    if doc["kind"] != "mlp":
        obj = make_objective(doc)
        return obj, dict(doc), None, None
    md = None
    data_doc = None
    if data_block is not None:
        md, data_doc = _parse_data(data_block)
    _check_keys(
        doc, {"kind", "layer_sizes", "dataset", "hidden_units", "train_domains"}, "objective"
    )
    if "dataset" in doc:
        dataset = load_dataset(doc["dataset"])
        if "layer_sizes" not in doc:
            raise ConfigError("mlp objective with a dataset file needs layer_sizes")
        obj = MLPObjective(tuple(doc["layer_sizes"]), dataset)
        return obj, dict(doc), md, data_doc
    if md is None:
        raise ConfigError("mlp objective needs either a 'dataset' path or a 'data' block")
    train_domains = tuple(doc.get("train_domains", range(md.n_domains)))
    dataset = pool_domains(md, train_domains)
    if "layer_sizes" in doc:
        layer_sizes = tuple(doc["layer_sizes"])
    else:
        hidden = int(doc.get("hidden_units", 16))
        layer_sizes = (md.feature_dim, hidden, md.num_classes)
    obj = MLPObjective(layer_sizes, dataset)
    resolved = {
        "kind": "mlp",
        "layer_sizes": list(layer_sizes),
        "train_domains": list(train_domains),
    }
    return obj, resolved, md, data_doc


def _initial_point(obj: Objective, doc: dict, seed: int) -> np.ndarray:
    if "theta0" in doc:
        return np.asarray(doc["theta0"], dtype=np.float64)
    if isinstance(obj, MLPObjective):
        return obj.init_params(np.random.default_rng([seed, 2]))
    if obj.kind == "quadratic":
        return np.ones(obj.dim)
    return np.zeros(obj.dim)


def cmd_train(doc: dict, out_dir: Path) -> None:
    allowed = {
        "seed",
        "run_id",
        "iterations",
        "objective",
        "optimizer",
        "data",
        "theta0",
        "flatness",
    }
    _check_keys(doc, allowed, "train config")
    seed = int(doc.get("seed", 0))
    run_id = str(doc.get("run_id", "run"))
    iterations = int(_require(doc, "iterations", "train config"))
    opt = _parse_optimizer(_require(doc, "optimizer", "train config"))
    obj, obj_doc, _, data_doc = _build_objective(
        _require(doc, "objective", "train config"), doc.get("data"), seed
    )
    theta0 = _initial_point(obj, doc, seed)
    flat_doc = doc.get("flatness") or {}
    _check_keys(
        flat_doc, {"rho", "alpha", "k_eigs", "n_probes", "budget"}, "flatness"
    )
    resolved = {
        "seed": seed,
        "run_id": run_id,
        "iterations": iterations,
        "objective": obj_doc,
        "optimizer": asdict(opt),
        "theta0": theta0.tolist(),
        "flatness": {
            "rho": float(flat_doc.get("rho", 0.1)),
            "alpha": float(flat_doc.get("alpha", 0.5)),
            "k_eigs": int(flat_doc.get("k_eigs", 2)),
            "n_probes": int(flat_doc.get("n_probes", 64)),
        },
    }
    if data_doc is not None:
        resolved["data"] = data_doc
    rows: list[dict] = []
    csv_path = out_dir / f"{run_id}.csv"
    try:
        record = run_training(
            obj, theta0, opt, iterations, seed=seed, run_id=run_id, log_sink=rows.append
        )
    except NumericalError:
        _atomic_write_text(csv_path, _csv_text(resolved, LOG_COLUMNS, rows))
        raise
    _atomic_write_text(csv_path, _csv_text(resolved, LOG_COLUMNS, rows))
    budget = _parse_budget(flat_doc.get("budget"))
    report = build_flatness_report(
        obj,
        record.theta_final,
        rho=resolved["flatness"]["rho"],
        alpha=resolved["flatness"]["alpha"],
        budget=budget,
        k_eigs=resolved["flatness"]["k_eigs"],
        n_probes=resolved["flatness"]["n_probes"],
        seed=seed,
    )
    out = report.to_dict()
    out["final_loss"] = record.rows[-1]["loss"] if record.rows else None
    out["config"] = resolved
    _write_json(out_dir / f"{run_id}_flatness.json", out)


def cmd_flatness(doc: dict, out_dir: Path) -> None:
    allowed = {
        "seed",
        "objective",
        "data",
        "theta",
        "rho",
        "alpha",
        "budget",
        "k_eigs",
        "n_probes",
        "fd_step",
    }
    _check_keys(doc, allowed, "flatness config")
    seed = int(doc.get("seed", 0))
    obj, obj_doc, _, data_doc = _build_objective(
        _require(doc, "objective", "flatness config"), doc.get("data"), seed
    )
    theta = (
        np.asarray(doc["theta"], dtype=np.float64)
        if "theta" in doc
        else _initial_point(obj, doc, seed)
    )
    rho = float(_require(doc, "rho", "flatness config"))
    alpha = float(doc.get("alpha", 0.5))
    budget = _parse_budget(doc.get("budget"))
    report = build_flatness_report(
        obj,
        theta,
        rho=rho,
        alpha=alpha,
        budget=budget,
        k_eigs=int(doc.get("k_eigs", 2)),
        n_probes=int(doc.get("n_probes", 64)),
        fd_step=float(doc.get("fd_step", 1e-4)),
        seed=seed,
    )
    resolved = {
        "seed": seed,
        "objective": obj_doc,
        "theta": theta.tolist(),
        "rho": rho,
        "alpha": alpha,
        "budget": budget.to_dict(),
        "k_eigs": int(doc.get("k_eigs", 2)),
        "n_probes": int(doc.get("n_probes", 64)),
        "fd_step": float(doc.get("fd_step", 1e-4)),
    }
    if data_doc is not None:
        resolved["data"] = data_doc
    out = report.to_dict()
    # independent curvature read-off from the regularizer, for cross-checking
    out["lambda_max_from_fad"] = lambda_max_from_fad(report.r_fad, rho, alpha)
    out["config"] = resolved
    _write_json(out_dir / "flatness.json", out)


def cmd_converge(doc: dict, out_dir: Path) -> None:
    allowed = {"seed", "iterations", "objective", "optimizer", "data", "theta0"}
    _check_keys(doc, allowed, "converge config")
    seed = int(doc.get("seed", 0))
    iterations = int(_require(doc, "iterations", "converge config"))
    opt = _parse_optimizer(_require(doc, "optimizer", "converge config"))
    if opt.schedule != "inverse_sqrt":
        raise ConfigError(
            "converge requires schedule 'inverse_sqrt'; the decay analysis "
            "does not apply to constant schedules"
        )
    obj, obj_doc, _, data_doc = _build_objective(
        _require(doc, "objective", "converge config"), doc.get("data"), seed
    )
    theta0 = _initial_point(obj, doc, seed)
    record = run_training(
        obj, theta0, opt, iterations, seed=seed, capture_traces=True
    )
    report = convergence_check(record.traces, opt.eta0, opt.rho0)
    resolved = {
        "seed": seed,
        "iterations": iterations,
        "objective": obj_doc,
        "optimizer": asdict(opt),
        "theta0": theta0.tolist(),
    }
    if data_doc is not None:
        resolved["data"] = data_doc
    out = report.to_dict()
    out["config"] = resolved
    _write_json(out_dir / "convergence.json", out)


def cmd_bench(doc: dict, out_dir: Path) -> None:
    allowed = {"seed", "data", "methods", "protocol"}
    _check_keys(doc, allowed, "bench config")
    seed = int(doc.get("seed", 0))
    md, data_doc = _parse_data(_require(doc, "data", "bench config"))
    methods = list(_require(doc, "methods", "bench config"))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method '{m}' in bench config")
    protocol = _parse_protocol(doc.get("protocol"))
    result = run_protocol(md, methods, protocol, seed=seed)
    resolved = {
        "seed": seed,
        "data": data_doc,
        "methods": methods,
        "protocol": _protocol_dict(protocol),
    }
    out = result.to_dict()
    out["config"] = resolved
    _write_json(out_dir / "bench.json", out)
    table = f"# config: {_canonical_json(resolved)}\n" + result.table_csv()
    _atomic_write_text(out_dir / "bench_table.csv", table)
    _write_json(
        out_dir / "bench_hparams.json",
        {"config": resolved, "selected": result.selected_hparams_doc()},
    )


SWEEP_COLUMNS = ("value", "test_accuracy", "lambda_max", "wall_ms", "status")
SWEEP_PARAMS = {"rho": "rho0", "alpha": "alpha", "beta": "beta", "fad_ratio": "fad_ratio"}


def cmd_sweep(doc: dict, out_dir: Path) -> None:
    allowed = {
        "seed",
        "data",
        "test_domain",
        "hidden_units",
        "iterations",
        "optimizer",
        "grid",
        "timing_repeats",
    }
    _check_keys(doc, allowed, "sweep config")
    seed = int(doc.get("seed", 0))
    iterations = int(_require(doc, "iterations", "sweep config"))
    repeats = int(doc.get("timing_repeats", 1))
    if repeats < 1:
        raise ConfigError(f"timing_repeats must be >= 1, got {repeats}")
    md, data_doc = _parse_data(_require(doc, "data", "sweep config"))
    test_domain = int(doc.get("test_domain", md.n_domains - 1))
    if not (0 <= test_domain < md.n_domains):
        raise ConfigError(f"test_domain {test_domain} out of range")
    grid = _require(doc, "grid", "sweep config")
    _check_keys(grid, {"param", "values"}, "grid")
    param = _require(grid, "param", "grid")
    if param not in SWEEP_PARAMS:
        raise ConfigError(
            f"grid param must be one of {sorted(SWEEP_PARAMS)}, got '{param}'"
        )
    values = [float(v) for v in _require(grid, "values", "grid")]
    if not values:
        raise ConfigError("grid.values is empty")
    base = _parse_optimizer(_require(doc, "optimizer", "sweep config"))
    hidden = int(doc.get("hidden_units", 16))
    train_domains = tuple(i for i in range(md.n_domains) if i != test_domain)
    train_ds = pool_domains(md, train_domains)
    obj = MLPObjective((md.feature_dim, hidden, md.num_classes), train_ds)
    theta0 = obj.init_params(np.random.default_rng([seed, 2]))
    resolved = {
        "seed": seed,
        "iterations": iterations,
        "timing_repeats": repeats,
        "data": data_doc,
        "test_domain": test_domain,
        "hidden_units": hidden,
        "optimizer": asdict(base),
        "grid": {"param": param, "values": values},
    }
    rows = []
    for value in values:
        cfg = replace(base, **{SWEEP_PARAMS[param]: value})
        try:
            walls = []
            record = None
            for _ in range(repeats):
                t0 = time.perf_counter()
                record = run_training(obj, theta0, cfg, iterations, seed=seed)
                walls.append((time.perf_counter() - t0) * 1000.0)
            acc = classification_accuracy(
                obj, record.theta_final, md.domains[test_domain]
            )
            eigs, _ = power_iteration_lambda_max(
                obj, record.theta_final, k=1, rng=np.random.default_rng([seed, 4])
            )
            rows.append(
                {
                    "value": value,
                    "test_accuracy": acc,
                    "lambda_max": float(eigs[0]),
                    "wall_ms": float(np.median(walls)),
                    "status": "ok",
                }
            )
        except FlatminError as err:
            rows.append(
                {
                    "value": value,
                    "test_accuracy": float("nan"),
                    "lambda_max": float("nan"),
                    "wall_ms": float("nan"),
                    "status": f"error:{type(err).__name__}",
                }
            )
    _atomic_write_text(out_dir / "sweep.csv", _csv_text(resolved, SWEEP_COLUMNS, rows))


_HANDLERS = {
    "train": cmd_train,
    "flatness": cmd_flatness,
    "converge": cmd_converge,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def main(argv: "list[str] | None" = None) -> int:
    parser = argparse.ArgumentParser(
        prog="flatmin",
        description="Training, flatness reports, and benchmarks for "
        "flatness-aware optimizers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in _HANDLERS.items():
        p = sub.add_parser(name, help=handler.__doc__)
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out-dir", default=".", help="directory for result files")
    args = parser.parse_args(argv)
    try:
        doc = _load_config(args.config)
        if args.seed is not None:
            doc["seed"] = int(args.seed)
        _HANDLERS[args.command](doc, Path(args.out_dir))
    except _CONFIG_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return CONFIG_EXIT
    except _NUMERIC_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return NUMERIC_EXIT
    except (TypeError, ValueError) as err:
        print(f"error: malformed config value: {err}", file=sys.stderr)
        return CONFIG_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
