"""Experiment orchestration: configs, runs, CSV/report emission, comparisons.

A run is a pure function of its configuration: every random stream is derived
from explicit seeds, so re-running a config reproduces byte-identical CSVs.
Configurations are JSON with all defaults materialized on load; reports embed
the exact effective config.

Outputs per run directory:
    metrics.csv   one row per applied update (see docs/csv_columns.md)
    ledger.csv    one row per transmitted message
    trace.csv     per-update staleness trace
    report.json   effective config, bit totals, bits-to-target, theory checks
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .optim import Algorithm, AlgoConfig, run_training, theory_constants
from .problems import (
    CompositeProblem,
    load_libsvm,
    logistic_problem,
    mlp_problem,
    synth_dataset,
    synth_multiclass_dataset,
)
from .simnet import (
    FixedLatency,
    GeometricLatency,
    UniformLatency,
    WorkerSpec,
    write_trace_csv,
)

__all__ = [
    "ExperimentConfig",
    "RunReport",
    "load_config",
    "parse_config",
    "build_problem",
    "build_workers",
    "run_experiment",
    "lr_grid_search",
    "figure_mu_trace",
    "compare_suite",
]

_PROBLEM_DEFAULTS = {
    "kind": "synth_logistic",
    "n": 1000,
    "d": 50,
    "seed": 0,
    "flip_prob": 0.0,
    "lambda1": 1e-5,
    "lambda2": 1e-4,
    "path": None,
    "hidden": 100,
    "classes": 10,
    "box_radius": None,
}

_ALGO_DEFAULTS = {
    "algo": "asylpg",
    "epochs": 5,
    "m": 20,
    "eta": 0.1,
    "b_x": 8,
    "b": 8,
    "mu": 0.1,
    "phi": None,
    "tau": 0,
    "sigma": 2.0,
    "batch_size": 1,
    "seed": 0,
    "eta_mode": "constant",
    "bx_adapt": True,
    "mu_probe_widths": [],
    "metric_every": 1,
    "track_grad_mapping": True,
    "execution": "simulated",
}

_WORKER_DEFAULTS = {"count": 1, "latency": {"kind": "fixed", "ticks": 1}}

_RUN_DEFAULTS = {
    "out_dir": None,
    "seed": None,  # overrides algo.seed when set
    "repetitions": 1,
    "loss_target": "auto",  # number, "auto", or None to skip
    "oracle_iters": 2000,
}


@dataclass
class ExperimentConfig:
    problem: dict
    algo: dict
    workers: dict
    run: dict

    def to_dict(self) -> dict:
        return {
            "problem": copy.deepcopy(self.problem),
            "algo": copy.deepcopy(self.algo),
            "workers": copy.deepcopy(self.workers),
            "run": copy.deepcopy(self.run),
        }

    def algo_config(self) -> AlgoConfig:
        kw = dict(self.algo)
        kw["algo"] = Algorithm(kw["algo"])
        kw["mu_probe_widths"] = tuple(kw.get("mu_probe_widths") or ())
        seed = self.run.get("seed")
        if seed is not None:
            kw["seed"] = seed
        return AlgoConfig(**kw)


@dataclass
class RunReport:
    config: dict
    out_dir: Optional[str]
    metrics_csv: Optional[str]
    ledger_csv: Optional[str]
    trace_csv: Optional[str]
    total_bits: int
    up_bits: int
    down_bits: int
    final_loss: float
    loss_target: Optional[float]
    bits_to_target: Optional[int]
    epochs_to_target: Optional[int]
    target_reached: bool
    violations: int
    search_failures: int
    min_grad_mapping_sq: Optional[float]
    theory: Optional[dict]
    output_vector: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _merge(defaults: dict, given: Optional[dict], section: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in (given or {}).items():
        if key not in defaults:
            raise ValueError(f"unknown key {key!r} in config section {section!r}")
        out[key] = value
    return out


def parse_config(raw: dict) -> ExperimentConfig:
    """Materialize all defaults; unknown keys are errors (validated before
    any compute)."""
    known = {"problem", "algo", "workers", "run"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    cfg = ExperimentConfig(
        problem=_merge(_PROBLEM_DEFAULTS, raw.get("problem"), "problem"),
        algo=_merge(_ALGO_DEFAULTS, raw.get("algo"), "algo"),
        workers=_merge(_WORKER_DEFAULTS, raw.get("workers"), "workers"),
        run=_merge(_RUN_DEFAULTS, raw.get("run"), "run"),
    )
    cfg.algo_config()  # validate eagerly
    build_workers(cfg.workers)
    kind = cfg.problem["kind"]
    if kind not in ("synth_logistic", "libsvm_logistic", "synth_mlp"):
        raise ValueError(f"unknown problem kind {kind!r}")
    if kind == "libsvm_logistic":
        path = cfg.problem["path"]
        if not path or not Path(path).exists():
            raise ValueError(f"dataset path does not exist: {path!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(json.load(fh))


def build_problem(pcfg: dict) -> CompositeProblem:
    kind = pcfg["kind"]
    if kind == "synth_logistic":
        data = synth_dataset(pcfg["n"], pcfg["d"], pcfg["seed"],
                             flip_prob=pcfg["flip_prob"])
        return logistic_problem(data, pcfg["lambda1"], pcfg["lambda2"],
                                box_radius=pcfg["box_radius"])
    if kind == "libsvm_logistic":
        data = load_libsvm(pcfg["path"])
        return logistic_problem(data, pcfg["lambda1"], pcfg["lambda2"],
                                box_radius=pcfg["box_radius"])
    if kind == "synth_mlp":
        data = synth_multiclass_dataset(pcfg["n"], pcfg["d"], pcfg["classes"],
                                        pcfg["seed"])
        return mlp_problem(data, hidden=pcfg["hidden"], lambda2=pcfg["lambda2"])
    raise ValueError(f"unknown problem kind {kind!r}")


def build_workers(wcfg: dict) -> list[WorkerSpec]:
    count = wcfg["count"]
    if count < 1:
        raise ValueError("worker count must be >= 1")
    latency = wcfg["latency"]
    specs = []
    for i in range(count):
        spec = latency[i] if isinstance(latency, list) else latency
        specs.append(WorkerSpec(i, _latency_model(spec)))
    for s in specs:
        s.validate()
    return specs


def _latency_model(spec: dict):
    kind = spec.get("kind", "fixed")
    if kind == "fixed":
        return FixedLatency(int(spec.get("ticks", 1)))
    if kind == "uniform":
        return UniformLatency(int(spec["low"]), int(spec["high"]))
    if kind == "geometric":
        return GeometricLatency(float(spec["p"]))
    raise ValueError(f"unknown latency kind {kind!r}")


def oracle_best_loss(problem: CompositeProblem, iters: int = 2000) -> float:
    """Deterministic full-batch proximal-gradient run; returns the best
    objective seen. Serves as the reference optimum for loss targets and
    rate-bound checks."""
    if problem.smoothness is not None:
        eta = 1.0 / problem.smoothness
    else:
        eta = 0.1
    x = np.zeros(problem.d)
    best = problem.objective(x)
    for _ in range(iters):
        x = problem.prox(eta, x - eta * problem.full_grad(x))
        best = min(best, problem.objective(x))
    return best


def resolve_loss_target(config: ExperimentConfig,
                        problem: CompositeProblem) -> Optional[float]:
    """Absolute target, or best-known full-precision loss plus 10% of the
    initial gap when set to "auto"."""
    target = config.run.get("loss_target")
    if target is None:
        return None
    if isinstance(target, (int, float)):
        return float(target)
    if target == "auto":
        best = oracle_best_loss(problem, config.run.get("oracle_iters", 2000))
        start = problem.objective(np.zeros(problem.d))
        return best + 0.1 * (start - best)
    raise ValueError(f"loss_target must be a number, 'auto', or null; got {target!r}")


def _first_crossing(metrics: Sequence[dict], target: float):
    """First metrics row whose loss is below target: (bits, epoch, t_global)."""
    for row in metrics:
        loss = row.get("train_loss")
        if loss is not None and loss < target:
            return row["cumulative_bits"], row["epoch"], row["t_global"]
    return None


_METRIC_FIELDS = [
    "epoch", "t", "t_global", "D_t", "staleness", "worker_id", "train_loss",
    "grad_mapping_sq", "cumulative_bits", "mu_required", "b_x_used", "nnz_sent",
]


def _write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_METRIC_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            out = {k: ("" if row.get(k) is None else row.get(k)) for k in _METRIC_FIELDS}
            writer.writerow(out)


def run_experiment(config: ExperimentConfig,
                   problem: Optional[CompositeProblem] = None,
                   loss_target: Optional[float] = "unset") -> RunReport:
    """Execute one configured run and emit its artifacts.

    ``problem`` and ``loss_target`` can be supplied to share the dataset and
    target across a suite; otherwise they are built from the config.
    """
    if problem is None:
        problem = build_problem(config.problem)
    acfg = config.algo_config()
    workers = build_workers(config.workers)
    if loss_target == "unset":
        loss_target = resolve_loss_target(config, problem)

    result = run_training(problem, acfg, workers)

    theory = None
    if problem.smoothness is not None:
        if acfg.algo is Algorithm.SPARSE_ASYLPG:
            if acfg.phi is not None:
                theory = theory_constants(acfg, problem, phi=acfg.phi)
        else:
            theory = theory_constants(acfg, problem)

    crossing = _first_crossing(result.metrics, loss_target) \
        if loss_target is not None else None

    out_dir = config.run.get("out_dir")
    metrics_csv = ledger_csv = trace_csv = None
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_csv = str(out / "metrics.csv")
        ledger_csv = str(out / "ledger.csv")
        trace_csv = str(out / "trace.csv")
        _write_metrics_csv(metrics_csv, result.metrics)
        result.ledger.write_csv(ledger_csv)
        write_trace_csv(trace_csv, result.trace)

    report = RunReport(
        config=config.to_dict(),
        out_dir=out_dir,
        metrics_csv=metrics_csv,
        ledger_csv=ledger_csv,
        trace_csv=trace_csv,
        total_bits=result.ledger.total_bits,
        up_bits=result.ledger.up_bits,
        down_bits=result.ledger.down_bits,
        final_loss=result.final_loss,
        loss_target=loss_target,
        bits_to_target=crossing[0] if crossing else None,
        epochs_to_target=crossing[1] + 1 if crossing else None,
        target_reached=crossing is not None,
        violations=result.violations,
        search_failures=result.search_failures,
        min_grad_mapping_sq=result.min_grad_mapping_sq,
        theory=_jsonable(theory),
        output_vector=[float(v) for v in result.output],
    )
    if out_dir:
        with open(Path(out_dir) / "report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


def _jsonable(obj):
    if obj is None:
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def _with_overrides(config: ExperimentConfig, **algo_overrides) -> ExperimentConfig:
    raw = config.to_dict()
    raw["algo"].update(algo_overrides)
    return parse_config(raw)


def lr_grid_search(config: ExperimentConfig, grid: Sequence[float],
                   budget_epochs: Optional[int] = None,
                   problem: Optional[CompositeProblem] = None) -> tuple[float, dict]:
    """Pick the constant learning rate minimizing the final training loss over
    a short run; ties break toward the smaller rate. Divergent rates
    (non-finite loss) are skipped; all divergent is an error."""
    if not grid:
        raise ValueError("empty learning-rate grid")
    if problem is None:
        problem = build_problem(config.problem)
    workers = build_workers(config.workers)
    results = {}
    for lr in grid:
        cfg = _with_overrides(config, eta=lr, eta_mode="constant")
        acfg = cfg.algo_config()
        if budget_epochs is not None:
            acfg = AlgoConfig(**{**_acfg_dict(acfg), "epochs": budget_epochs})
        res = run_training(problem, acfg, workers)
        results[lr] = res.final_loss
    finite = {lr: loss for lr, loss in results.items() if math.isfinite(loss)}
    if not finite:
        raise ValueError(f"all learning rates diverged: {sorted(grid)}")
    best = min(sorted(finite), key=lambda lr: (finite[lr], lr))
    return best, results


def _acfg_dict(acfg: AlgoConfig) -> dict:
    d = asdict(acfg)
    d["algo"] = acfg.algo
    return d


def figure_mu_trace(config: ExperimentConfig,
                    probe_widths: Sequence[int] = (4, 8),
                    out_path=None) -> dict:
    """Per-broadcast required-precision-budget trace plus a spike summary.

    Probe widths are evaluated on the same pinned trajectory (the required
    budget is a pure function of the broadcast iterate and snapshot), so
    coarser and finer widths are compared on identical iterates.
    """
    cfg = _with_overrides(config, mu_probe_widths=sorted(set(probe_widths)))
    problem = build_problem(cfg.problem)
    workers = build_workers(cfg.workers)
    result = run_training(problem, cfg.algo_config(), workers)
    rows = result.broadcasts
    if out_path:
        fields = ["epoch", "version", "mu_required", "b_x_used", "violation"]
        fields += [f"mu_required_b{w}" for w in sorted(set(probe_widths))]
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in fields})
    summary = _mu_summary(rows, cfg.algo_config().m, sorted(set(probe_widths)))
    summary["rows"] = rows
    return summary


def _mu_summary(rows: Sequence[dict], m: int, widths: Sequence[int]) -> dict:
    summary: dict = {"n_broadcasts": len(rows)}
    vals = [r["mu_required"] for r in rows if r.get("mu_required") is not None]
    summary["all_finite"] = all(math.isfinite(v) for v in vals) if vals else True
    summary["mu_ceiling"] = max(vals) if vals else None
    for w in widths:
        key = f"mu_required_b{w}"
        wv = [r[key] for r in rows if r.get(key) is not None]
        summary[f"mu_ceiling_b{w}"] = max(wv) if wv else None
    # fraction of epochs whose peak requirement sits in the first 20% of
    # inner iterations
    by_epoch: dict[int, list] = {}
    for r in rows:
        if r.get("mu_required") is not None:
            by_epoch.setdefault(r["epoch"], []).append(r)
    early = 0
    for _, erows in sorted(by_epoch.items()):
        peak = max(erows, key=lambda r: r["mu_required"])
        if peak["version"] < max(1, 0.2 * m):
            early += 1
    summary["epochs"] = len(by_epoch)
    summary["early_peak_epochs"] = early
    summary["early_peak_fraction"] = early / len(by_epoch) if by_epoch else None
    return summary


def _compare_worker(args):
    raw, target = args
    config = parse_config(raw)
    problem = build_problem(config.problem)
    return run_experiment(config, problem=problem, loss_target=target)


def compare_suite(configs: Sequence[ExperimentConfig],
                  loss_target: Optional[float] = None) -> dict:
    """Run several algorithms on one shared problem and tabulate
    bits/epochs-to-target with ratios normalized to the full-precision
    baseline (ratio = baseline bits / algorithm bits)."""
    if len(configs) < 2:
        raise ValueError("need at least two configs to compare")
    base = configs[0].problem
    for c in configs[1:]:
        if c.problem != base:
            raise ValueError("compared configs must share the problem section")
    problem = build_problem(base)
    if loss_target is None:
        loss_target = resolve_loss_target(configs[0], problem)

    threads = int(os.environ.get("DQSIM_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(
                pool.map(
                    _compare_worker,
                    [(c.to_dict(), loss_target) for c in configs],
                )
            )
    else:
        reports = [
            run_experiment(c, problem=problem, loss_target=loss_target)
            for c in configs
        ]

    table = []
    baseline_bits = None
    for cfg, rep in zip(configs, reports):
        name = cfg.algo["algo"]
        if name == Algorithm.ASYFPG.value and baseline_bits is None:
            baseline_bits = rep.bits_to_target
        table.append(
            {
                "algo": name,
                "bits_to_target": rep.bits_to_target,
                "epochs_to_target": rep.epochs_to_target,
                "total_bits": rep.total_bits,
                "final_loss": rep.final_loss,
                "target_reached": rep.target_reached,
            }
        )
    for row in table:
        if baseline_bits and row["bits_to_target"]:
            row["ratio_vs_asyfpg"] = baseline_bits / row["bits_to_target"]
        else:
            row["ratio_vs_asyfpg"] = None
    return {"loss_target": loss_target, "table": table, "reports": reports}
