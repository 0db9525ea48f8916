import csv
import hashlib
import json
import logging
import os
import sys
import threading
from contextlib import contextmanager
from queue import Queue

import click
import numpy as np
from tabulate import tabulate

from qecopt.channels import (
    ChannelError,
    identity_channel,
    load_channel,
    load_shipped_channel,
    project_to_tp,
    random_error_channel,
    save_channel,
)
from qecopt.config import DATA_DIR, ConfigError, get_policy, load_config, load_experiment, load_policy, use_policy
from qecopt.design import DesignError, DesignResult, biconvex_design, partial_trace_recovery, robust_design
from qecopt.fidelity import ConvergenceError, fidelity_bounds, pipeline, pipeline_f_avg
from qecopt.linalg import DimensionError
from qecopt.sdp import SolverError, flop_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_TOLERANCE = 3
EXPECTATIONS_FILE = os.path.join(DATA_DIR, "reproduction_expectations.json")
MAGNITUDE_FILES = {("encoding", "x"): "x_c.csv", ("encoding", "y"): "y_c.csv",
                   ("recovery", "x"): "x_r.csv", ("recovery", "y"): "y_r.csv"}


# ---------------------------------------------------------------------------------------
# HELPERS
# ---------------------------------------------------------------------------------------
def _sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _write_json(data, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    logger.info(f"✅ Wrote {path}")


def _load_source(source, seed=None):
    """Channel for a config source; file and shipped data always pass through TP projection."""
    if source.generator is not None:
        spec = source.generator
        return random_error_channel(spec.seed if seed is None else seed, spec.delta_e, spec.dim_sys, spec.dim_bath)
    raw = load_channel(source.path) if source.path else load_shipped_channel(source.shipped)[0]
    return project_to_tp(raw)


def _load_errors(config, seed=None):
    errors = []
    for index, source in enumerate(config.channels):
        errors.append(_load_source(source, None if seed is None else seed + index))
    return errors


def _target(config):
    if config.target is None:
        return None
    arr = np.array(config.target, dtype=np.float64)
    return arr[:, :, 0] + 1j * arr[:, :, 1]


def _initial_recovery(config, error):
    if config.recovery is not None:
        return _load_source(config.recovery)
    nc = error.dim_in
    if nc % config.n_sys:
        raise DimensionError(f"codespace dimension {nc} is not a multiple of n_sys={config.n_sys}")
    return partial_trace_recovery(config.n_sys, nc // config.n_sys)


@contextmanager
def _trace_sink(out_dir, enabled):
    """JSON-lines solver trace, one record per Newton iteration."""
    if not enabled:
        yield None
        return
    os.makedirs(out_dir, exist_ok=True)
    lock = threading.Lock()
    path = os.path.join(out_dir, "solver_trace.jsonl")
    with open(path, "w") as f:
        def sink(record):
            with lock:
                f.write(json.dumps(record) + "\n")
        yield sink
    logger.info(f"✅ Solver trace written to {path}")


def _provenance(config_path, errors):
    return {
        "config_sha256": _sha256(config_path) if config_path else None,
        "channels": [e.provenance for e in errors],
        "numeric_policy": get_policy().model_dump(),
    }


def _write_result(result, out_dir, name, provenance):
    data = result.to_dict()
    data["provenance"] = {**data["provenance"], **provenance}
    _write_json(data, os.path.join(out_dir, f"{name}.json"))
    result.write_trace_csv(os.path.join(out_dir, "trace.csv" if name == "design_result" else f"trace_{name}.csv"))


# ---------------------------------------------------------------------------------------
# WORKER QUEUE FOR INDEPENDENT RUNS
# ---------------------------------------------------------------------------------------
def run_jobs(tasks, jobs=1):
    """Run named callables on `jobs` worker threads; results come back in task order."""
    task_queue = Queue()
    results = {}
    failures = {}

    def worker():
        while True:
            name = task_queue.get()
            if name is None:
                task_queue.task_done()
                break
            try:
                logger.info(f"Starting {name}")
                results[name] = tasks[name]()
                logger.info(f"✅ Finished {name}")
            except Exception as e:
                logger.error(f"❌ {name} failed: {e}")
                failures[name] = e
            task_queue.task_done()

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(max(1, min(jobs, len(tasks))))]
    for thread in threads:
        thread.start()
    for name in tasks:
        task_queue.put(name)
    for _ in threads:
        task_queue.put(None)
    task_queue.join()
    for name in tasks:
        if name in failures:
            raise failures[name]
    return {name: results[name] for name in tasks}


# ---------------------------------------------------------------------------------------
# COMMANDS
# ---------------------------------------------------------------------------------------
def cmd_design(config, out_dir, config_path=None, seed=None, trace=False):
    errors = _load_errors(config, seed)
    target = _target(config)
    recovery = _initial_recovery(config, errors[0])
    with _trace_sink(out_dir, trace) as sink:
        result = biconvex_design(errors[0], recovery, target, config.epsilon, config.max_iters,
                                 config.order, _initial_encoding(config), sink)
    _write_result(result, out_dir, "design_result", _provenance(config_path, errors))
    logger.info(f"✅ Design finished after {result.iterations} iterations: f_avg = {result.final_f_avg:.6f}")
    return result


def cmd_robust(config, out_dir, config_path=None, seed=None, trace=False):
    errors = _load_errors(config, seed)
    target = _target(config)
    recovery = _initial_recovery(config, errors[0])
    with _trace_sink(out_dir, trace) as sink:
        result = robust_design(errors, recovery, target, config.epsilon, config.max_iters,
                               config.order, _initial_encoding(config), sink)
    _write_result(result, out_dir, "design_result", _provenance(config_path, errors))
    logger.info(f"✅ Robust design finished after {result.iterations} iterations: worst case {result.final_f_avg:.6f}")
    return result


def _initial_encoding(config):
    return _load_source(config.encoding) if config.encoding is not None else None


def cmd_channel_gen(config, out_dir, seed=None):
    paths = []
    for index, source in enumerate(config.channels):
        spec = source.generator
        channel_seed = spec.seed if seed is None else seed + index
        ch = random_error_channel(channel_seed, spec.delta_e, spec.dim_sys, spec.dim_bath)
        path = os.path.join(out_dir, f"channel_{channel_seed}.json")
        save_channel(ch, path)
        paths.append(path)
    return paths


def cmd_fidelity(config, out_dir, seed=None):
    error = _load_errors(config, seed)[0]
    target = _target(config)
    recovery = _initial_recovery(config, error)
    encoding = _initial_encoding(config)
    if encoding is None:
        if error.dim_in != config.n_sys:
            raise ValueError("fidelity mode needs an encoding unless the error acts on the system directly")
        encoding = identity_channel(config.n_sys)
    bounds = fidelity_bounds(pipeline(recovery, error, encoding), target)
    data = {"f_avg": bounds.f_avg, "f_mixed": bounds.f_mixed, "f_pure_estimate": bounds.f_pure,
            "argmin_eigenvalue_gap": bounds.eigenvalue_gap}
    click.echo(tabulate([[k, f"{v:.10f}"] for k, v in data.items()], headers=["measure", "value"]))
    _write_json(data, os.path.join(out_dir, "fidelity.json"))
    return bounds


def cmd_flops(qubits_sys, qubits_anc):
    rows = flop_table(qubits_sys, qubits_anc)
    table = [[row.problem, row.r, row.m, f"{row.primal:.0f}", f"{row.dual:.0f}", f"{row.conversion:.0f}",
              f"{row.speedup:.0f}", "yes" if row.out_of_model else ""] for row in rows]
    click.echo(tabulate(table, headers=["problem", "r", "m", "primal", "dual", "dual-to-primal", "speed-up",
                                        "out of model"]))
    return rows


def write_magnitude_csv(matrix, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in np.abs(matrix):
            writer.writerow([repr(float(v)) for v in row])


def read_magnitude_csv(path):
    with open(path, "r", newline="") as f:
        return np.array([[float(v) for v in row] for row in csv.reader(f)])


def cmd_export_magnitudes(result_path, out_dir):
    """Entrywise magnitudes of the final primal/dual pairs as CSV."""
    result = DesignResult.from_dict(load_config(result_path))
    missing = [kind for kind in ("encoding", "recovery") if kind not in result.process_matrices]
    if missing:
        raise ValueError(f"{result_path} has no process matrices or dual certificates for {', '.join(missing)}")
    target_dir = os.path.join(out_dir, "magnitudes")
    os.makedirs(target_dir, exist_ok=True)
    paths = {}
    for (kind, part), filename in MAGNITUDE_FILES.items():
        x, y = result.process_matrices[kind]
        path = os.path.join(target_dir, filename)
        write_magnitude_csv(x if part == "x" else y, path)
        paths[filename] = path
    logger.info(f"✅ Exported {len(paths)} magnitude tables to {target_dir}")
    return paths


def _reproduction_runs(expectations, errors, trace):
    recovery = partial_trace_recovery(2, 2)
    tasks = {}
    for name, run in expectations["runs"].items():
        channels = [errors[e] for e in run["errors"]]
        if run["kind"] == "design":
            tasks[name] = (lambda ch=channels, r=run: biconvex_design(
                ch[0], recovery, None, r["epsilon"], r["max_iters"], trace=trace))
        else:
            tasks[name] = (lambda ch=channels, r=run: robust_design(
                ch, recovery, None, r["epsilon"], r["max_iters"], trace=trace))
    return tasks


def _evaluate_cell(cell, results, errors):
    if cell["stage"] == "published":
        encoding = project_to_tp(load_channel(os.path.join(DATA_DIR, "code_a100_encoding.json")))
        recovery = project_to_tp(load_channel(os.path.join(DATA_DIR, "code_a100_recovery.json")))
    else:
        recovery, encoding = results[cell["run"]].snapshots[cell["stage"]]
    if cell["error"] == "worst":
        run_errors = [errors[name] for name in results[cell["run"]].provenance["error_names"]]
        return min(pipeline_f_avg(recovery, e, encoding) for e in run_errors)
    return pipeline_f_avg(recovery, errors[cell["error"]], encoding)


def cmd_reproduce(out_dir, jobs=1, dry_run=False, trace=False):
    """Run the published example and compare every table cell with its stored tolerance."""
    expectations = load_config(EXPECTATIONS_FILE)
    if dry_run:
        plan = [[name, run["kind"], ",".join(run["errors"]), run["max_iters"]] for name, run in expectations["runs"].items()]
        click.echo(tabulate(plan, headers=["run", "kind", "errors", "iterations"]))
        click.echo(f"{len(expectations['cells'])} cells would be evaluated; no solver was started.")
        return EXIT_OK, None

    errors = {name: load_shipped_channel(name)[1] for name in ("error_a", "error_b")}
    with _trace_sink(out_dir, trace) as sink:
        results = run_jobs(_reproduction_runs(expectations, errors, sink), jobs)
    for name, result in results.items():
        result.provenance["error_names"] = expectations["runs"][name]["errors"]
        _write_result(result, out_dir, name, {"channels": [errors[e].provenance for e in expectations["runs"][name]["errors"]]})

    rows = []
    for cell in expectations["cells"]:
        computed = _evaluate_cell(cell, results, errors)
        passed = abs(computed - cell["expected"]) <= cell["tolerance"]
        rows.append({**cell, "computed": computed, "passed": passed, "informational": cell.get("informational", False)})
        log = logger.info if passed else logger.warning
        log(f"{'✅' if passed else '❌'} {cell['pair']} vs {cell['error']}: {computed:.4f} (expected {cell['expected']} ± {cell['tolerance']})")

    robust = results["robust_ab"]
    balance = max(robust.per_error_f_avg) - min(robust.per_error_f_avg)
    checks = {"robust_balance": {"value": balance, "tolerance": expectations["robust_balance_tolerance"],
                                 "passed": balance <= expectations["robust_balance_tolerance"]}}
    certificate_failures = sum(r.certificates.get("failures", 0) for r in results.values())
    checks["certificates"] = {"value": max(max(r.certificates.get("gap", 0.0), r.certificates.get("slackness", 0.0))
                                           for r in results.values()),
                              "tolerance": get_policy().certificate, "passed": certificate_failures == 0}
    for name in ("design_a", "design_b"):
        ranks = results[name].dominant_ranks
        ok = ranks.get("encoding") == 1 and ranks.get("recovery") == 2
        checks[f"structure_{name}"] = {"value": ranks, "passed": ok, "informational": True}
        if not ok:
            logger.warning(f"⚠️ {name}: dominant ranks {ranks}, expected one for the encoding and two for the recovery")

    report = {"cells": rows, "checks": checks,
              "runs": {name: {"iterations": r.iterations, "final_f_avg": r.final_f_avg, "converged": r.converged,
                              "per_error_f_avg": list(r.per_error_f_avg), "certificates": r.certificates}
                       for name, r in results.items()},
              "numeric_policy": get_policy().model_dump()}
    _write_json(report, os.path.join(out_dir, "report.json"))
    click.echo(tabulate([[r["table"], r["pair"], r["error"], f"{r['computed']:.4f}", r["expected"], r["tolerance"],
                          "pass" if r["passed"] else ("info" if r["informational"] else "FAIL")] for r in rows],
                        headers=["table", "pair", "error", "computed", "published", "tolerance", "status"]))
    failed = [r for r in rows if not r["passed"] and not r["informational"]]
    failed += [name for name, c in checks.items() if not c["passed"] and not c.get("informational")]
    return (EXIT_TOLERANCE if failed else EXIT_OK), report


# ---------------------------------------------------------------------------------------
# CLICK ENTRY POINTS
# ---------------------------------------------------------------------------------------
def _guarded(action):
    """Run `action`, mapping failures onto the documented exit codes."""
    try:
        code = action()
    except (ConfigError, ChannelError, DimensionError, ValueError, KeyError, FileNotFoundError) as e:
        logger.error(f"❌ {e}")
        sys.exit(EXIT_VALIDATION)
    except (SolverError, DesignError, ConvergenceError, ArithmeticError) as e:
        logger.error(f"❌ Solver failure: {e}")
        sys.exit(EXIT_SOLVER)
    sys.exit(code or EXIT_OK)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log Newton iterations and other solver detail.")
def main(verbose):
    """Design quantum error-correcting encodings and recoveries by alternating SDPs."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s [%(levelname)s] %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Experiment JSON file.")
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override generator seeds (seed + index per channel).")
@click.option("--trace", is_flag=True, help="Write one JSON line per Newton iteration.")
@click.option("--dry-run", is_flag=True, help="Validate and print the plan without solving.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker threads for independent runs.")
def run(config_path, out_dir, seed, trace, dry_run, jobs):
    """Run the experiment described by a configuration file."""
    def action():
        config = load_experiment(config_path)
        target_dir = out_dir or config.output_dir
        if dry_run and config.mode != "reproduce":
            click.echo(f"mode={config.mode} channels={len(config.channels)} epsilon={config.epsilon} "
                       f"max_iters={config.max_iters} order={config.order} out={target_dir}")
            return EXIT_OK
        with use_policy(load_policy(config.numeric_policy)):
            if config.mode == "design":
                cmd_design(config, target_dir, config_path, seed, trace)
            elif config.mode == "robust":
                cmd_robust(config, target_dir, config_path, seed, trace)
            elif config.mode == "channel-gen":
                cmd_channel_gen(config, target_dir, seed)
            elif config.mode == "fidelity":
                cmd_fidelity(config, target_dir, seed)
            else:
                return cmd_reproduce(target_dir, jobs, dry_run, trace)[0]
        return EXIT_OK
    _guarded(action)


@main.command()
@click.option("--out", "out_dir", default="results/reproduction", show_default=True, type=click.Path(file_okay=False))
@click.option("--trace", is_flag=True, help="Write one JSON line per Newton iteration.")
@click.option("--dry-run", is_flag=True, help="Print the planned solves without running them.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker threads for independent runs.")
def reproduce(out_dir, trace, dry_run, jobs):
    """Reproduce the published average and robust fidelity tables."""
    _guarded(lambda: cmd_reproduce(out_dir, jobs, dry_run, trace)[0])


@main.command("export-magnitudes")
@click.argument("result_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", default=".", show_default=True, type=click.Path(file_okay=False))
def export_magnitudes(result_path, out_dir):
    """Write |X_C|, |Y_C|, |X_R|, |Y_R| from a design result as CSV."""
    def action():
        cmd_export_magnitudes(result_path, out_dir)
        return EXIT_OK
    _guarded(action)


@main.command()
@click.option("--qubits-sys", type=click.IntRange(min=0), default=1, show_default=True)
@click.option("--qubits-anc", type=click.IntRange(min=0), default=1, show_default=True)
def flops(qubits_sys, qubits_anc):
    """Per-iteration flop model of the primal and dual solvers."""
    def action():
        cmd_flops(qubits_sys, qubits_anc)
        return EXIT_OK
    _guarded(action)


if __name__ == "__main__":
    main()
