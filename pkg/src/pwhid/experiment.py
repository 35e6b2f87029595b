"""Simulation study pipeline: simulate -> estimate -> decompose.

Every stage reads and writes plain files in the output directory, so the
stages can be run one by one or chained by :func:`cmd_montecarlo`. All
randomness derives from one root seed: stage ``s`` uses
``SeedSequence(seed, spawn_key=(s,))`` and start ``i`` of the multistart
extends that key with ``i``.
"""
from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import decomposer as dec
from .exceptions import (
    ConfigError,
    DimensionError,
    PwhidError,
    ShapeError,
)
from .system import (
    ParallelWhModel,
    add_output_noise,
    analytic_kernels,
    load_model,
    load_signal,
    sample_random_model,
    save_model,
    save_signal,
    simulate,
)
from .tensor_core import read_kernel, symmetrize, write_kernel
from .volterra import build_regression, estimate_kernels, volterra_predict

STAGE_MODEL, STAGE_INPUT, STAGE_NOISE, STAGE_VALIDATION, STAGE_STARTS, STAGE_ORACLE = range(6)

MODEL_FILE = "model.json"
INPUT_FILE = "input.txt"
CLEAN_FILE = "output_clean.txt"
NOISY_FILE = "output_noisy.txt"
ESTIMATE_FILE = "estimate.json"
REPORT_FILE = "report.json"
STARTS_FILE = "starts.csv"
SUMMARY_FILE = "summary.json"


class StageError(PwhidError):
    """Failure inside one pipeline stage; ``cause`` is the original error."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


# --------------------------------------------------------------------------
# configuration


@dataclass
class SystemConfig:
    r: int = 2
    m_p: int = 10
    m_q: int = 10
    degrees: tuple[int, ...] = (2, 3)
    coef_std: float = 0.1
    model_file: str | None = None


@dataclass
class SignalConfig:
    n_samples: int = 10_000
    input_std: float = 0.7
    validation_samples: int = 2_000


@dataclass
class NoiseConfig:
    snr_db: float | None = 10.0


@dataclass
class EstimationConfig:
    degrees: tuple[int, ...] = (2, 3)
    cond_limit: float = 1e10


@dataclass
class DecompositionConfig:
    n_starts: int = 100
    max_iters: int = 500
    gtol: float = 1e-10
    xtol: float = 1e-10
    lambda0: float = 1e-3
    init_filter_std: float = 0.3
    init_coef_std: float = 0.1
    param_tol: float = 1e-2
    output_tol: float = 0.05


@dataclass
class ExperimentConfig:
    """Defaults reproduce the two-branch, memory-10, 10 dB simulation study."""

    seed: int = 0
    workers: int = 1
    out: str = "out"
    system: SystemConfig = field(default_factory=SystemConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)

    @property
    def memory(self) -> int:
        return self.system.m_p + self.system.m_q

    def lm_options(self) -> dec.LMOptions:
        d = self.decomposition
        return dec.LMOptions(
            max_iters=d.max_iters,
            gtol=d.gtol,
            xtol=d.xtol,
            lambda0=d.lambda0,
            init_filter_std=d.init_filter_std,
            init_coef_std=d.init_coef_std,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        s, g, e, d = self.system, self.signal, self.estimation, self.decomposition
        positive = {
            "system.r": s.r,
            "signal.n_samples": g.n_samples,
            "signal.validation_samples": g.validation_samples,
            "decomposition.n_starts": d.n_starts,
            "decomposition.max_iters": d.max_iters,
            "experiment.workers": self.workers,
        }
        for name, value in positive.items():
            if value < 1:
                raise ConfigError("must be a positive integer", name)
        for name, value in {"system.m_p": s.m_p, "system.m_q": s.m_q}.items():
            if value < 0:
                raise ConfigError("must be non-negative", name)
        for name, value in {"signal.input_std": g.input_std, "system.coef_std": s.coef_std}.items():
            if not value > 0:
                raise ConfigError("must be positive", name)
        for name, degs in {"system.degrees": s.degrees, "estimation.degrees": e.degrees}.items():
            if not degs or min(degs) < 1:
                raise ConfigError("must list positive degrees", name)
        if not set(e.degrees) <= set(s.degrees) and s.model_file is None:
            raise ConfigError("must be a subset of system.degrees", "estimation.degrees")
        if self.noise.snr_db is not None and not math.isfinite(self.noise.snr_db):
            raise ConfigError("must be finite or 'none'", "noise.snr_db")
        return self


_SECTIONS = {"system", "signal", "noise", "estimation", "decomposition"}


def _parse_value(raw: str, current: Any, name: str):
    raw = raw.strip()
    try:
        if isinstance(current, tuple) or name.endswith("degrees"):
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        if name == "snr_db":
            return None if raw.lower() in {"none", "inf", ""} else float(raw)
        if name == "model_file":
            return raw or None
        if isinstance(current, bool):
            return raw.lower() in {"1", "true", "yes", "on"}
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r}", name) from None


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read an INI-style config file; unknown sections or keys are errors.

    ``overrides`` set top-level fields (``seed``, ``workers``, ``out``) when not
    ``None``.
    """
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "config") from None
        except configparser.Error as exc:
            raise ConfigError(str(exc), "config") from None
        for section in parser.sections():
            if section == "experiment":
                target = cfg
                allowed = {"seed", "workers", "out"}
            elif section in _SECTIONS:
                target = getattr(cfg, section)
                allowed = {f.name for f in fields(target)}
            else:
                raise ConfigError("unknown section", section)
            for key, raw in parser.items(section):
                if key not in allowed:
                    raise ConfigError("unknown key", f"{section}.{key}")
                setattr(target, key, _parse_value(raw, getattr(target, key), key))
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def stage_seed(root: int, stage: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root, spawn_key=(stage,))


# --------------------------------------------------------------------------
# helpers


def _out_dir(config: ExperimentConfig, out=None) -> Path:
    path = Path(out if out is not None else config.out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


def kernel_path(out: Path, d: int) -> Path:
    return out / f"kernel_d{d}.txt"


def _rel_rms(estimate: np.ndarray, reference: np.ndarray) -> float:
    denom = math.sqrt(float(np.mean(reference**2)))
    err = math.sqrt(float(np.mean((estimate - reference) ** 2)))
    return err / denom if denom > 0 else err


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson correlation over pairs where both values are finite."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 2 or np.std(x[ok]) == 0 or np.std(y[ok]) == 0:
        return None
    return float(np.corrcoef(x[ok], y[ok])[0, 1])


def _system_model(config: ExperimentConfig) -> ParallelWhModel:
    s = config.system
    if s.model_file:
        try:
            return load_model(s.model_file)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load model: {exc}", "system.model_file") from None
    return sample_random_model(
        s.r, s.m_p, s.m_q, s.degrees, stage_seed(config.seed, STAGE_MODEL), coef_std=s.coef_std
    )


def _draw_input(config: ExperimentConfig, n: int, stage: int) -> np.ndarray:
    rng = np.random.default_rng(stage_seed(config.seed, stage))
    return rng.normal(0.0, config.signal.input_std, size=n)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(config: ExperimentConfig, out=None) -> dict[str, Path]:
    """Draw (or load) the true system and an input record, write the model,
    input, clean output and noisy output files."""
    out = _out_dir(config, out)
    model = _system_model(config)
    u = _draw_input(config, config.signal.n_samples, STAGE_INPUT)
    y0 = simulate(model, u)
    y = add_output_noise(y0, config.noise.snr_db, stage_seed(config.seed, STAGE_NOISE))
    paths = {
        "model": out / MODEL_FILE,
        "input": out / INPUT_FILE,
        "clean": out / CLEAN_FILE,
        "noisy": out / NOISY_FILE,
    }
    save_model(paths["model"], model)
    save_signal(paths["input"], u)
    save_signal(paths["clean"], y0)
    save_signal(paths["noisy"], y)
    return paths


def cmd_estimate(config: ExperimentConfig, input_path, output_path, out=None) -> dict:
    """Least-squares kernels of memory ``m_p + m_q`` from a signal pair."""
    out = _out_dir(config, out)
    try:
        u = load_signal(input_path)
        y = load_signal(output_path)
    except OSError as exc:
        raise ConfigError(f"cannot read signal: {exc}", "signals") from None
    if u.size != y.size:
        raise ConfigError(
            f"input has {u.size} samples but output has {y.size}", "signals"
        )
    problem = build_regression(u, y, config.memory, config.estimation.degrees)
    kernels, info = estimate_kernels(problem, config.estimation.cond_limit, full_output=True)
    paths = {}
    for d, H in kernels.items():
        paths[d] = kernel_path(out, d)
        write_kernel(paths[d], H)
    diagnostics = {"memory": config.memory, "degrees": list(problem.degrees), **info}
    _write_json(out / ESTIMATE_FILE, diagnostics)
    return {"kernels": paths, "diagnostics": diagnostics, "estimate": kernels}


def _load_kernels(paths) -> dict[int, np.ndarray]:
    kernels = {}
    for p in paths:
        H = read_kernel(p)
        if H.ndim in kernels:
            raise ConfigError(f"two kernel files of degree {H.ndim}", "kernels")
        kernels[H.ndim] = H
    return kernels


def cmd_decompose(
    config: ExperimentConfig,
    kernel_paths: Sequence,
    truth_path=None,
    validation: tuple | None = None,
    diagnostics: dict | None = None,
    out=None,
) -> dict:
    """Multistart joint decomposition of kernel files, with a success report.

    With a truth model, each start gets a parameter error and the
    validation reference is the truth's noiseless output on a fresh input.
    Otherwise ``validation = (input_path, output_path)`` supplies measured
    validation data; without either, the kernels' own Volterra prediction on a
    fresh input serves as the reference.
    """
    out = _out_dir(config, out)
    s = config.system
    kernels = _load_kernels(kernel_paths)
    degrees = tuple(sorted(kernels))
    dim = s.m_p + s.m_q + 1
    for d, H in kernels.items():
        if H.shape[0] != dim:
            raise DimensionError(
                f"degree-{d} kernel has dimension {H.shape[0]}, m_p + m_q + 1 = {dim}"
            )
    if diagnostics is None and (out / ESTIMATE_FILE).exists():
        diagnostics = json.loads((out / ESTIMATE_FILE).read_text())

    truth = load_model(truth_path) if truth_path is not None else None
    if truth is not None and (truth.r, truth.m_p, truth.m_q) != (s.r, s.m_p, s.m_q):
        raise ShapeError("truth model shape differs from system configuration")

    # validation references
    val_noisy = None
    if validation is not None:
        u_val = load_signal(validation[0])
        val_ref = load_signal(validation[1])
        reference_kind = "measured"
    else:
        u_val = _draw_input(config, config.signal.validation_samples, STAGE_VALIDATION)
        if truth is not None:
            val_ref = simulate(truth, u_val)
            val_noisy = add_output_noise(
                val_ref, config.noise.snr_db, np.random.SeedSequence(config.seed, spawn_key=(STAGE_VALIDATION, 1))
            )
            reference_kind = "noiseless_truth"
        else:
            val_ref = volterra_predict(kernels, u_val)
            reference_kind = "volterra_kernels"

    opts = config.lm_options()
    results, best = dec.multistart(
        kernels, s.r, s.m_p, s.m_q, degrees,
        config.decomposition.n_starts,
        stage_seed(config.seed, STAGE_STARTS),
        opts,
        n_jobs=config.workers,
    )

    reference_cost = None
    if truth is not None and set(truth.degrees) >= set(degrees):
        # local minimum in the truth's basin: the attainable optimum for these kernels
        ref_fit = dec.fit_joint_cpd(
            kernels, s.r, s.m_p, s.m_q, degrees, dec.parameterize(truth, degrees), opts
        )
        reference_cost = ref_fit.final_cost
    energy = sum(float(np.sum(H**2)) for H in kernels.values())

    records = []
    for res in results:
        rec: dict[str, Any] = {
            "start_index": res.start_index,
            "seed": res.seed,
            "converged": res.converged,
            "iterations": res.iterations,
            "final_cost": _finite_or_none(res.final_cost),
            "cost_per_degree": {str(d): _finite_or_none(c) for d, c in res.cost_per_degree.items()},
        }
        model = res.model
        y_val = simulate(model, u_val)
        if truth is not None:
            pe = dec.parameter_error(_restrict(truth, degrees), model)
            rec["parameter_error"] = pe
            rec["success"] = bool(pe < config.decomposition.param_tol)
        out_err = _rel_rms(y_val, val_ref)
        rec["output_error"] = out_err if math.isfinite(out_err) else None
        if val_noisy is not None:
            rec["output_error_noisy"] = _rel_rms(y_val, val_noisy)
        if truth is None:
            rec["success"] = bool(math.isfinite(out_err) and out_err < config.decomposition.output_tol)
        if reference_cost is not None:
            rec["reached_reference"] = bool(
                res.final_cost - reference_cost <= 1e-6 * reference_cost + 1e-12 * energy
            )
        rec["degenerate_branches"] = res.degenerate_branches()
        if res.error:
            rec["error"] = res.error
        records.append(rec)

    n_success = sum(rec["success"] for rec in records)
    best_res = results[best]
    report: dict[str, Any] = {
        "config": config.to_dict(),
        "degrees": list(degrees),
        "estimation": diagnostics,
        "n_starts": len(records),
        "success_criterion": (
            f"parameter_error < {config.decomposition.param_tol}"
            if truth is not None
            else f"output_error < {config.decomposition.output_tol}"
        ),
        "success_count": n_success,
        "success_rate": n_success / len(records),
        "validation_reference": reference_kind,
        "best_index": best,
        "best_cost": _finite_or_none(best_res.final_cost),
        "best_model": best_res.model.to_dict(),
        "best_output_error": records[best]["output_error"],
        "cost_output_error_correlation": pearson(
            [r["final_cost"] if r["final_cost"] is not None else math.nan for r in records],
            [r["output_error"] if r["output_error"] is not None else math.nan for r in records],
        ),
    }
    if truth is not None:
        report["best_parameter_error"] = records[best]["parameter_error"]
        report["best_output_error_noisy"] = records[best].get("output_error_noisy")
    if reference_cost is not None:
        n_ref = sum(r["reached_reference"] for r in records)
        report["reference_cost"] = reference_cost
        report["reference_count"] = n_ref
        report["reference_rate"] = n_ref / len(records)
    report["starts"] = records

    _write_json(out / REPORT_FILE, report)
    _write_starts_csv(out / STARTS_FILE, records, truth is not None)
    _write_plot_data(out, best_res.model, truth, u_val, val_ref, val_noisy, simulate(best_res.model, u_val))
    return report


def _restrict(model: ParallelWhModel, degrees) -> ParallelWhModel:
    return ParallelWhModel.from_arrays(model.p, model.q, {d: model.c(d) for d in degrees})


def _write_starts_csv(path: Path, records: list[dict], with_truth: bool) -> None:
    cols = ["start", "cost", "parameter_error", "output_error", "converged", "iterations"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([
                r["start_index"],
                repr(r["final_cost"]) if r["final_cost"] is not None else "inf",
                repr(r["parameter_error"]) if with_truth else "",
                repr(r["output_error"]) if r["output_error"] is not None else "inf",
                int(r["converged"]),
                r["iterations"],
            ])


def _write_plot_data(out: Path, model, truth, u_val, y_ref, y_noisy, y_val) -> None:
    """Filter taps (estimated vs true) and validation traces of the best start."""
    with open(out / "best_filters.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["branch", "filter", "tap", "estimate", "truth"])
        for r, b in enumerate(model.branches):
            for name, coeffs, attr in (("p", b.front.coeffs, "front"), ("q", b.back.coeffs, "back")):
                for i, val in enumerate(coeffs):
                    t = getattr(truth.branches[r], attr).coeffs[i] if truth is not None else ""
                    w.writerow([r, name, i, repr(float(val)), repr(float(t)) if t != "" else ""])
            for d in model.degrees:
                t = truth.branches[r].nonlinearity.coeff(d) if truth is not None else ""
                w.writerow([r, f"c{d}", 0, repr(b.nonlinearity.coeff(d)), repr(float(t)) if t != "" else ""])
    with open(out / "best_output.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "input", "reference", "noisy", "model"])
        for k in range(u_val.size):
            w.writerow([
                k,
                repr(float(u_val[k])),
                repr(float(y_ref[k])),
                repr(float(y_noisy[k])) if y_noisy is not None else "",
                repr(float(y_val[k])),
            ])


def cmd_montecarlo(config: ExperimentConfig, out=None) -> dict:
    """Run simulate, estimate and decompose in sequence and write a summary."""
    out = _out_dir(config, out)
    try:
        paths = cmd_simulate(config, out)
    except Exception as exc:
        raise StageError("simulate", exc) from exc
    try:
        est = cmd_estimate(config, paths["input"], paths["noisy"], out)
    except Exception as exc:
        raise StageError("estimate", exc) from exc
    try:
        report = cmd_decompose(
            config, [est["kernels"][d] for d in sorted(est["kernels"])], paths["model"],
            diagnostics=est["diagnostics"], out=out,
        )
    except Exception as exc:
        raise StageError("decompose", exc) from exc
    keys = [
        "n_starts", "success_criterion", "success_count", "success_rate",
        "reference_cost", "reference_count", "reference_rate", "best_index",
        "best_cost", "best_parameter_error", "best_output_error",
        "cost_output_error_correlation",
    ]
    summary = {"config": config.to_dict(), "estimation": est["diagnostics"]}
    summary.update({k: report[k] for k in keys if k in report})
    summary["starts"] = report["starts"]
    _write_json(out / SUMMARY_FILE, summary)
    return summary


# --------------------------------------------------------------------------
# oracle gate


def cmd_oracle_check(
    config: ExperimentConfig, kernel_paths: Sequence | None = None, model_path=None
) -> dict:
    """Cross-module consistency checks at small scale.

    When ``kernel_paths`` and ``model_path`` are given, the least-squares check
    compares those kernel files with the model's analytic kernels instead of
    estimating fresh ones.
    """
    rng_seq = stage_seed(config.seed, STAGE_ORACLE)
    model = sample_random_model(2, 2, 2, (2, 3), rng_seq)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(STAGE_ORACLE, 1)))
    checks = []

    def record(name, observed, tol):
        observed = float(observed)
        checks.append({
            "name": name,
            "tolerance": tol,
            "observed": observed,
            "passed": bool(math.isfinite(observed) and observed < tol),
        })

    # simulation against the Volterra series of the analytic kernels
    u = rng.normal(0.0, 0.7, size=500)
    kernels = analytic_kernels(model, (2, 3))
    y = simulate(model, u)
    yv = volterra_predict(kernels, u)
    k0 = model.memory + 1
    record("simulate_vs_volterra", np.max(np.abs(y[k0:] - yv[k0:])) / np.max(np.abs(y[k0:])), 1e-10)

    # least-squares kernels against analytic kernels
    try:
        if kernel_paths:
            ref_model = load_model(model_path) if model_path else model
            est = _load_kernels(kernel_paths)
            truth_k = analytic_kernels(ref_model, sorted(est))
        else:
            u_ls = rng.normal(0.0, 0.7, size=3000)
            est = estimate_kernels(build_regression(u_ls, simulate(model, u_ls), model.memory, (2, 3)))
            truth_k = kernels
        err = max(
            np.linalg.norm(est[d] - truth_k[d]) / np.linalg.norm(truth_k[d]) for d in truth_k
        )
    except (PwhidError, ValueError, OSError):
        err = math.inf
    record("analytic_vs_ls", err, 1e-8)

    # gradient against central differences
    v = dec.random_init(2, 2, 2, (2, 3), rng)
    noisy = {d: H + 0.01 * rng.standard_normal(H.shape) for d, H in kernels.items()}
    noisy = {d: symmetrize(H) for d, H in noisy.items()}
    g = dec.joint_gradient(v, noisy)
    x = v.to_vector()
    h = 1e-6
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        plus = dec.DecisionVariables.from_vector(x + e, 2, 2, 2, (2, 3))
        minus = dec.DecisionVariables.from_vector(x - e, 2, 2, 2, (2, 3))
        fd[i] = (dec.joint_cost(plus, noisy) - dec.joint_cost(minus, noisy)) / (2 * h)
    mask = np.abs(g) > 1e-8
    record("gradient_vs_fd", np.max(np.abs(fd - g)[mask] / np.abs(g[mask])), 1e-6)

    # the true parameters are a zero of the cost
    record("cost_zero_at_truth", dec.joint_cost(dec.parameterize(model), kernels), 1e-18)

    return {"seed": config.seed, "passed": all(c["passed"] for c in checks), "checks": checks}

