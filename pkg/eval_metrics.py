"""
Error indices (MAE, RMSE, absolute cosine) and the drivers that build each
example signal, run the requested methods on it and score them against the
closed-form ground truth.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from baselines import IFConfig, csa_average, if_decompose, if_extract_imf
from rrcnn_core import ModelParams, cascade_forward
from signal_lab import DEFAULT_N, Signal, add_gaussian_noise, sample_function

logger = logging.getLogger(__name__)

METHODS = ("rrcnn", "if", "csa")


class MissingModelError(LookupError):
    pass


class MetricError(ValueError):
    pass


def _values(x) -> np.ndarray:
    return x.samples if isinstance(x, Signal) else np.asarray(x, dtype=float)


def _pair(pred, truth) -> tuple:
    a, b = _values(pred), _values(truth)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(pred, truth) -> float:
    a, b = _pair(pred, truth)
    return float(np.mean(np.abs(a - b)))


def rmse(pred, truth) -> float:
    a, b = _pair(pred, truth)
    return float(np.sqrt(np.mean(np.square(a - b))))


def rho(c1, c2) -> float:
    """|<c1, c2>| / (|c1| |c2|)."""
    a, b = _pair(c1, c2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("rho is undefined for a zero-norm component")
    return float(min(abs(np.dot(a, b)) / (na * nb), 1.0))


@dataclass(frozen=True)
class MetricReport:
    example: str
    method: str
    component: str
    mae: float
    rmse: float
    rho: float | None = None

    def __post_init__(self):
        if not 0 <= self.mae <= self.rmse * (1 + 1e-12) + 1e-300:
            raise MetricError(f"{self.method}/{self.component}: MAE {self.mae} exceeds RMSE {self.rmse}")


@dataclass(frozen=True)
class Example:
    """A test signal. For average examples `components` holds the single
    clean mono-component and the truth is the clean input minus it, so
    added noise never counts as local average; for
    decomposition examples it holds c1, c2 in extraction order."""

    kind: str
    t1: float
    components: tuple
    table: str
    snr_db: float | None = None
    noise_seed: int | None = None


def _am_fm(t):
    return 2 * t + np.cos(2 * t ** 2)


EXAMPLES = {
    "E1": Example("average", 3.0, (lambda t: (3 + 2 * np.cos(2 * t)) * np.cos(2 * t ** 2),), "T2"),
    "E2": Example("average", 3.0, (lambda t: _am_fm(t) * np.cos(12 * t + t ** 2 + 2 * np.cos(t)),), "T2"),
    "E3": Example("average", 3.0, (lambda t: (3 + 2 * np.cos(3 * t)) * np.cos(5 * t ** 2),), "T2"),
    "E4": Example("average", 3.0, (lambda t: _am_fm(t) * np.cos(20 * t + t ** 2 + 2 * np.cos(t)),), "T6",
                  snr_db=15.0, noise_seed=4004),
    "E5": Example("average", 3.0, (lambda t: (3 + 2 * np.cos(3 * t)) * np.cos(5 * t ** 2),), "T6",
                  snr_db=15.0, noise_seed=5005),
    "E6": Example("decompose", 6.0, (lambda t: np.cos(6.8 * np.pi * t), lambda t: np.cos(5 * np.pi * t)), "T8"),
    "E7": Example("decompose", 6.0, (lambda t: np.sin(8 * np.pi * t + 2 * t ** 2 + np.cos(t)),
                                     lambda t: np.cos(5 * np.pi * t)), "T10",
                  snr_db=15.0, noise_seed=7007),
    "E8": Example("decompose", 2 * np.pi, (lambda t: np.sin(9 * t), lambda t: np.cos(7 * t)), "T12"),
}


def build_example(example_id: str, n: int = DEFAULT_N) -> tuple:
    """Returns (input signal, truth stack of shape (C, N), component names)."""
    if example_id not in EXAMPLES:
        raise MetricError(f"unknown example {example_id!r}, expected one of {sorted(EXAMPLES)}")
    ex = EXAMPLES[example_id]
    parts = [sample_function(expr, 0.0, ex.t1, n) for expr in ex.components]
    clean = parts[0].with_samples(np.sum([p.samples for p in parts], axis=0))
    x = clean if ex.snr_db is None else add_gaussian_noise(clean, ex.snr_db, ex.noise_seed)
    if ex.kind == "average":
        return x, (clean.samples - parts[0].samples)[None, :], ["average"]
    return x, np.stack([p.samples for p in parts]), [f"c{i + 1}" for i in range(len(parts))]


def _predict(example_id: str, method: str, x: Signal, n_parts: int, models, if_cfg: IFConfig) -> np.ndarray:
    kind = EXAMPLES[example_id].kind
    if method == "rrcnn":
        if "rrcnn" not in models or models["rrcnn"] is None:
            raise MissingModelError(f"{example_id}: no trained RRCNN model supplied")
        model: ModelParams = models["rrcnn"]
        imfs = cascade_forward(x, model).imfs
        if kind == "average":
            return (x.samples - imfs[0])[None, :]
        if imfs.shape[0] < n_parts:
            raise MissingModelError(f"{example_id}: model yields {imfs.shape[0]} components, need {n_parts}")
        return imfs[:n_parts]
    if method == "if":
        if kind == "average":
            imf, _ = if_extract_imf(x, if_cfg)
            return (x.samples - imf.samples)[None, :]
        stack = if_decompose(x, if_cfg).imf_stack
        out = np.zeros((n_parts, x.n))
        out[:min(n_parts, stack.shape[0])] = stack[:n_parts]
        return out
    if method == "csa":
        if kind != "average":
            raise MetricError(f"{example_id}: CSA computes a local average, not a decomposition")
        return csa_average(x).samples[None, :]
    raise MetricError(f"unknown method {method!r}, expected one of {METHODS}")


def run_example(example_id: str, methods, models=None, n: int = DEFAULT_N,
                if_cfg: IFConfig = IFConfig(), out_dir=None) -> list:
    """Score each method on one example. With `out_dir`, also writes
    metrics_<id>.csv and plot_<id>.csv there."""
    models = models or {}
    x, truth, names = build_example(example_id, n)
    reports, predictions = [], {}
    for method in methods:
        pred = _predict(example_id, method, x, truth.shape[0], models, if_cfg)
        predictions[method] = pred
        pair_rho = None
        if pred.shape[0] == 2 and np.all(np.linalg.norm(pred, axis=1) > 0):
            pair_rho = rho(pred[0], pred[1])
        for c, name in enumerate(names):
            reports.append(MetricReport(example_id, method, name, mae(pred[c], truth[c]),
                                        rmse(pred[c], truth[c]), pair_rho))
        logger.info("%s %s: MAE %s", example_id, method, ", ".join(f"{r.mae:.4f}" for r in reports[-len(names):]))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / f"metrics_{example_id}.csv", reports)
        write_plot_data(out / f"plot_{example_id}.csv", x.t, truth, names, predictions)
    return reports


def _fmt(value) -> str:
    return "" if value is None else format(float(value), ".17g")


def write_metrics_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example", "method", "component", "mae", "rmse", "rho"])
        for r in reports:
            writer.writerow([r.example, r.method, r.component, _fmt(r.mae), _fmt(r.rmse), _fmt(r.rho)])


def write_plot_data(path, t, truth, names, predictions) -> None:
    """Columns t, truth_<component>, then <method>_<component> per method."""
    header = ["t"] + [f"truth_{name}" for name in names]
    columns = [np.asarray(t)] + list(truth)
    for method, pred in predictions.items():
        header += [f"{method}_{name}" for name in names]
        columns += list(pred)
    np.savetxt(path, np.column_stack(columns), delimiter=",", fmt="%.17g",
               header=",".join(header), comments="")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    for row in run_example("E1", ["csa", "if"]):
        print(f"{row.example} {row.method:5s} {row.component}: MAE {row.mae:.4f} RMSE {row.rmse:.4f}")
