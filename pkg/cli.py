"""
Command-line front end: gen, train, decompose, eval, gradcheck and bench.

Settings resolve as: built-in default < [verb] section of --config <
RRCNN_SEED (seed only) < explicit flag. Every command records what it ran
with in resolved_config.txt next to its outputs.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from baselines import IFConfig, csa_average, if_decompose
from eval_metrics import METHODS, MissingModelError, build_example, run_example
from rrcnn_core import (Architecture, ModelParams, ShapeError, architecture_of, cascade_forward,
                        export_filters_csv, init_params, load_weights, predict_batch)
from rrcnn_train import (DivergenceError, LossError, LossKind, LossSpec, TrainConfig, Trainer,
                         TrainingHistory, grad_check, load_checkpoint, params_to_flat, save_checkpoint)
from signal_lab import TABLES, Signal, build_table_dataset, load_dataset, read_keyvalue, save_dataset, write_keyvalue

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED, EXIT_SHAPE = 0, 1, 2, 3, 4
SEED_ENV = "RRCNN_SEED"
RESOLVED_NAME = "resolved_config.txt"
MAX_GRADCHECK_N = 256
PASS_THRESHOLD = 1e-5


class UsageError(ValueError):
    pass


def _bool(text) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    return tuple(int(v) for v in str(text).replace(" ", ",").split(",") if v)


def _choice(*allowed, optional: bool = False) -> Callable:
    """Parser accepting one of `allowed`; an optional choice also accepts ""."""

    def parse(text):
        if optional and text == "":
            return text
        if text not in allowed:
            raise ValueError(f"{text!r} is not one of {', '.join(allowed)}")
        return text
    return parse


REQUIRED = object()


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable
    default: object
    help: str = ""


_ARCH = [
    Option("blocks", int, 1, "number of cascaded blocks M"),
    Option("recursions", _ints, "3", "recursions per block, one value or one per block"),
    Option("k1", _ints, "33", "first-layer filter length(s)"),
    Option("k2", _ints, "33", "second-layer filter length(s)"),
]
_LOSS = [
    Option("loss", _choice(*(k.value for k in LossKind)), "mse"),
    Option("eta", float, 0.0, "QTV weight"),
    Option("gamma", float, 0.0, "orthogonality penalty weight"),
    Option("omega1", _ints, "", "1-based smooth components, e.g. 1,2"),
    Option("omega2", str, "", "1-based orthogonal pairs, e.g. 1:2"),
]

OPTIONS = {
    "gen": [
        Option("table", _choice(*TABLES), REQUIRED),
        Option("n", int, 1024),
        Option("seed", int, 0),
        Option("ratio", float, 0.7),
        Option("workers", int, 1),
        Option("out_dir", str, REQUIRED),
    ],
    "train": [
        Option("dataset", str, REQUIRED, "directory written by gen"),
        Option("model", str, REQUIRED, "output weights path"),
        *_ARCH, *_LOSS,
        Option("lr", float, 1e-3),
        Option("lr_ortho", float, 1e-3),
        Option("epochs", int, 400),
        Option("batch", int, 16),
        Option("seed", int, 0),
        Option("lr_halving", _bool, True),
        Option("tol", float, 1e-7),
        Option("patience", int, 20),
        Option("reduction", _choice("sequential", "pairwise", "batched"), "sequential"),
        Option("workers", int, 1),
        Option("lr_growth", float, 1.1, "step multiplier after an epoch that lowers the loss"),
        Option("optimizer", _choice("sgd", "adam"), "sgd"),
        Option("resume", str, "", "checkpoint to continue from"),
    ],
    "decompose": [
        Option("input", str, REQUIRED, "CSV with one value column or t,value"),
        Option("out_dir", str, REQUIRED),
        Option("model", str, ""),
        Option("method", _choice("rrcnn", "if", "csa", optional=True), "", "defaults to rrcnn with --model, else if"),
    ],
    "eval": [
        Option("example", _choice(*(f"E{i}" for i in range(1, 9))), REQUIRED),
        Option("methods", str, "if,csa", "comma separated subset of rrcnn,if,csa"),
        Option("model", str, ""),
        Option("n", int, 1024),
        Option("out_dir", str, REQUIRED),
    ],
    "gradcheck": [
        Option("n", int, 64),
        Option("blocks", int, 2),
        Option("recursions", _ints, "2"),
        Option("k1", _ints, "5"),
        Option("k2", _ints, "5"),
        *_LOSS,
        Option("eps", float, 1e-6),
        Option("seed", int, 0),
        Option("fault", int, -1, "flat coordinate to corrupt, -1 for none"),
        Option("ortho_coords", int, 64, "sampled entries of the orthogonal matrix"),
        Option("out_dir", str, "."),
    ],
    "bench": [
        Option("model", str, ""),
        Option("copies", _ints, "1,100"),
        Option("threads", _ints, "1,4"),
        Option("executor", _choice("thread", "process"), "thread"),
        Option("n", int, 1024),
        Option("repeats", int, 3),
        Option("seed", int, 0),
        Option("out", str, "bench.csv"),
    ],
}


def resolve(command: str, args: argparse.Namespace, environ=os.environ) -> dict:
    options = {o.key: o for o in OPTIONS[command]}
    raw = {key: o.default for key, o in options.items()}
    if getattr(args, "config", None):
        sections = read_keyvalue(args.config)
        for name, entries in sections.items():
            if name and name not in OPTIONS:
                raise UsageError(f"{args.config}: unknown section [{name}]")
            if name:
                allowed = {o.key for o in OPTIONS[name]}
            else:
                allowed = {o.key for opts in OPTIONS.values() for o in opts}
            for key in entries:
                if key not in allowed:
                    raise UsageError(f"{args.config}: unknown key {key!r} in [{name or 'global'}]")
        for key, value in {**sections.get("", {}), **sections.get(command, {})}.items():
            if key in options:
                raw[key] = value
    if "seed" in options and environ.get(SEED_ENV):
        raw["seed"] = environ[SEED_ENV]
    for key in options:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    resolved = {}
    for key, option in options.items():
        if raw[key] is REQUIRED:
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
        try:
            resolved[key] = option.parse(raw[key])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{command}: bad value for {key}: {exc}") from None
    return resolved


def write_resolved(out_dir, command: str, values: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = [("command", command)]
    for key, value in values.items():
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        items.append((key, value))
    write_keyvalue(out / RESOLVED_NAME, items, header="resolved configuration")
    return out / RESOLVED_NAME


def _architecture(cfg: dict) -> Architecture:
    try:
        return Architecture(cfg["blocks"], cfg["recursions"], cfg["k1"], cfg["k2"])
    except ShapeError as exc:
        raise UsageError(str(exc)) from None


def _loss_spec(cfg: dict) -> LossSpec:
    try:
        pairs = tuple(tuple(int(v) - 1 for v in pair.split(":")) for pair in cfg["omega2"].split(",") if pair)
        return LossSpec(LossKind(cfg["loss"]), cfg["eta"], cfg["gamma"],
                        tuple(i - 1 for i in cfg["omega1"]), pairs)
    except (LossError, ValueError) as exc:
        raise UsageError(f"loss settings: {exc}") from None


# -- commands ------------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    dataset = build_table_dataset(cfg["table"], cfg["n"], cfg["seed"], cfg["ratio"], cfg["workers"])
    out = save_dataset(dataset, cfg["out_dir"], table_id=cfg["table"], seed=cfg["seed"])
    write_resolved(out, "gen", cfg)
    print(f"{cfg['table']}: {len(dataset)} records ({len(dataset.train)} train) -> {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    try:
        train_cfg = TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})
    except LossError as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(cfg["dataset"])
    model_path = Path(cfg["model"])
    model_path.parent.mkdir(parents=True, exist_ok=True)
    history_path = model_path.with_name(model_path.name + ".history.csv")

    if cfg["resume"]:
        params, spec, start_epoch, lr = load_checkpoint(cfg["resume"])
        trainer = Trainer(architecture_of(params), spec, train_cfg)
        trainer.lr = lr
        previous = Path(cfg["resume"] + ".history.csv")
        if previous.exists():
            trainer.history = TrainingHistory.from_csv(previous)
        logger.info("resuming from %s at epoch %d", cfg["resume"], start_epoch)
    else:
        params, spec, start_epoch = None, _loss_spec(cfg), 0
        trainer = Trainer(_architecture(cfg), spec, train_cfg)

    best, history = trainer.fit(dataset, params, start_epoch)
    save_checkpoint(model_path, best, spec, train_cfg, history.epoch[-1], trainer.lr)
    history.to_csv(history_path)
    export_filters_csv(model_path.with_name(model_path.name + ".filters.csv"), best)
    write_resolved(model_path.parent, "train", cfg)
    print(f"trained {history.epoch[-1] - start_epoch} epoch(s); best validation loss "
          f"{min(history.val_loss):.6g}; weights -> {model_path}")
    return EXIT_OK


def read_signal_csv(path) -> Signal:
    table = np.genfromtxt(path, delimiter=",", ndmin=2)
    table = table[~np.all(np.isnan(table), axis=1)]
    if table.size == 0 or np.isnan(table).any():
        raise UsageError(f"{path}: expected numeric columns (value) or (t, value)")
    if table.shape[1] == 1:
        return Signal(table[:, 0])
    t = table[:, 0]
    dt = (t[-1] - t[0]) / (t.size - 1)
    return Signal(table[:, 1], t[0], dt)


def cmd_decompose(cfg: dict) -> int:
    x = read_signal_csv(cfg["input"])
    method = cfg["method"] or ("rrcnn" if cfg["model"] else "if")
    if method == "rrcnn":
        if not cfg["model"]:
            raise MissingModelError("decompose --method rrcnn needs --model")
        result = cascade_forward(x, load_weights(cfg["model"]))
        imfs, residue = result.imfs, result.residue
        error = result.reconstruction_error(x.samples)
    elif method == "if":
        decomposition = if_decompose(x, IFConfig())
        imfs, residue = decomposition.imf_stack, decomposition.residue.samples
        error = float(np.max(np.abs(decomposition.reconstruct() - x.samples)))
    else:
        average = csa_average(x).samples
        imfs, residue = (x.samples - average)[None, :], average
        error = float(np.max(np.abs(imfs[0] + residue - x.samples)))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    header = ["t"] + [f"imf_{m + 1}" for m in range(len(imfs))] + ["residue"]
    np.savetxt(out / "components.csv", np.column_stack([x.t, *imfs, residue]), delimiter=",",
               fmt="%.17g", header=",".join(header), comments="")
    write_resolved(out, "decompose", cfg)
    print(f"{method}: {len(imfs)} component(s); reconstruction max error {error:.3e}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    methods = [m for m in cfg["methods"].split(",") if m]
    unknown = set(methods) - set(METHODS)
    if unknown or not methods:
        raise UsageError(f"methods must be drawn from {METHODS}, got {cfg['methods']!r}")
    models = {"rrcnn": load_weights(cfg["model"])} if cfg["model"] else {}
    reports = run_example(cfg["example"], methods, models, n=cfg["n"], out_dir=cfg["out_dir"])
    write_resolved(cfg["out_dir"], "eval", cfg)
    for r in reports:
        rho = "" if r.rho is None else f"  rho {r.rho:.4f}"
        print(f"{r.example} {r.method:6s} {r.component:8s} MAE {r.mae:.4f}  RMSE {r.rmse:.4f}{rho}")
    return EXIT_OK


def gradcheck_problem(cfg: dict) -> tuple:
    """Random signal, labels and a non-trivial parameter point for the oracle."""
    arch, spec = _architecture(cfg), _loss_spec(cfg)
    n = cfg["n"]
    rng = np.random.default_rng(cfg["seed"])
    constrained = spec.kind is LossKind.ORTHO_CONSTRAINED
    params = init_params(arch, cfg["seed"], n=n, ortho_indices=spec.ortho_indices if constrained else ())
    for block in params.blocks:
        for rec in block.recursions:
            rec.w1[:] = rng.normal(0.0, 0.5, rec.w1.size)
            rec.w2_raw[:] = rng.normal(0.0, 0.5, rec.w2_raw.size)
    if constrained:
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        params = ModelParams(params.blocks, q, params.ortho_indices)
    x = rng.normal(size=n)
    label = rng.normal(size=(arch.blocks, n))
    return params, x, label, spec, rng


def cmd_gradcheck(cfg: dict) -> int:
    if not 8 <= cfg["n"] <= MAX_GRADCHECK_N:
        raise UsageError(f"gradcheck needs 8 <= N <= {MAX_GRADCHECK_N}, got {cfg['n']}")
    if not 1e-8 <= cfg["eps"] <= 1e-4:
        raise UsageError(f"eps must lie in [1e-8, 1e-4], got {cfg['eps']}")
    params, x, label, spec, rng = gradcheck_problem(cfg)
    total = params_to_flat(params).size
    n_filters = total - params.ortho_n ** 2
    coords = np.arange(n_filters)
    if params.ortho is not None:
        picked = rng.choice(params.ortho_n ** 2, size=min(cfg["ortho_coords"], params.ortho_n ** 2), replace=False)
        coords = np.concatenate([coords, n_filters + np.sort(picked)])
    fault = cfg["fault"] if cfg["fault"] >= 0 else None
    if fault is not None:
        if fault >= total:
            raise UsageError(f"fault index {fault} outside [0, {total})")
        if fault not in coords:
            coords = np.sort(np.append(coords, fault))
    report = grad_check(params, x, label, spec, cfg["eps"], coordinates=coords, fault=fault)
    write_resolved(cfg["out_dir"], "gradcheck", cfg)
    status = "PASS" if report.passed(PASS_THRESHOLD) else "FAIL"
    print(f"{status}: max deviation {report.max_deviation:.3e} at {report.worst_coordinate} "
          f"over {len(report.names)} coordinates")
    return EXIT_OK if report.passed(PASS_THRESHOLD) else EXIT_ERROR


def cmd_bench(cfg: dict) -> int:
    if min(cfg["copies"], default=0) < 1 or min(cfg["threads"], default=0) < 1:
        raise UsageError("copies and threads must be at least 1")
    if cfg["repeats"] < 1:
        raise UsageError("repeats must be at least 1")
    params = load_weights(cfg["model"]) if cfg["model"] else init_params(Architecture(blocks=2), cfg["seed"])
    x, _, _ = build_example("E4", cfg["n"])
    rows = []
    predict_batch(x.samples, params)
    for copies in cfg["copies"]:
        batch = np.tile(x.samples, (copies, 1))
        for threads in cfg["threads"]:
            timings = []
            for _ in range(cfg["repeats"]):
                start = time.perf_counter()
                predict_batch(batch, params, workers=threads, executor=cfg["executor"])
                timings.append(time.perf_counter() - start)
            rows.append((copies, threads, min(timings)))
            print(f"copies={copies:5d} threads={threads:3d} seconds={rows[-1][2]:.6f}")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("copies,threads,seconds\n" + "".join(f"{c},{t},{s:.17g}\n" for c, t, s in rows))
    write_resolved(out.parent, "bench", cfg)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "decompose": cmd_decompose,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrcnn", description="Signal decomposition experiments",
                                     allow_abbrev=False)
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in OPTIONS.items():
        cmd = sub.add_parser(name, allow_abbrev=False, help=COMMANDS[name].__name__.replace("cmd_", ""))
        cmd.add_argument("--config", help="key = value file with a [%s] section" % name)
        for option in options:
            cmd.add_argument("--" + option.key.replace("_", "-"), dest=option.key, default=None,
                             help=option.help or None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ShapeError, MissingModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
