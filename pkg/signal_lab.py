"""
Signal representation, synthetic signal families, SNR-controlled noise and
dataset assembly for the local-average / decomposition experiments.

Every table dataset is a deterministic function of (table id, N, seed): the
parameter grid is enumerated in a fixed order, noise is drawn from a
per-record seed derived from the master seed, and the train/validation
split is a seeded permutation.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TRAIN = "train"
VALIDATION = "validation"
DEFAULT_N = 1024
DEFAULT_RATIO = 0.7
MANIFEST_NAME = "manifest.txt"

Expr = Callable[[np.ndarray], np.ndarray]


class GenerationError(ValueError):
    """A closed-form signal could not be sampled or perturbed."""


class DatasetError(ValueError):
    """Malformed sample set, split request or dataset directory."""


@dataclass(frozen=True, eq=False)
class Signal:
    """Uniformly sampled real series on the grid t0 + k*dt, k = 0..N-1."""

    samples: np.ndarray
    t0: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        if samples.ndim != 1 or samples.size < 2:
            raise GenerationError(f"a signal needs at least 2 samples, got shape {samples.shape}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise GenerationError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(samples)):
            bad = int(np.argmax(~np.isfinite(samples)))
            raise GenerationError(f"non-finite sample at index {bad}")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n(self) -> int:
        return self.samples.size

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(self.n) * self.dt

    def with_samples(self, samples) -> "Signal":
        """Same grid, new values."""
        return Signal(samples, self.t0, self.dt)

    def same_grid(self, other: "Signal") -> bool:
        return self.n == other.n and self.t0 == other.t0 and self.dt == other.dt


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """One (input, true IMFs) pair of a table dataset.

    `trend` holds the known non-label part of a noiseless input (the x1
    column of additive table rows, zeros otherwise); `snr_db` is set when
    noise was injected into the input.
    """

    input: Signal
    labels: tuple
    family_id: str
    params: Mapping[str, float] = field(default_factory=dict)
    trend: np.ndarray | None = None
    snr_db: float | None = None

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels:
            raise DatasetError("a record needs at least one label")
        for label in labels:
            if not label.same_grid(self.input):
                raise DatasetError(f"label grid differs from input grid in {self.family_id}")
        object.__setattr__(self, "labels", labels)

    @property
    def label_stack(self) -> np.ndarray:
        """Labels as an (M, N) array, one row per component."""
        return np.stack([label.samples for label in self.labels])


@dataclass(eq=False)
class SampleSet:
    records: list
    split: list

    def __post_init__(self):
        if len(self.records) != len(self.split):
            raise DatasetError(f"{len(self.records)} records but {len(self.split)} split tags")
        for tag in self.split:
            if tag not in (TRAIN, VALIDATION):
                raise DatasetError(f"unknown split tag {tag!r}")

    def __len__(self):
        return len(self.records)

    def subset(self, tag: str) -> list:
        return [r for r, s in zip(self.records, self.split) if s == tag]

    @property
    def train(self) -> list:
        return self.subset(TRAIN)

    @property
    def validation(self) -> list:
        return self.subset(VALIDATION)

    @property
    def n(self) -> int:
        """Common signal length; DatasetError when records disagree."""
        lengths = {r.input.n for r in self.records}
        if len(lengths) != 1:
            raise DatasetError(f"records have differing lengths {sorted(lengths)}")
        return lengths.pop()


def sample_function(expr: Expr, t0: float, t1: float, n: int) -> Signal:
    """Sample a closed-form signal at N points including both endpoints."""
    if not t1 > t0:
        raise GenerationError(f"empty interval [{t0}, {t1}]")
    if n < 2:
        raise GenerationError(f"N must be at least 2, got {n}")
    dt = (t1 - t0) / (n - 1)
    t = t0 + np.arange(n) * dt
    with np.errstate(all="ignore"):
        values = np.broadcast_to(np.asarray(expr(t), dtype=float), t.shape)
    bad = ~np.isfinite(values)
    if bad.any():
        raise GenerationError(f"non-finite value at t={float(t[np.argmax(bad)])!r}")
    return Signal(values, t0, dt)


def add_gaussian_noise(x: Signal, snr_db: float, seed) -> Signal:
    """Add white Gaussian noise with variance P_x / 10**(snr_db/10)."""
    power = float(np.mean(np.square(x.samples)))
    if power == 0.0:
        raise GenerationError("zero-power input, SNR is undefined")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return x.with_samples(x.samples + rng.normal(0.0, sigma, x.n))


def derive_seed(seed: int, index: int) -> int:
    """Independent, reproducible child seed for record `index`."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def split_train_val(sample_set: SampleSet, ratio: float, seed: int) -> SampleSet:
    """Tag records train/validation; the train count rounds half up."""
    n = len(sample_set.records)
    if n < 2:
        raise DatasetError(f"cannot split {n} record(s)")
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"ratio must lie in (0, 1), got {ratio}")
    n_train = min(max(math.floor(ratio * n + 0.5), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    tags = [VALIDATION] * n
    for i in order[:n_train]:
        tags[int(i)] = TRAIN
    return SampleSet(list(sample_set.records), tags)


# -- table grids ---------------------------------------------------------------

@dataclass(frozen=True)
class _Row:
    family: str
    t1: float
    params: dict
    x1: Expr
    x2: Expr
    product: bool = False
    pair: bool = False


def _zero(t):
    return np.zeros_like(t)


def _grid(family, t1, x1_makers, x2_makers, ks, ls=(None,), product=False, pair=False) -> Iterator[_Row]:
    for i1, make_x1 in enumerate(x1_makers):
        for i2, make_x2 in enumerate(x2_makers):
            for k in ks:
                for l in ls:
                    params = {"k": float(k), "x1": float(i1), "x2": float(i2)}
                    if l is not None:
                        params["l"] = float(l)
                    yield _Row(family, t1, params, make_x1(k, l), make_x2(k, l), product, pair)


def _local_average_rows() -> Iterator[_Row]:
    yield from _grid(
        "a", 3.0,
        [lambda k, l: lambda t: 0.1 * k * t, lambda k, l: _zero],
        [lambda k, l: lambda t: np.cos(3 * l * t),
         lambda k, l: lambda t: np.cos(3 * k * l * t + t + np.cos(t))],
        ks=range(2, 10), ls=(2, 4, 6, 8))
    yield from _grid(
        "b", 3.0,
        [lambda k, l: lambda t: np.full_like(t, 0.1 * k), lambda k, l: _zero],
        [lambda k, l: lambda t: np.sin(3 * k * l * t),
         lambda k, l: lambda t: np.sin(3 * k * l * t + t ** 2 + np.cos(t))],
        ks=range(1, 11), ls=range(2, 29, 2))
    yield from _grid(
        "c", 3.0,
        [lambda k, l: lambda t: 3 + 2 * np.cos(0.5 * k * t), lambda k, l: lambda t: np.ones_like(t)],
        [lambda k, l: lambda t: np.cos(0.5 * k * l * t ** 2),
         lambda k, l: lambda t: np.cos(0.5 * l * t ** 2 + l * np.cos(t))],
        ks=range(2, 7), ls=range(4, 10), product=True)


def _mode_mixing_rows() -> Iterator[_Row]:
    pi = np.pi
    yield from _grid(
        "a", 6.0,
        [lambda k, l: lambda t: np.cos(k * pi * t), lambda k, l: _zero],
        [lambda k, l: lambda t: np.cos((k + 1.5) * pi * t),
         lambda k, l: lambda t: np.cos((k + 1.5) * pi * t + t ** 2 + np.cos(t))],
        ks=range(5, 15), pair=True)
    yield from _grid(
        "b", 6.0,
        [lambda k, l: lambda t: np.cos(k * pi * t), lambda k, l: _zero],
        [lambda k, l: lambda t: np.cos(k * l * pi * t),
         lambda k, l: lambda t: np.cos(k * l * pi * t + t ** 2 + np.cos(t))],
        ks=range(5, 15), ls=range(2, 20), pair=True)


def _orthogonal_rows() -> Iterator[_Row]:
    yield from _grid(
        "a", 2 * np.pi,
        [lambda k, l: lambda t: np.cos(k * t)],
        [lambda k, l: lambda t: np.sin((k + l) * t)],
        ks=range(6, 10), ls=range(3, 34, 2), pair=True)


# table id -> (row enumerator, input SNR in dB or None for clean inputs)
TABLES = {
    "T2": (_local_average_rows, None),
    "T6": (_local_average_rows, 15.0),
    "T8": (_mode_mixing_rows, None),
    "T10": (_mode_mixing_rows, 25.0),
    "T12": (_orthogonal_rows, None),
}


def _build_record(table_id: str, row: _Row, n: int, snr_db, seed: int, index: int) -> SampleRecord:
    x1 = sample_function(row.x1, 0.0, row.t1, n)
    x2 = sample_function(row.x2, 0.0, row.t1, n)
    if row.product:
        clean = x1.samples * x2.samples
        labels = (x1.with_samples(clean),)
        trend = np.zeros(n)
    elif row.pair:
        clean = x1.samples + x2.samples
        labels = (x2, x1)
        trend = np.zeros(n)
    else:
        clean = x1.samples + x2.samples
        labels = (x2,)
        trend = np.array(x1.samples)
    signal = x1.with_samples(clean)
    if snr_db is not None:
        signal = add_gaussian_noise(signal, snr_db, derive_seed(seed, index))
    return SampleRecord(signal, labels, f"{table_id}.{row.family}", dict(row.params), trend, snr_db)


def build_table_dataset(table_id: str, n: int = DEFAULT_N, seed: int = 0,
                        ratio: float = DEFAULT_RATIO, workers: int = 1) -> SampleSet:
    """Enumerate the parameter grid of a table and split it train/validation.

    Records may be generated by a thread pool; the result order is always
    the grid enumeration order.
    """
    if table_id not in TABLES:
        raise DatasetError(f"unknown table {table_id!r}, expected one of {sorted(TABLES)}")
    if n < 64:
        raise DatasetError(f"N must be at least 64, got {n}")
    make_rows, snr_db = TABLES[table_id]
    rows = list(make_rows())

    def build(item):
        index, row = item
        return _build_record(table_id, row, n, snr_db, seed, index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, enumerate(rows)))
    else:
        records = [build(item) for item in enumerate(rows)]
    logger.info("built %s: %d records, N=%d, seed=%d", table_id, len(records), n, seed)
    return split_train_val(SampleSet(records, [TRAIN] * len(records)), ratio, seed)


# -- key=value text files --------------------------------------------------------

def format_value(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_keyvalue(path, items: Iterable[tuple], header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines += [f"{key} = {format_value(value)}" for key, value in items]
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalue(path) -> dict:
    """Parse `key = value` lines into {section: {key: value}}.

    Keys before any `[section]` header land in section "". Blank lines and
    `#` comments are skipped.
    """
    sections = {"": {}}
    current = sections[""]
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        current[key] = value
    return sections


# -- dataset export / import ---------------------------------------------------

def _record_name(index: int) -> str:
    return f"record_{index:05d}.csv"


def _format_params(params: Mapping[str, float]) -> str:
    return ",".join(f"{k}={format_value(float(v))}" for k, v in params.items())


def _parse_params(text: str) -> dict:
    if not text:
        return {}
    return {k: float(v) for k, v in (item.split("=", 1) for item in text.split(","))}


def save_dataset(sample_set: SampleSet, out_dir, table_id: str = "", seed: int | None = None) -> Path:
    """One CSV per record (t, input, label_1..label_M) plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = sample_set.records[0].input
    items = [("table_id", table_id), ("n", first.n), ("t0", first.t0), ("dt", first.dt),
             ("seed", "" if seed is None else seed), ("records", len(sample_set))]
    for i, (record, tag) in enumerate(zip(sample_set.records, sample_set.split)):
        columns = [record.input.t, record.input.samples] + [label.samples for label in record.labels]
        header = ",".join(["t", "input"] + [f"label_{m + 1}" for m in range(len(record.labels))])
        np.savetxt(out / _record_name(i), np.column_stack(columns), delimiter=",",
                   fmt="%.17g", header=header, comments="")
        items += [(f"record.{i:05d}.family", record.family_id),
                  (f"record.{i:05d}.split", tag),
                  (f"record.{i:05d}.params", _format_params(record.params))]
        if record.snr_db is not None:
            items.append((f"record.{i:05d}.snr_db", float(record.snr_db)))
    write_keyvalue(out / MANIFEST_NAME, items, header="dataset manifest")
    logger.info("wrote %d records to %s", len(sample_set), out)
    return out


def load_dataset(in_dir) -> SampleSet:
    src = Path(in_dir)
    manifest_path = src / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"no manifest in {src}")
    meta = read_keyvalue(manifest_path)[""]
    try:
        count = int(meta["records"])
        t0, dt = float(meta["t0"]), float(meta["dt"])
    except KeyError as exc:
        raise DatasetError(f"{manifest_path}: missing key {exc}") from None
    records, tags = [], []
    for i in range(count):
        path = src / _record_name(i)
        if not path.exists():
            raise DatasetError(f"missing record file {path}")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if table.shape[1] < 3:
            raise DatasetError(f"{path}: expected t, input and at least one label column")
        key = f"record.{i:05d}"
        snr = meta.get(f"{key}.snr_db")
        records.append(SampleRecord(
            Signal(table[:, 1], t0, dt),
            tuple(Signal(table[:, c], t0, dt) for c in range(2, table.shape[1])),
            meta.get(f"{key}.family", ""),
            _parse_params(meta.get(f"{key}.params", "")),
            snr_db=None if snr is None else float(snr)))
        tags.append(meta.get(f"{key}.split", TRAIN))
    return SampleSet(records, tags)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    dataset = build_table_dataset("T12", n=256, seed=0)
    print(f"T12: {len(dataset)} records, {len(dataset.train)} train / {len(dataset.validation)} validation")
    noisy = add_gaussian_noise(dataset.records[0].input, 15.0, seed=1)
    print(f"noisy first record: max |x| = {np.abs(noisy.samples).max():.4f}")
