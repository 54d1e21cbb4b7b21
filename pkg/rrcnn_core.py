"""
Forward model of the recurrent residual convolution network.

One block refines its input S times,

    X_C1 = tanh(conv(X_i, w1_i))
    X_C2 = conv(X_C1, softmax(w2_raw_i))
    X_{i+1} = X_i - X_C2

and returns X_S as the IMF (the input minus it is the local average).
M blocks cascade on the running remainder, and an optional orthogonal
matrix maps selected IMFs after the cascade. Every function here accepts a
single signal of shape (N,) or a stack of shape (..., N).
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from baselines import DecompositionResult
from signal_lab import Signal

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = "RRCNN-WEIGHTS 1"
HEADER_END = b"end\n"
DEFAULT_K = 33
DEFAULT_S = 3


class ShapeError(ValueError):
    """Filter, matrix or signal dimensions do not fit together."""


class WeightsFormatError(ValueError):
    pass


def _check_filter(w, name: str) -> np.ndarray:
    w = np.array(w, dtype=float)
    if w.ndim != 1 or w.size < 3 or w.size % 2 == 0:
        raise ShapeError(f"{name}: filter length must be odd and >= 3, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ShapeError(f"{name}: non-finite tap")
    return w


@dataclass(eq=False)
class RecursionParams:
    """Filter pair of one recursion; w2 enters the forward pass as softmax(w2_raw)."""

    w1: np.ndarray
    w2_raw: np.ndarray

    def __post_init__(self):
        self.w1 = _check_filter(self.w1, "w1")
        self.w2_raw = _check_filter(self.w2_raw, "w2_raw")


@dataclass(eq=False)
class BlockParams:
    recursions: list

    def __post_init__(self):
        if not self.recursions:
            raise ShapeError("a block needs at least one recursion")

    @property
    def depth(self) -> int:
        return len(self.recursions)


@dataclass(eq=False)
class ModelParams:
    """Blocks plus an optional orthogonal matrix applied to the IMFs listed
    in `ortho_indices` (0-based)."""

    blocks: list
    ortho: np.ndarray | None = None
    ortho_indices: tuple = ()

    def __post_init__(self):
        if not self.blocks:
            raise ShapeError("a model needs at least one block")
        self.ortho_indices = tuple(sorted(set(int(i) for i in self.ortho_indices)))
        if self.ortho is not None:
            self.ortho = np.array(self.ortho, dtype=float)
            if self.ortho.ndim != 2 or self.ortho.shape[0] != self.ortho.shape[1]:
                raise ShapeError(f"ortho must be square, got {self.ortho.shape}")
        for i in self.ortho_indices:
            if not 0 <= i < len(self.blocks):
                raise ShapeError(f"ortho index {i} outside [0, {len(self.blocks)})")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def ortho_n(self) -> int:
        return 0 if self.ortho is None else self.ortho.shape[0]

    def named_arrays(self):
        """(name, array) pairs in declaration order; the arrays are live views."""
        for m, block in enumerate(self.blocks):
            for i, rec in enumerate(block.recursions):
                yield f"block{m}.rec{i}.w1", rec.w1
                yield f"block{m}.rec{i}.w2_raw", rec.w2_raw
        if self.ortho is not None:
            yield "ortho", self.ortho

    def copy(self) -> "ModelParams":
        blocks = [BlockParams([RecursionParams(r.w1.copy(), r.w2_raw.copy()) for r in b.recursions])
                  for b in self.blocks]
        ortho = None if self.ortho is None else self.ortho.copy()
        return ModelParams(blocks, ortho, self.ortho_indices)


@dataclass(frozen=True)
class Architecture:
    """Model shape. Scalars broadcast to every block."""

    blocks: int = 1
    recursions: tuple = (DEFAULT_S,)
    k1: tuple = (DEFAULT_K,)
    k2: tuple = (DEFAULT_K,)

    def __post_init__(self):
        if self.blocks < 1:
            raise ShapeError(f"blocks must be >= 1, got {self.blocks}")
        for name in ("recursions", "k1", "k2"):
            value = getattr(self, name)
            values = (value,) * self.blocks if np.isscalar(value) else tuple(value)
            if len(values) == 1:
                values = values * self.blocks
            if len(values) != self.blocks:
                raise ShapeError(f"{name} lists {len(values)} values for {self.blocks} blocks")
            object.__setattr__(self, name, tuple(int(v) for v in values))
        if min(self.recursions) < 1:
            raise ShapeError("every block needs at least one recursion")
        for k in self.k1 + self.k2:
            if k < 3 or k % 2 == 0:
                raise ShapeError(f"filter length must be odd and >= 3, got {k}")


def init_params(arch: Architecture, seed: int, n: int | None = None,
                ortho_indices=()) -> ModelParams:
    """w1 ~ U[-1/K1, 1/K1], w2_raw = 0 (uniform moving average), ortho = I."""
    rng = np.random.default_rng(seed)
    blocks = []
    for m in range(arch.blocks):
        k1, k2 = arch.k1[m], arch.k2[m]
        blocks.append(BlockParams([
            RecursionParams(rng.uniform(-1.0 / k1, 1.0 / k1, k1), np.zeros(k2))
            for _ in range(arch.recursions[m])]))
    ortho = None
    if ortho_indices:
        if n is None:
            raise ShapeError("an orthogonal matrix needs the signal length N")
        ortho = np.eye(n)
    return ModelParams(blocks, ortho, tuple(ortho_indices))


def architecture_of(params: ModelParams) -> Architecture:
    return Architecture(
        blocks=params.n_blocks,
        recursions=tuple(b.depth for b in params.blocks),
        k1=tuple(b.recursions[0].w1.size for b in params.blocks),
        k2=tuple(b.recursions[0].w2_raw.size for b in params.blocks))


# -- primitives ----------------------------------------------------------------

def _windows(x: np.ndarray, k: int) -> np.ndarray:
    h = k // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(h, h)]
    return sliding_window_view(np.pad(x, pad), k, axis=-1)


def conv1d_same(x, w) -> np.ndarray:
    """y[t] = sum_i x[t - K//2 + i] * w[i], zero padded, same length as x."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.size > x.shape[-1]:
        raise ShapeError(f"filter length {w.size} exceeds signal length {x.shape[-1]}")
    return _windows(x, w.size) @ w


def conv1d_filter_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Gradient of sum(g * conv1d_same(x, w)) with respect to w, summed over batch axes."""
    windows = _windows(np.asarray(x, dtype=float), k)
    return np.asarray(g, dtype=float).reshape(-1) @ windows.reshape(-1, k)


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    e = np.exp(v - v.max())
    return e / e.sum()


# -- forward -------------------------------------------------------------------

@dataclass(eq=False)
class RecursionTrace:
    x: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    w2: np.ndarray


@dataclass(eq=False)
class BlockTrace:
    steps: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        last = self.steps[-1]
        return last.x - last.c2


def block_forward(x, p: BlockParams) -> tuple:
    """Run the S recursions of one block; returns (imf, trace)."""
    current = np.asarray(x, dtype=float)
    trace = BlockTrace()
    for rec in p.recursions:
        w2 = softmax(rec.w2_raw)
        c1 = np.tanh(conv1d_same(current, rec.w1))
        c2 = conv1d_same(c1, w2)
        trace.steps.append(RecursionTrace(current, c1, c2, w2))
        current = current - c2
    return current, trace


@dataclass(eq=False)
class CascadeResult:
    """Outputs of the cascade. `imfs` are the model's components (after the
    orthogonal map where it applies); `raw_imfs` are the block outputs that
    sum with the residue back to the input. Stacks have shape (M, ..., N)."""

    imfs: np.ndarray
    raw_imfs: np.ndarray
    residue: np.ndarray
    traces: list

    def reconstruction_error(self, x) -> float:
        return float(np.max(np.abs(self.raw_imfs.sum(axis=0) + self.residue - np.asarray(x))))


def cascade_forward(x, p: ModelParams) -> CascadeResult:
    signal = x.samples if isinstance(x, Signal) else np.asarray(x, dtype=float)
    n = signal.shape[-1]
    if p.ortho is not None and p.ortho.shape != (n, n):
        raise ShapeError(f"ortho matrix is {p.ortho.shape}, signal length is {n}")
    remainder = signal
    raw, traces = [], []
    for block in p.blocks:
        imf, trace = block_forward(remainder, block)
        raw.append(imf)
        traces.append(trace)
        remainder = remainder - imf
    raw = np.stack(raw)
    imfs = raw.copy()
    if p.ortho is not None:
        for i in p.ortho_indices:
            imfs[i] = raw[i] @ p.ortho.T
    return CascadeResult(imfs, raw, remainder, traces)


def decompose(x: Signal, p: ModelParams) -> DecompositionResult:
    result = cascade_forward(x, p)
    return DecompositionResult(tuple(x.with_samples(imf) for imf in result.imfs),
                               x.with_samples(result.residue))


def _forward_chunk(chunk: np.ndarray, p: ModelParams) -> tuple:
    result = cascade_forward(chunk, p)
    return result.imfs, result.residue


def predict_batch(signals, p: ModelParams, workers: int = 1, executor: str = "thread") -> tuple:
    """Decompose a (B, N) stack over `workers` lanes.

    Each lane forwards one contiguous chunk as a single stacked array.
    Returns (imfs of shape (B, M, N), residues of shape (B, N)).
    """
    batch = np.atleast_2d(np.asarray(signals, dtype=float))
    lanes = max(1, min(int(workers), batch.shape[0]))
    start = time.perf_counter()
    if lanes == 1:
        parts = [_forward_chunk(batch, p)]
    else:
        chunks = np.array_split(batch, lanes)
        pool_type = ProcessPoolExecutor if executor == "process" else ThreadPoolExecutor
        with pool_type(max_workers=lanes) as pool:
            parts = list(pool.map(_forward_chunk, chunks, [p] * lanes))
    imfs = np.concatenate([np.moveaxis(part[0], 0, 1) for part in parts])
    residues = np.concatenate([part[1] for part in parts])
    logger.debug("predicted %d signals on %d %s lane(s) in %.4fs",
                 batch.shape[0], lanes, executor, time.perf_counter() - start)
    return imfs, residues


# -- persistence ---------------------------------------------------------------

def save_weights(path, p: ModelParams) -> None:
    """Text header closed by an `end` line, then '<f8' arrays in declaration order."""
    arch = architecture_of(p)
    for m, block in enumerate(p.blocks):
        for rec in block.recursions:
            if rec.w1.size != arch.k1[m] or rec.w2_raw.size != arch.k2[m]:
                raise ShapeError(f"block {m} mixes filter lengths across recursions")
    header = [
        WEIGHTS_MAGIC,
        f"blocks = {arch.blocks}",
        "recursions = " + ",".join(map(str, arch.recursions)),
        "k1 = " + ",".join(map(str, arch.k1)),
        "k2 = " + ",".join(map(str, arch.k2)),
        f"ortho = {p.ortho_n}",
        "ortho_indices = " + ",".join(map(str, p.ortho_indices)),
        "# filters are independent of N; the ortho matrix, when present, is N x N",
    ]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in p.named_arrays())
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + HEADER_END + payload)


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def load_weights(path) -> ModelParams:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n" + HEADER_END)
    if not raw.startswith(WEIGHTS_MAGIC.encode("ascii")) or cut < 0:
        raise WeightsFormatError(f"{path}: not an RRCNN weights file")
    meta = {}
    for line in raw[:cut].decode("ascii").splitlines()[1:]:
        if line.startswith("#") or "=" not in line:
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        meta[key] = value
    try:
        arch = Architecture(int(meta["blocks"]), _int_list(meta["recursions"]),
                            _int_list(meta["k1"]), _int_list(meta["k2"]))
        n_ortho = int(meta["ortho"])
        indices = _int_list(meta.get("ortho_indices", ""))
    except (KeyError, ValueError) as exc:
        raise WeightsFormatError(f"{path}: bad header ({exc})") from None
    data = np.frombuffer(raw[cut + 1 + len(HEADER_END):], dtype="<f8")
    expected = sum(r * (a + b) for r, a, b in zip(arch.recursions, arch.k1, arch.k2)) + n_ortho ** 2
    if data.size != expected:
        raise WeightsFormatError(f"{path}: expected {expected} values, found {data.size}")
    offset = 0

    def take(count):
        nonlocal offset
        chunk = data[offset:offset + count].astype(float)
        offset += count
        return chunk

    blocks = [BlockParams([RecursionParams(take(arch.k1[m]), take(arch.k2[m]))
                           for _ in range(arch.recursions[m])]) for m in range(arch.blocks)]
    ortho = take(n_ortho ** 2).reshape(n_ortho, n_ortho) if n_ortho else None
    return ModelParams(blocks, ortho, indices)


def export_filters_csv(path, p: ModelParams) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "recursion", "layer", "tap", "value"])
        for m, block in enumerate(p.blocks):
            for i, rec in enumerate(block.recursions):
                for layer, taps in (("w1", rec.w1), ("w2_raw", rec.w2_raw), ("w2", softmax(rec.w2_raw))):
                    for tap, value in enumerate(taps):
                        writer.writerow([m, i, layer, tap, format(float(value), ".17g")])


if __name__ == "__main__":
    params = init_params(Architecture(blocks=2), seed=0)
    t = np.linspace(0, 6, 1024)
    x = np.cos(5 * np.pi * t) + np.cos(6.8 * np.pi * t)
    start = time.perf_counter()
    out = cascade_forward(x, params)
    print(f"cascade M=2: {1e3 * (time.perf_counter() - start):.2f} ms, "
          f"reconstruction error {out.reconstruction_error(x):.2e}")
