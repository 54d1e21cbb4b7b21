"""
Classical local-average baselines: Iterative Filtering (IF) with a
triangular double-average window, and the cubic-spline envelope average
(CSA) used by EMD sifting.

Both methods read their scale from the significant extrema of the signal:
interior turning points whose prominence clears a robust noise floor, so
ripples from sampling noise neither shorten the IF filter nor pin the
spline envelopes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from signal_lab import Signal

logger = logging.getLogger(__name__)

# remainders quieter than this fraction of the input peak count as extremum-free
SILENCE_RATIO = 1e-12
MIRRORED_EXTREMA = 2
# an extremum is significant when its prominence reaches NOISE_SPREAD noise
# deviations, a threshold never above PROMINENCE_CAP of the largest prominence
NOISE_SPREAD = 6.0
PROMINENCE_CAP = 0.5
# prominence floor as a fraction of the reference peak-to-peak range
PROMINENCE_FLOOR = 0.05
# median |second difference| of unit white noise is this constant times sqrt(6)
MAD_NORMAL = 0.6744897501960817
# each IMF's filter is at least this factor longer than the previous one
MASK_GROWTH = 1.5


class BaselineError(ValueError):
    pass


class ExtremaError(BaselineError):
    """Too few extrema for the requested operation."""


@dataclass(frozen=True)
class IFConfig:
    """Iterative Filtering settings.

    The filter half-length is ``round(xi * N / count)`` where count is the
    number of significant extrema of the current iterate, clamped to
    [1, N/2]. ``xi`` defaults to 2.0 here, overriding the 1.6 usually
    quoted for this rule: with 1.6 the triangular window is shorter than
    one local period on chirps and leaves part of the oscillation in the
    average.

    ``inner_tol`` bounds ||removed average|| / ||iterate|| for the last
    inner iteration; the default is the square root of the 1e-3 energy
    ratio FIF stops at. ``floor`` is the prominence floor as a fraction of
    the input's peak-to-peak range.
    """

    xi: float = 2.0
    inner_tol: float = 10 ** -1.5
    max_inner: int = 200
    max_imfs: int = 8
    floor: float = PROMINENCE_FLOOR

    def __post_init__(self):
        if not self.xi > 0:
            raise BaselineError(f"xi must be positive, got {self.xi}")
        if not 0 < self.inner_tol < 1:
            raise BaselineError(f"inner_tol must lie in (0, 1), got {self.inner_tol}")
        if self.max_inner < 1 or self.max_imfs < 1:
            raise BaselineError("max_inner and max_imfs must be at least 1")
        if not 0 <= self.floor < 1:
            raise BaselineError(f"floor must lie in [0, 1), got {self.floor}")


@dataclass
class IFDiagnostics:
    """Per-IMF filter lengths and inner iteration counts, plus the
    significant-extrema count of every remainder an IMF was sifted from."""

    filter_lengths: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    extrema_counts: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class DecompositionResult:
    imfs: tuple
    residue: Signal
    diagnostics: IFDiagnostics | None = None

    def __post_init__(self):
        for imf in self.imfs:
            if not imf.same_grid(self.residue):
                raise BaselineError("all components must share the residue's grid")
        object.__setattr__(self, "imfs", tuple(self.imfs))

    @property
    def imf_stack(self) -> np.ndarray:
        """IMFs as an (M, N) array; (0, N) when nothing was extracted."""
        if not self.imfs:
            return np.zeros((0, self.residue.n))
        return np.stack([imf.samples for imf in self.imfs])

    def reconstruct(self) -> np.ndarray:
        return self.imf_stack.sum(axis=0) + self.residue.samples


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Signal) else np.asarray(x, dtype=float)


def find_extrema(x) -> tuple:
    """Indices of interior local maxima and minima.

    An extremum is a sign change between consecutive nonzero first
    differences; a flat run at the turn reports its midpoint (rounded down).
    Endpoints are never extrema.
    """
    v = _samples(x)
    if v.size < 3:
        raise ExtremaError(f"need at least 3 samples, got {v.size}")
    d = np.diff(v)
    nz = np.flatnonzero(d)
    if nz.size < 2:
        empty = np.zeros(0, dtype=int)
        return empty, empty
    sign = np.sign(d[nz])
    turn = np.flatnonzero(sign[:-1] != sign[1:])
    mid = (nz[turn] + 1 + nz[turn + 1]) // 2
    rising = sign[turn] > 0
    return mid[rising], mid[~rising]


def noise_level(x) -> float:
    """Robust white-noise deviation from the median absolute second difference."""
    v = _samples(x)
    return float(np.median(np.abs(np.diff(v, 2))) / (MAD_NORMAL * np.sqrt(6.0)))


def significant_extrema(x, floor: float = PROMINENCE_FLOOR, scale: float | None = None) -> tuple:
    """Extrema of x whose prominence clears the noise threshold.

    The threshold is NOISE_SPREAD robust noise deviations, capped at
    PROMINENCE_CAP of the largest prominence, and never below
    ``floor * scale``; ``scale`` defaults to the peak-to-peak range of x.
    """
    v = _samples(x)
    maxima, minima = find_extrema(v)
    if maxima.size + minima.size == 0:
        return maxima, minima
    high = signal.peak_prominences(v, maxima)[0] if maxima.size else np.zeros(0)
    low = signal.peak_prominences(-v, minima)[0] if minima.size else np.zeros(0)
    largest = max(high.max(initial=0.0), low.max(initial=0.0))
    reference = float(np.ptp(v)) if scale is None else scale
    threshold = max(min(NOISE_SPREAD * noise_level(v), PROMINENCE_CAP * largest), floor * reference)
    return maxima[high >= threshold], minima[low >= threshold]


def triangular_window(l: int) -> np.ndarray:
    """Length 2l+1 triangle: a length-(l+1) box convolved with itself, unit sum."""
    box = np.ones(l + 1)
    w = np.convolve(box, box)
    return w / w.sum()


def if_local_average(x: Signal, l: int) -> Signal:
    """Triangular-window moving average with mirror extension by l samples."""
    v = _samples(x)
    if not 1 <= l <= v.size // 2:
        raise BaselineError(f"filter half-length {l} outside [1, {v.size // 2}]")
    extended = np.pad(v, l, mode="reflect")
    average = signal.convolve(extended, triangular_window(l), mode="valid")
    return x.with_samples(average) if isinstance(x, Signal) else average


def filter_length(count: int, n: int, xi: float, shortest: int = 1) -> int:
    """round(xi * n / count), raised to `shortest` and clamped to [1, n/2]."""
    if count < 1:
        raise ExtremaError("filter length needs at least one extremum")
    return int(min(max(round(xi * n / count), shortest, 1), n // 2))


class IterativeFilter:
    """Iterative Filtering driven by one IFConfig."""

    def __init__(self, cfg: IFConfig = IFConfig()):
        self.cfg = cfg

    def count(self, v: np.ndarray, scale: float | None = None) -> int:
        maxima, minima = significant_extrema(v, self.cfg.floor, scale)
        return maxima.size + minima.size

    def sift(self, v: np.ndarray, count: int, scale: float | None = None, shortest: int = 1) -> tuple:
        """Subtract moving averages from v until they become negligible.

        The filter length follows the significant extrema of each iterate
        and keeps its last value once fewer than two remain. Returns
        (imf samples, iterations, final filter length).
        """
        cfg = self.cfg
        l = filter_length(count, v.size, cfg.xi, shortest)
        current = v
        for iteration in range(1, cfg.max_inner + 1):
            if iteration > 1:
                found = self.count(current, scale)
                if found >= 2:
                    l = filter_length(found, v.size, cfg.xi, shortest)
            average = if_local_average(current, l)
            size = np.linalg.norm(current)
            current = current - average
            ratio = np.linalg.norm(average) / size if size > 0 else 0.0
            if ratio < cfg.inner_tol:
                break
        logger.debug("IF sift: l=%d, %d iterations, last ratio %.3g", l, iteration, ratio)
        return current, iteration, l

    def extract(self, x: Signal) -> tuple:
        """Sift one IMF out of x; returns (imf, iterations)."""
        count = self.count(x.samples)
        if count < 2:
            raise ExtremaError(f"{count} significant extrema, need at least 2")
        imf, iterations, _ = self.sift(x.samples, count)
        return x.with_samples(imf), iterations

    def decompose(self, x: Signal) -> DecompositionResult:
        """Extract IMFs from the running remainder until it runs out of
        significant extrema, max_imfs is reached, or the next filter would
        exceed half the record."""
        cfg = self.cfg
        if x.n < 8:
            raise BaselineError(f"IF needs N >= 8, got {x.n}")
        peak = float(np.max(np.abs(x.samples)))
        scale = float(np.ptp(x.samples))
        diagnostics = IFDiagnostics()
        remainder = x.samples
        imfs = []
        shortest = 1
        while len(imfs) < cfg.max_imfs:
            # 1. silence
            if peak == 0.0 or np.max(np.abs(remainder)) <= SILENCE_RATIO * peak:
                break
            # 2. nothing left to oscillate
            count = self.count(remainder, scale)
            if count < 2:
                break
            # 3. the next filter may not be shorter than the last one grown
            if shortest > x.n // 2:
                logger.info("IF stops: filter would exceed %d samples", x.n // 2)
                break
            imf, iterations, l = self.sift(remainder, count, scale, shortest)
            diagnostics.extrema_counts.append(count)
            diagnostics.filter_lengths.append(l)
            diagnostics.iterations.append(iterations)
            imfs.append(x.with_samples(imf))
            remainder = remainder - imf
            shortest = math.ceil(MASK_GROWTH * l)
        logger.info("IF extracted %d IMF(s)", len(imfs))
        return DecompositionResult(tuple(imfs), x.with_samples(remainder), diagnostics)


def if_extract_imf(x: Signal, cfg: IFConfig = IFConfig()) -> tuple:
    return IterativeFilter(cfg).extract(x)


def if_decompose(x: Signal, cfg: IFConfig = IFConfig()) -> DecompositionResult:
    return IterativeFilter(cfg).decompose(x)


def _end_knots(v: np.ndarray, maxima: np.ndarray, minima: np.ndarray) -> tuple:
    """Extrema reflected about each end: (left axis, left maxima, left minima,
    right axis, right maxima, right minima).

    The axis is the outermost extremum when the end sample lies inside the
    envelope band, and the end sample itself otherwise, in which case it
    also serves as a knot of the envelope it overshoots.
    """
    k = MIRRORED_EXTREMA
    last = v.size - 1
    if maxima[0] < minima[0]:
        if v[0] > v[minima[0]]:
            left = (maxima[0], maxima[1:k + 1], minima[:k])
        else:
            left = (0, maxima[:k], np.r_[minima[:k - 1], 0])
    elif v[0] < v[maxima[0]]:
        left = (minima[0], maxima[:k], minima[1:k + 1])
    else:
        left = (0, np.r_[maxima[:k - 1], 0], minima[:k])
    if maxima[-1] < minima[-1]:
        if v[last] < v[maxima[-1]]:
            right = (minima[-1], maxima[-k:], minima[-k - 1:-1])
        else:
            right = (last, np.r_[maxima[-k + 1:], last], minima[-k:])
    elif v[last] > v[minima[-1]]:
        right = (maxima[-1], maxima[-k - 1:-1], minima[-k:])
    else:
        right = (last, maxima[-k:], np.r_[minima[-k + 1:], last])
    return left + right


def _envelope(v: np.ndarray, knots: np.ndarray, left_axis: int, left: np.ndarray,
              right_axis: int, right: np.ndarray) -> np.ndarray:
    indices = np.concatenate([left, knots, right]).astype(int)
    positions = np.concatenate([2 * left_axis - left, knots, 2 * right_axis - right])
    order = np.argsort(positions, kind="stable")
    spline = CubicSpline(positions[order], v[indices[order]], bc_type="natural")
    return spline(np.arange(v.size))


def csa_average(x: Signal, floor: float = PROMINENCE_FLOOR) -> Signal:
    """Mean of the natural-spline envelopes through the significant maxima
    and minima, each end pinned by reflecting two extrema of either kind."""
    v = x.samples
    maxima, minima = significant_extrema(v, floor)
    if maxima.size < 2 or minima.size < 2:
        raise ExtremaError(f"CSA needs 2 maxima and 2 minima, got {maxima.size} and {minima.size}")
    la, lmax, lmin, ra, rmax, rmin = _end_knots(v, maxima, minima)
    upper = _envelope(v, maxima, la, lmax, ra, rmax)
    lower = _envelope(v, minima, la, lmin, ra, rmin)
    return x.with_samples(0.5 * (upper + lower))


if __name__ == "__main__":
    from signal_lab import sample_function

    logging.basicConfig(level=logging.INFO)
    x = sample_function(lambda t: np.cos(5 * np.pi * t) + np.cos(6.8 * np.pi * t), 0.0, 6.0, 1024)
    result = if_decompose(x)
    print(f"IF: {len(result.imfs)} IMFs, filter lengths {result.diagnostics.filter_lengths}")
    print(f"CSA average peak: {np.abs(csa_average(x).samples).max():.4f}")
