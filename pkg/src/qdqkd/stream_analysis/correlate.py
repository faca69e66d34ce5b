"""Start-stop correlation of sorted time-tag streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class CoincidenceHistogram:
    """Delay histogram of t_b - t_a.

    Bins tile (center_offset - span/2, center_offset + span/2); bin k starts
    at ``bin_start[k]``. Delays left of center use a mirrored edge rule so
    that swapping the two streams mirrors the histogram exactly, except for
    delays exactly at the center, which always fall in the bin right of it.
    """

    bin_width: int
    span: int
    counts: np.ndarray
    center_offset: int = 0

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def bin_start(self) -> np.ndarray:
        return self.center_offset - self.span / 2 + self.bin_width * np.arange(self.n_bins)

    @property
    def bin_center(self) -> np.ndarray:
        return self.bin_start + self.bin_width / 2

    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        if (self.bin_width, self.span, self.center_offset) != (other.bin_width, other.span, other.center_offset):
            raise ValueError("histograms have different binning")
        return CoincidenceHistogram(self.bin_width, self.span, self.counts + other.counts, self.center_offset)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("bin_start_ps,counts\n")
            for s, c in zip(self.bin_start, self.counts):
                fh.write(f"{s:.10g},{int(c)}\n")


def read_histogram_csv(path) -> CoincidenceHistogram:
    with open(path) as fh:
        head = fh.readline().strip()
        if head != "bin_start_ps,counts":
            raise ValueError(f"{path}: unexpected header {head!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    starts = np.array([float(r[0]) for r in rows])
    counts = np.array([int(r[1]) for r in rows], np.int64)
    w = int(round(starts[1] - starts[0]))
    span = w * len(counts)
    center = int(round(starts[0] + span / 2))
    return CoincidenceHistogram(w, span, counts, center)


@njit(cache=True)
def _hist_kernel(a, b, c2, span2, w2, nbins, counts):
    # Doubled integer arithmetic keeps half-span edges exact.
    j0 = 0
    nb = len(b)
    for i in range(len(a)):
        ta = a[i]
        while j0 < nb and 2 * (b[j0] - ta) - c2 <= -span2:
            j0 += 1
        j = j0
        while j < nb:
            u2 = 2 * (b[j] - ta) - c2
            if u2 >= span2:
                break
            if u2 >= 0:
                k = (u2 + span2) // w2
            else:
                k = nbins - 1 - (span2 - u2) // w2
            counts[k] += 1
            j += 1


@njit(cache=True)
def _count_pairs(a, b, lo, hi):
    j0 = 0
    nb = len(b)
    n = 0
    for i in range(len(a)):
        while j0 < nb and b[j0] - a[i] < lo:
            j0 += 1
        j = j0
        while j < nb and b[j] - a[i] < hi:
            n += 1
            j += 1
    return n


@njit(cache=True)
def _fill_pairs(a, b, lo, hi, out_d, out_i, out_j):
    j0 = 0
    nb = len(b)
    n = 0
    for i in range(len(a)):
        while j0 < nb and b[j0] - a[i] < lo:
            j0 += 1
        j = j0
        while j < nb and b[j] - a[i] < hi:
            out_d[n] = b[j] - a[i]
            out_i[n] = i
            out_j[n] = j
            n += 1
            j += 1


def _check_sorted(x: np.ndarray, name: str) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.int64)
    if len(x) > 1 and np.any(x[1:] < x[:-1]):
        raise ValueError(f"stream {name} is not time-sorted")
    return x


def build_histogram(a, b, bin_width: int, span: int, center_offset: int = 0) -> CoincidenceHistogram:
    """Histogram of delays t_b - t_a within span around center_offset."""
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    if span <= 0 or span % bin_width:
        raise ValueError("span must be a positive multiple of bin_width")
    a = _check_sorted(a, "a")
    b = _check_sorted(b, "b")
    nbins = span // bin_width
    counts = np.zeros(nbins, np.int64)
    _hist_kernel(a, b, np.int64(2 * center_offset), np.int64(span), np.int64(2 * bin_width),
                 np.int64(nbins), counts)
    return CoincidenceHistogram(int(bin_width), int(span), counts, int(center_offset))


def pair_delays(a, b, lo: int, hi: int, *, with_index: bool = False):
    """All delays t_b - t_a in [lo, hi), grouped by a. Optionally the index pairs."""
    a = _check_sorted(a, "a")
    b = _check_sorted(b, "b")
    n = _count_pairs(a, b, np.int64(lo), np.int64(hi))
    d = np.empty(n, np.int64)
    ia = np.empty(n, np.int64)
    ib = np.empty(n, np.int64)
    _fill_pairs(a, b, np.int64(lo), np.int64(hi), d, ia, ib)
    if with_index:
        return d, ia, ib
    return d
