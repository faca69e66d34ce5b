"""Peak-area estimators on pulsed correlation histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .correlate import CoincidenceHistogram

DEFAULT_WINDOW = 2000
DEFAULT_PERIOD = 12500
SIDE_PEAKS_PER_SIDE = 10
EXCLUDED_NEIGHBOURS = 1


@dataclass(frozen=True)
class PeakAreas:
    center: float
    center_area: int
    side_areas: np.ndarray
    side_orders: np.ndarray

    @property
    def side_mean(self) -> float:
        return float(np.mean(self.side_areas))

    @property
    def side_sem(self) -> float:
        return float(np.sqrt(np.sum(self.side_areas)) / len(self.side_areas))


def locate_peak(h: CoincidenceHistogram, rep_period: int | None = DEFAULT_PERIOD,
                smooth: int = 500, search: tuple[float, float] | None = None) -> float:
    """Delay of the coincidence peak maximum.

    With ``rep_period`` the histogram is folded over one period first, so
    an antibunched (empty) zero-delay peak is still located through its
    neighbours. Counts are smoothed with a triangular kernel about ``smooth`` ps wide.
    Without it the smoothed maximum inside ``search`` (lo, hi) is returned.
    """
    w = h.bin_width
    # triangular kernel: symmetric with a single maximum, so a sharp peak is not smeared into a plateau
    m = max(1, int(round(smooth / w / 2)))
    kern = np.convolve(np.ones(m), np.ones(m))
    k = len(kern) // 2
    if rep_period:
        if rep_period % w:
            raise ValueError("rep_period must be a multiple of bin_width")
        n = rep_period // w
        idx = np.round((h.bin_center - h.bin_center[0]) / w).astype(int) % n
        fold = np.bincount(idx, weights=h.counts, minlength=n)
        pad = np.concatenate([fold[n - k:], fold, fold[:k]]) if k else fold
        sm = np.convolve(pad, kern, "valid")
        phase = h.bin_center[0] + np.argmax(sm) * w
        # representative of the folded phase closest to zero delay
        return float(phase - rep_period * np.round(phase / rep_period))
    sm = np.convolve(h.counts, kern, "same").astype(float)
    if search is not None:
        c = h.bin_center
        sm[(c < search[0]) | (c >= search[1])] = -1.0
    return float(h.bin_center[np.argmax(sm)])


def window_sum(h: CoincidenceHistogram, lo: float, hi: float) -> int:
    """Counts of bins whose centers lie in [lo, hi)."""
    c = h.bin_center
    return int(h.counts[(c >= lo) & (c < hi)].sum())


def peak_areas(h: CoincidenceHistogram, window: int = DEFAULT_WINDOW, rep_period: int = DEFAULT_PERIOD,
               center: float | None = None, n_side: int = SIDE_PEAKS_PER_SIDE,
               exclude: int = EXCLUDED_NEIGHBOURS) -> PeakAreas:
    """Center-peak area and side-peak areas in equal windows.

    Side peaks of order exclude+1 .. exclude+n_side on both sides are used
    when they fit completely inside the histogram span.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    if center is None:
        center = locate_peak(h, rep_period)
    lo_edge = h.center_offset - h.span / 2
    hi_edge = h.center_offset + h.span / 2
    half = window / 2
    areas, orders = [], []
    for order in range(exclude + 1, exclude + n_side + 1):
        for sign in (-1, 1):
            c = center + sign * order * rep_period
            if c - half >= lo_edge and c + half <= hi_edge:
                areas.append(window_sum(h, c - half, c + half))
                orders.append(sign * order)
    if len(areas) < 3:
        raise ValueError(f"only {len(areas)} complete side peaks inside the histogram span; need >= 3")
    return PeakAreas(center, window_sum(h, center - half, center + half),
                     np.asarray(areas, np.int64), np.asarray(orders))


def g2_zero(h: CoincidenceHistogram, window: int = DEFAULT_WINDOW, rep_period: int = DEFAULT_PERIOD,
            center: float | None = None) -> float:
    """Zero-delay peak area over the mean side-peak area."""
    pa = peak_areas(h, window, rep_period, center if center is not None else 0.0)
    if pa.side_mean == 0:
        raise ValueError("side peaks are empty")
    return pa.center_area / pa.side_mean


def g2_zero_error(h: CoincidenceHistogram, window: int = DEFAULT_WINDOW,
                  rep_period: int = DEFAULT_PERIOD, center: float | None = None) -> float:
    """Poisson standard error of :func:`g2_zero`."""
    pa = peak_areas(h, window, rep_period, center if center is not None else 0.0)
    g = pa.center_area / pa.side_mean
    rel2 = 1.0 / max(pa.center_area, 1) + 1.0 / max(pa.side_areas.sum(), 1)
    return float(g * np.sqrt(rel2))


def pair_probability_epsilon(h: CoincidenceHistogram, window: int = DEFAULT_WINDOW,
                             rep_period: int = DEFAULT_PERIOD,
                             center: float | None = None) -> tuple[float, float]:
    """Pair-generation probability from an unpolarized XX-X cross-correlation.

    A detected XX photon heralds an X photon of the same cycle, so the
    center peak scales with epsilon while uncorrelated neighbouring cycles
    scale with epsilon squared. Returns (estimate, standard error).
    """
    pa = peak_areas(h, window, rep_period, center)
    if pa.center_area == 0:
        raise ValueError("center peak area is zero")
    eps = pa.side_mean / pa.center_area
    rel2 = 1.0 / pa.center_area + 1.0 / max(pa.side_areas.sum(), 1)
    return float(eps), float(eps * np.sqrt(rel2))


@dataclass(frozen=True)
class BetaFit:
    beta: float
    beta_err: float
    g2_zero: float
    correlation_time: float
    plateau: float

    def report(self) -> str:
        return f"beta={format_value_error(self.beta, self.beta_err)}"


def format_value_error(value: float, err: float) -> str:
    """Compact "1.00(2)" notation with two decimals minimum."""
    if not np.isfinite(err) or err <= 0:
        return f"{value:.2f}"
    digits = max(2, int(-np.floor(np.log10(err))))
    scaled = int(round(err * 10 ** digits))
    if scaled >= 10 and digits > 2:
        digits -= 1
        scaled = int(round(err * 10 ** digits))
    return f"{value:.{digits}f}({scaled})"


def _bin_mean_exp(lo: np.ndarray, hi: np.ndarray, tau: float) -> np.ndarray:
    # mean of exp(-|t|/tau) over [lo, hi] for bins not straddling zero
    a = np.minimum(np.abs(lo), np.abs(hi))
    b = np.maximum(np.abs(lo), np.abs(hi))
    return tau * (np.exp(-a / tau) - np.exp(-b / tau)) / (b - a)


def on_fraction_beta(h: CoincidenceHistogram, exclude_halfwidth: float | None = None) -> BetaFit:
    """On-time fraction from the long-timescale bunching of an intensity correlation.

    Fits counts = plateau * (1 + A exp(-|t|/tau_c)) averaged over each bin,
    skipping bins that touch the antibunching region around zero delay, and
    returns beta = 1 / g2(0) with g2(0) = 1 + A.
    """
    if h.bin_width < 100_000:
        raise ValueError("bin_width must be >= 100 ns for blinking analysis")
    half = exclude_halfwidth if exclude_halfwidth is not None else DEFAULT_PERIOD / 2
    lo = h.bin_start.astype(float)
    hi = lo + h.bin_width
    use = (hi <= -half) | (lo >= half)
    lo, hi, y = lo[use], hi[use], h.counts[use].astype(float)
    if len(y) < 6:
        raise ValueError("too few bins outside the zero-delay region")
    edge = np.concatenate([y[:max(2, len(y) // 10)], y[-max(2, len(y) // 10):]])
    p0 = float(np.mean(edge))
    inner = np.argsort(np.minimum(np.abs(lo), np.abs(hi)))[:2]
    a0 = max(float(np.mean(y[inner]) / p0 - 1.0), 1e-3)
    span_half = h.span / 2

    def model(_, plateau, amp, tau):
        return plateau * (1.0 + amp * _bin_mean_exp(lo, hi, tau))

    sigma = np.sqrt(np.maximum(y, 1.0))
    popt, pcov = curve_fit(model, None, y, p0=[p0, a0, span_half / 10], sigma=sigma,
                           absolute_sigma=True,
                           bounds=([0.0, -0.99, h.bin_width / 20], [np.inf, 1e3, 10 * span_half]),
                           max_nfev=20000)
    plateau, amp, tau = popt
    amp_err = float(np.sqrt(max(pcov[1, 1], 0.0)))
    if amp > 3 * amp_err and 3 * tau > span_half:
        raise ValueError("correlation does not reach its plateau inside the histogram span")
    g2 = 1.0 + amp
    beta = 1.0 / g2
    return BetaFit(float(beta), float(amp_err / g2 ** 2), float(g2), float(tau), float(plateau))
