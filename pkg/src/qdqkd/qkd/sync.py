"""Clock synchronization by tracking the cross-correlation peak."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..stream_analysis.correlate import build_histogram
from ..stream_analysis.estimators import DEFAULT_PERIOD, locate_peak


@dataclass
class SyncResult:
    """Bob-minus-Alice delay of the coincidence peak: offset + slope * t_alice."""

    offset: float
    slope: float
    locked: bool
    peak_to_floor: float
    significance: float = 0.0  # Poisson excess of the chosen peak over the other pulse peaks

    def predict(self, t):
        return self.offset + self.slope * np.asarray(t, float)


def correct_times(bob_times: np.ndarray, sync: SyncResult) -> np.ndarray:
    """Map Bob's time tags onto Alice's clock so the coincidence peak sits at zero delay."""
    t = np.asarray(bob_times, float)
    # invert t_b = t_a + offset + slope * t_a
    ta = (t - sync.offset) / (1.0 + sync.slope)
    return np.rint(ta).astype(np.int64)


def _coarse(a, b, lo, hi, rep_period, bin_width):
    # pad by a period so a peak next to either end keeps its full area
    span = int(np.ceil((hi - lo + 2 * rep_period) / 2 / bin_width) * 2 * bin_width)
    center = int(round((lo + hi) / 2 / bin_width)) * bin_width
    h = build_histogram(a, b, bin_width, span, center_offset=center)
    phase = locate_peak(h, rep_period)
    # representative of every pulse-period peak inside the range; pick the largest area
    k0 = int(np.ceil((lo - phase) / rep_period))
    k1 = int(np.floor((hi - phase) / rep_period))
    cands = phase + rep_period * np.arange(k0, k1 + 1)
    c = h.bin_center
    idx = np.clip(np.searchsorted(c, cands - rep_period / 4), 0, len(c))
    jdx = np.clip(np.searchsorted(c, cands + rep_period / 4), 0, len(c))
    cum = np.concatenate([[0], np.cumsum(h.counts)])
    areas = cum[jdx] - cum[idx]
    best = int(np.argmax(areas))
    others = np.delete(areas, best)
    if len(others) == 0:
        return float(cands[best]), np.inf
    side = float(np.median(others))
    sig = (areas[best] - side) / np.sqrt(side) if side > 0 else (np.inf if areas[best] > 0 else 0.0)
    return float(cands[best]), float(sig)


def _fine(a, b, guess, rep_period, bin_width, smooth):
    span = rep_period
    center = int(round(guess / bin_width)) * bin_width
    h = build_histogram(a, b, bin_width, span, center_offset=center)
    peak = locate_peak(h, None, smooth=smooth)
    c = h.bin_center
    between = np.abs(c - peak) > rep_period / 4
    near = np.abs(c - peak) <= smooth / 2
    floor = h.counts[between].mean() if between.any() else 0.0
    top = h.counts[near].mean() if near.any() else 0.0
    return peak, top, floor, int(h.counts.sum())


def drift_slope(a: np.ndarray, b: np.ndarray, rep_period: int = DEFAULT_PERIOD, slices: int = 32,
                bin_width: int = 250) -> float:
    """Clock slope from the pulse-period phase of the cross-correlation in time slices.

    Every pulse pair contributes to the folded phase, so this works before
    the true coincidence peak is known. The phase must move by less than
    half a period between slices.
    """
    edges = np.linspace(int(a[0]), int(a[-1]) + 1, slices + 1)
    mids, phases = [], []
    span = 40 * rep_period
    for k in range(slices):
        sa = a[(a >= edges[k]) & (a < edges[k + 1])]
        sb = b[(b >= edges[k]) & (b < edges[k + 1] + span)]
        if len(sa) < 10 or len(sb) < 10:
            continue
        h = build_histogram(sa, sb, bin_width, span, center_offset=span // 2)
        if h.total() == 0:
            continue
        mids.append(0.5 * (edges[k] + edges[k + 1]))
        phases.append(locate_peak(h, rep_period))
    if len(phases) < 3:
        return 0.0
    ph = np.unwrap(np.asarray(phases) * 2 * np.pi / rep_period) * rep_period / (2 * np.pi)
    return float(np.polyfit(mids, ph, 1)[0])


def synchronize(alice_times: np.ndarray, bob_times: np.ndarray, *, guess: float | None = None,
                slope: float = 0.0, search: float = 100e6, track: float = 50_000.0,
                rep_period: int = DEFAULT_PERIOD, segments: int = 8, bin_width: int = 50,
                smooth: int = 500, min_ratio: float = 5.0, min_significance: float = 6.0) -> SyncResult:
    """Find the delay of Bob's coincidence peak relative to Alice, tracked over the block.

    Without ``guess`` the clock slope is first estimated with
    :func:`drift_slope` and the delay searched over [0, ``search``) ps; with a
    guess (the prediction from the previous block) over +-``track`` ps.
    The pulse peak with the largest area wins the coarse search. The block
    is then split into ``segments`` time slices whose peak positions are
    fitted with a straight line, which follows a drifting clock. The result
    is unlocked when the peak does not exceed ``min_ratio`` times the
    accidental floor between pulses, or when its area stands less than
    ``min_significance`` Poisson deviations above the median pulse peak.
    At high click probability per pulse the neighbouring peaks are nearly
    as tall as the true one, so only the second test separates them.
    """
    a = np.asarray(alice_times, np.int64)
    b = np.asarray(bob_times, np.int64)
    if len(a) == 0 or len(b) == 0:
        return SyncResult(0.0 if guess is None else guess, slope, False, 0.0)
    if guess is None:
        slope = drift_slope(a, b, rep_period)
    # undo the predicted drift so the peak stays narrow: b0 = b * (1 - slope)
    scale = 1.0 - slope
    b0 = np.sort(np.rint(b * scale).astype(np.int64)) if slope else b
    lo, hi = (0.0, search) if guess is None else (guess * scale - track, guess * scale + track)
    coarse, sig = _coarse(a, b0, lo, hi, rep_period, 250)

    edges = np.linspace(int(a[0]), int(a[-1]) + 1, segments + 1)
    mids, peaks, weights = [], [], []
    top_sum = floor_sum = 0.0
    for k in range(segments):
        sa = a[(a >= edges[k]) & (a < edges[k + 1])]
        sb = b0[(b0 >= edges[k] + coarse - rep_period) & (b0 < edges[k + 1] + coarse + rep_period)]
        if len(sa) == 0 or len(sb) == 0:
            continue
        peak, top, floor, n = _fine(sa, sb, coarse, rep_period, bin_width, smooth)
        top_sum += top
        floor_sum += floor
        if n:
            mids.append(0.5 * (edges[k] + edges[k + 1]))
            peaks.append(peak)
            weights.append(n)
    if not peaks:
        return SyncResult(coarse / scale, slope, False, 0.0, sig)
    ratio = top_sum / floor_sum if floor_sum > 0 else np.inf
    if len(peaks) >= 2:
        f, intercept = np.polyfit(mids, peaks, 1, w=np.sqrt(weights))
    else:
        f, intercept = 0.0, peaks[0]
    # peak in b0 coordinates: b0 = t_a + intercept + f * t_a, with b0 = b * scale
    total_slope = (1.0 + f) / scale - 1.0
    locked = ratio >= min_ratio and sig >= min_significance
    return SyncResult(float(intercept / scale), float(total_slope), bool(locked), float(ratio), sig)
