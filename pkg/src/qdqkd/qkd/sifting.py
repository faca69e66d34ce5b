"""Coincidence matching, basis sifting and QBER estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.stats import beta as beta_dist

from ..stream_analysis.timetags import TimeTagStream

STAGES = ("raw", "sifted", "reconciled", "amplified")

# outcome code -> (basis, bit): H/V in basis 0, D/A in basis 1; H/D -> 0, V/A -> 1
_BASIS = np.array([255, 0, 0, 1, 1, 255, 255], np.uint8)
_BIT = np.array([255, 0, 1, 0, 1, 255, 255], np.uint8)


@dataclass
class KeyMaterial:
    bits: np.ndarray
    stage: str
    pulse_index: np.ndarray | None = None
    basis: np.ndarray | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, np.uint8)
        if self.stage not in STAGES:
            raise ValueError(f"unknown key stage {self.stage!r}")
        if np.any(self.bits > 1):
            raise ValueError("key bits must be 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    def subset(self, keep: np.ndarray) -> "KeyMaterial":
        pick = lambda x: None if x is None else x[keep]  # noqa: E731
        return KeyMaterial(self.bits[keep], self.stage, pick(self.pulse_index), pick(self.basis))


@numba.njit(cache=True)
def _match(a, b, lo, hi, center):
    # each Alice click takes the unused Bob click closest to `center` inside [lo, hi)
    na, nb = a.shape[0], b.shape[0]
    used = np.zeros(nb, np.bool_)
    ia = np.empty(min(na, nb), np.int64)
    ib = np.empty(min(na, nb), np.int64)
    m = 0
    j0 = 0
    for i in range(na):
        while j0 < nb and b[j0] - a[i] < lo:
            j0 += 1
        best = -1
        bestd = 0.0
        j = j0
        while j < nb and b[j] - a[i] < hi:
            if not used[j]:
                d = abs((b[j] - a[i]) - center)
                if best < 0 or d < bestd:
                    best = j
                    bestd = d
            j += 1
        if best >= 0:
            used[best] = True
            ia[m] = i
            ib[m] = best
            m += 1
    return ia[:m], ib[:m]


def match_coincidences(a_times: np.ndarray, b_times: np.ndarray, window: float = 2000.0,
                       center: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j) with b[j] - a[i] in [center - window/2, center + window/2)."""
    a = np.asarray(a_times, np.int64)
    b = np.asarray(b_times, np.int64)
    return _match(a, b, center - window / 2, center + window / 2, float(center))


@dataclass
class SiftResult:
    alice: KeyMaterial
    bob: KeyMaterial
    coincidences: int

    @property
    def sift_ratio(self) -> float:
        return len(self.alice) / self.coincidences if self.coincidences else float("nan")


def sift(alice: TimeTagStream, bob: TimeTagStream, window: float = 2000.0, center: float = 0.0,
         rep_period: float = 12500.0) -> SiftResult:
    """Keep coincidences measured in the same basis and map outcomes to bits.

    ``bob`` must already be on Alice's clock with the coincidence peak at
    zero delay; ``center`` shifts the window for sensitivity studies.
    """
    ia, ib = match_coincidences(alice.time, bob.time, window, center)
    oa = alice.outcome[ia]
    ob = bob.outcome[ib]
    ba, bb = _BASIS[oa], _BASIS[ob]
    same = (ba == bb) & (ba != 255)
    idx = ia[same]
    pulse = np.floor_divide(alice.time[idx], int(round(rep_period)))
    ka = KeyMaterial(_BIT[oa[same]], "sifted", pulse, ba[same])
    kb = KeyMaterial(_BIT[ob[same]], "sifted", pulse.copy(), bb[same].copy())
    return SiftResult(ka, kb, len(ia))


@dataclass
class QberEstimate:
    qber: float
    ci_low: float
    ci_high: float
    n_sampled: int
    n_errors: int
    status: str = "ok"


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    a = 1.0 - confidence
    lo = 0.0 if k == 0 else float(beta_dist.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def estimate_qber(alice: KeyMaterial, bob: KeyMaterial, sample_fraction: float,
                  rng: np.random.Generator | None = None,
                  confidence: float = 0.95) -> tuple[QberEstimate, KeyMaterial, KeyMaterial]:
    """Disclose a random sample, count errors, and drop the disclosed bits.

    Returns the estimate and the remaining (undisclosed) keys. An empty
    sample gives status "undefined" and a NaN QBER.
    """
    if len(alice) != len(bob):
        raise ValueError("keys are not aligned")
    if not 0.0 <= sample_fraction <= 1.0:
        raise ValueError("sample_fraction must be in [0, 1]")
    n = len(alice)
    k = int(round(sample_fraction * n))
    if sample_fraction >= 1.0:
        sample = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        sample = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, np.int64)
    keep = np.ones(n, bool)
    keep[sample] = False
    if len(sample) == 0:
        est = QberEstimate(float("nan"), 0.0, 1.0, 0, 0, "undefined")
    else:
        errors = int(np.count_nonzero(alice.bits[sample] != bob.bits[sample]))
        lo, hi = clopper_pearson(errors, len(sample), confidence)
        est = QberEstimate(errors / len(sample), lo, hi, len(sample), errors)
    return est, alice.subset(keep), bob.subset(keep)
