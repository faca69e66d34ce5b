"""Two-photon polarization tomography: simulated measurement and MLE reconstruction."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .optics import analyzer, arm_outcomes
from .quantum_math import (POLARIZATIONS, bell_fidelity_max, check_density_matrix, concurrence,
                           format_density_matrix, product_projector, qber_from_rho)
from .source_model import SourceParams, simulate_pulses
from .stream_analysis.correlate import build_histogram
from .stream_analysis.estimators import (DEFAULT_PERIOD, EXCLUDED_NEIGHBOURS, SIDE_PEAKS_PER_SIDE,
                                         locate_peak, peak_areas)
from .stream_analysis.timetags import DetectorParams, detect

LABELS = ("H", "V", "D", "A", "R", "L")
ALL_BASES = tuple((a, b) for a in LABELS for b in LABELS)
WINDOW_OFFSETS = (-1000, -500, 0, 500, 1000)


@dataclass(frozen=True)
class TomographySettings:
    """Measurement plan; times in ps.

    ``counts_target`` is the expected number of true pair coincidences per
    basis for an unpolarized analyzer pair (a quarter of all heralded
    pairs); it sets how many pulses each basis is integrated for.
    """

    bases: tuple = ALL_BASES
    window: int = 2000
    counts_target: int = 5000
    bin_width: int = 50
    n_side: int = SIDE_PEAKS_PER_SIDE

    def __post_init__(self):
        if len(self.bases) != 36 or len(set(self.bases)) != 36:
            raise ValueError("exactly 36 distinct basis pairs are required")
        for a, b in self.bases:
            if a not in POLARIZATIONS or b not in POLARIZATIONS:
                raise ValueError(f"unknown polarization in basis pair {(a, b)}")
        if self.window <= 0:
            raise ValueError("window must be > 0")
        if self.counts_target < 1:
            raise ValueError("counts_target must be >= 1")


@dataclass
class TomographyCounts:
    bases: list
    counts: np.ndarray
    normalization: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, np.int64)
        self.normalization = np.asarray(self.normalization, float)
        if len(self.bases) != len(self.counts) or len(self.counts) != len(self.normalization):
            raise ValueError("bases, counts and normalization lengths differ")
        if np.any(self.counts < 0):
            raise ValueError("counts must be >= 0")
        if np.any(~(self.normalization > 0)):
            raise ValueError("normalizations must be > 0")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["basis_a", "basis_b", "counts", "normalization"])
        for (a, b), c, n in zip(self.bases, self.counts, self.normalization):
            w.writerow([a, b, int(c), repr(float(n))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TomographyCounts":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["basis_a", "basis_b", "counts", "normalization"]:
            raise ValueError("missing header basis_a,basis_b,counts,normalization")
        bases, counts, norms = [], [], []
        for line, r in enumerate(rows[1:], start=2):
            if len(r) != 4:
                raise ValueError(f"line {line}: expected 4 fields")
            try:
                bases.append((r[0], r[1]))
                counts.append(int(r[2]))
                norms.append(float(r[3]))
            except ValueError as exc:
                raise ValueError(f"line {line}: {exc}") from None
        return cls(bases, counts, norms)


@dataclass
class TomographyRun:
    """Per-basis coincidence histograms plus the common center-peak delay."""

    bases: list
    histograms: list
    center: float
    n_pulses_per_basis: int
    settings: TomographySettings = field(default_factory=TomographySettings)

    def counts(self, offset: float = 0.0) -> TomographyCounts:
        """Window counts and side-peak normalizations with the window shifted by ``offset``."""
        c, n = [], []
        for h in self.histograms:
            pa = peak_areas(h, self.settings.window, DEFAULT_PERIOD, self.center + offset,
                            n_side=self.settings.n_side, exclude=EXCLUDED_NEIGHBOURS)
            c.append(pa.center_area)
            n.append(max(pa.side_mean, 0.25))  # empty sides still get a finite weight
        return TomographyCounts(list(self.bases), c, n)


def _histogram_span(settings: TomographySettings, max_offset: float) -> int:
    reach = (EXCLUDED_NEIGHBOURS + settings.n_side) * DEFAULT_PERIOD + settings.window / 2 + max_offset
    half = math.ceil(reach / settings.bin_width) * settings.bin_width
    return int(2 * half)


def simulate_tomography_run(source: SourceParams, det: DetectorParams, settings: TomographySettings,
                            seed: int, *, workers: int = 1, max_offset: float = 1000.0) -> TomographyRun:
    """Simulate the 36 polarization-resolved XX-X coincidence measurements.

    Every basis pair gets its own pulse stream; the XX photon meets the
    first analyzer and the X photon the second, and transmitted photons are
    detected by one detector per arm.
    """
    eff = det.efficiency ** 2 * source.pair_prob_epsilon / 4
    n_pulses = max(1, math.ceil(settings.counts_target / eff))
    span = _histogram_span(settings, max_offset)

    def one(k):
        a, b = settings.bases[k]
        ss = np.random.SeedSequence(seed, spawn_key=(20, k))
        stream = simulate_pulses(source, n_pulses, int(ss.generate_state(1, np.uint64)[0]))
        rng = np.random.default_rng(ss)
        oa, ob = arm_outcomes(stream, analyzer(a), analyzer(b), rng)
        duration = n_pulses * stream.period_ps
        pass_a = oa == 0
        pass_b = ob == 0
        ta = stream.pulse_index[pass_a] * stream.period_ps + stream.xx_time[pass_a]
        tb = stream.pulse_index[pass_b] * stream.period_ps + stream.x_time[pass_b]
        ca = detect(ta, np.zeros(len(ta), int), 1, det, duration, rng).time
        cb = detect(tb, np.zeros(len(tb), int), 1, det, duration, rng).time
        return build_histogram(ca, cb, settings.bin_width, span)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hists = list(pool.map(one, range(36)))
    else:
        hists = [one(k) for k in range(36)]
    total = hists[0]
    for h in hists[1:]:
        total = total + h
    center = locate_peak(total, None, search=(-DEFAULT_PERIOD / 2, DEFAULT_PERIOD / 2))
    return TomographyRun(list(settings.bases), hists, center, n_pulses, settings)


def simulate_tomography(source: SourceParams, det: DetectorParams, settings: TomographySettings,
                        seed: int, *, workers: int = 1) -> TomographyCounts:
    return simulate_tomography_run(source, det, settings, seed, workers=workers).counts(0.0)


def ideal_counts(rho: np.ndarray, bases=ALL_BASES, scale: float = 1e9) -> TomographyCounts:
    """Noise-free counts, rounded from ``scale`` times the outcome probabilities."""
    rho = check_density_matrix(rho)
    probs = np.array([np.real(np.trace(rho @ product_projector(a, b))) for a, b in bases])
    return TomographyCounts(list(bases), np.rint(scale * np.clip(probs, 0, None)), np.ones(len(bases)))


def sample_counts(rho: np.ndarray, n_events: int, rng: np.random.Generator,
                  bases=ALL_BASES) -> TomographyCounts:
    """Poisson counts of ``n_events`` pair events spread evenly over the measured bases.

    Each measurement setting sees n_events / (number of bases / 4) pairs on
    average, so four outcomes of a full setting share one pair budget.
    """
    rho = check_density_matrix(rho)
    per_setting = n_events / (len(bases) / 4)
    probs = np.array([np.real(np.trace(rho @ product_projector(a, b))) for a, b in bases])
    lam = per_setting * np.clip(probs, 0, None)
    return TomographyCounts(list(bases), rng.poisson(lam), np.ones(len(bases)))


# --- maximum-likelihood reconstruction ----------------------------------------

_TRIL = np.tril_indices(4)
_OFFDIAG = np.tril_indices(4, -1)


class TomographyError(RuntimeError):
    """Raised when no restart of the likelihood maximization converges."""

    def __init__(self, message, best_rho=None, diagnostics=None):
        super().__init__(message)
        self.best_rho = best_rho
        self.diagnostics = diagnostics or {}


def _t_from_params(t: np.ndarray) -> np.ndarray:
    T = np.zeros((4, 4), complex)
    T[np.diag_indices(4)] = t[:4]
    T[_OFFDIAG] = t[4:10] + 1j * t[10:16]
    return T


def _params_from_t(T: np.ndarray) -> np.ndarray:
    return np.concatenate([np.real(np.diag(T)), T[_OFFDIAG].real, T[_OFFDIAG].imag])


def _projectors(bases) -> np.ndarray:
    return np.array([product_projector(a, b) for a, b in bases])


def _nll_and_grad(t, proj, counts, weights):
    T = _t_from_params(t)
    rho_u = T.conj().T @ T
    f = np.real(np.einsum("kij,ji->k", proj, rho_u))
    mu = weights * f
    pos = counts > 0
    if np.any(mu[pos] <= 0):
        return np.inf, np.zeros_like(t)
    nll = float(np.sum(mu) - np.sum(counts[pos] * np.log(mu[pos])))
    c = weights.copy()
    c[pos] -= counts[pos] / f[pos]
    G = np.einsum("k,kij->ij", c, proj)
    A = 2.0 * (T @ G)  # dL/dconj(T) up to the Hermitian structure: dL = 2 Re tr(G T^dag dT)
    grad = np.concatenate([np.real(np.diag(A)), A[_OFFDIAG].real, A[_OFFDIAG].imag])
    return nll, grad


def log_likelihood(rho: np.ndarray, counts: TomographyCounts) -> float:
    """Poisson log-likelihood (up to constants) with the overall rate profiled out."""
    rho = check_density_matrix(rho)
    proj = _projectors(counts.bases)
    f = np.real(np.einsum("kij,ji->k", proj, rho)) * counts.normalization
    n = np.asarray(counts.counts, float)
    scale = n.sum() / f.sum()
    mu = scale * f
    pos = n > 0
    if np.any(mu[pos] <= 0):
        return -np.inf
    return float(np.sum(n[pos] * np.log(mu[pos])) - mu.sum())


@dataclass
class Reconstruction:
    rho: np.ndarray
    nll: float
    grad_norm: float
    restarts: int
    converged_restarts: int

    def report(self) -> str:
        lines = [
            f"concurrence={concurrence(self.rho):.6f}",
            f"bell_fidelity_max={bell_fidelity_max(self.rho):.6f}",
            f"qber_from_rho={qber_from_rho(self.rho):.6f}",
            f"neg_log_likelihood={self.nll:.6f}",
            f"grad_norm={self.grad_norm:.3e}",
            "rho:",
            format_density_matrix(self.rho),
        ]
        return "\n".join(lines) + "\n"


def mle_reconstruct_full(counts: TomographyCounts, *, restarts: int = 5, seed: int = 0,
                         gtol: float = 1e-8, max_iter: int = 5000) -> Reconstruction:
    """Maximum-likelihood two-qubit state from normalized coincidence counts.

    The expected count of each basis is normalization x tr(rho_u Pi) with
    rho_u = T^dag T unnormalized, so the overall rate is fitted through the
    scale of T. The first start is the maximally mixed state at the right
    scale; the other starts are random perturbations of it.
    """
    if len(counts.bases) < 16:
        raise ValueError("at least 16 measurement settings are required")
    proj = _projectors(counts.bases)
    n = np.asarray(counts.counts, float)
    w = np.asarray(counts.normalization, float)
    total = n.sum()
    if total <= 0:
        raise ValueError("all counts are zero")
    # Scale the objective so its size does not depend on the count total.
    wn = w / total
    nn = n / total
    f0 = np.real(np.einsum("kij,ji->k", proj, np.eye(4) / 4))
    s0 = nn.sum() / np.sum(wn * f0)
    t_start = _params_from_t(np.sqrt(s0) * np.eye(4) / 2)
    rng = np.random.default_rng(seed)
    best, n_ok = None, 0
    for r in range(restarts):
        t0 = t_start if r == 0 else t_start + rng.normal(0, 0.3 * np.sqrt(s0) / 2, 16)
        res = minimize(_nll_and_grad, t0, args=(proj, nn, wn), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": gtol * 1e-2, "ftol": 1e-15, "maxcor": 30})
        res = minimize(_nll_and_grad, res.x, args=(proj, nn, wn), jac=True, method="BFGS",
                       options={"maxiter": max_iter, "gtol": gtol})
        gnorm = float(np.linalg.norm(res.jac)) if np.all(np.isfinite(res.jac)) else np.inf
        ok = gnorm <= gtol or bool(res.success)
        n_ok += ok
        cand = (res.fun, gnorm, ok, res.x)
        if best is None or (ok, -res.fun) > (best[2], -best[0]):
            best = cand
    fun, gnorm, ok, t = best
    T = _t_from_params(t)
    rho_u = T.conj().T @ T
    rho = rho_u / np.real(np.trace(rho_u))
    rho = 0.5 * (rho + rho.conj().T)
    if not ok:
        raise TomographyError(f"likelihood maximization did not converge (|grad| = {gnorm:.3e})",
                              best_rho=rho, diagnostics={"nll": fun, "grad_norm": gnorm})
    return Reconstruction(check_density_matrix(rho), float(fun * total), gnorm, restarts, n_ok)


def mle_reconstruct(counts: TomographyCounts, **kwargs) -> np.ndarray:
    return mle_reconstruct_full(counts, **kwargs).rho


def window_sensitivity(run: TomographyRun, offsets=WINDOW_OFFSETS) -> list[tuple[float, float]]:
    """(window offset, QBER of the reconstructed state) for each offset."""
    return [(float(o), qber_from_rho(mle_reconstruct(run.counts(o)))) for o in offsets]


def counts_qber(counts: TomographyCounts) -> tuple[float, float]:
    """QBER straight from normalized counts in the HV and DA bases, with its standard error.

    Each outcome rate is counts / normalization; within a basis pair the four
    rates are normalized to probabilities.
    """
    idx = {b: i for i, b in enumerate(counts.bases)}
    q, var = 0.0, 0.0
    for basis, (good, bad) in {"HV": (("H", "H"), ("V", "V")), "DA": (("D", "D"), ("A", "A"))}.items():
        a0, a1 = basis
        keys = [(a0, a0), (a0, a1), (a1, a0), (a1, a1)]
        r = np.array([counts.counts[idx[k]] / counts.normalization[idx[k]] for k in keys])
        v = np.array([max(counts.counts[idx[k]], 1) / counts.normalization[idx[k]] ** 2 for k in keys])
        tot = r.sum()
        err = (r[1] + r[2]) / tot
        # propagate Poisson variances through err = (r1 + r2) / sum(r)
        d = np.array([-err, 1 - err, 1 - err, -err]) / tot
        q += 0.5 * err
        var += 0.25 * float(np.sum(d ** 2 * v))
    return q, math.sqrt(var)
