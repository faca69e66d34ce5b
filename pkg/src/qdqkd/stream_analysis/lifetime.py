"""Binned maximum-likelihood lifetime fits with a Gaussian instrument response."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import erfcx, ndtr

from .correlate import CoincidenceHistogram


class FitError(RuntimeError):
    """Lifetime fit did not converge."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class LifetimeFit:
    model: str
    lifetimes: np.ndarray
    lifetime_errors: np.ndarray
    fractions: np.ndarray
    fraction_errors: np.ndarray
    t0: float
    t0_error: float
    converged: bool
    n_counts: int
    nll: float
    extra: dict = field(default_factory=dict)

    def report(self) -> str:
        lines = [f"model={self.model}", f"counts={self.n_counts}", f"converged={self.converged}"]
        for i, (tau, err) in enumerate(zip(self.lifetimes, self.lifetime_errors), 1):
            lines.append(f"tau{i}_ps={tau:.4g}")
            lines.append(f"tau{i}_err_ps={err:.3g}")
        for i, (f, err) in enumerate(zip(self.fractions, self.fraction_errors), 1):
            lines.append(f"fraction{i}={f:.4g}")
            lines.append(f"fraction{i}_err={err:.3g}")
        lines.append(f"t0_ps={self.t0:.4g}")
        lines.append(f"t0_err_ps={self.t0_error:.3g}")
        return "\n".join(lines) + "\n"


def exp_gauss_cdf(t: np.ndarray, tau: float, sigma: float, t0: float = 0.0) -> np.ndarray:
    """CDF of an exponential (mean tau) starting at t0, convolved with N(0, sigma)."""
    x = np.asarray(t, float) - t0
    if sigma <= 0:
        return np.where(x > 0, -np.expm1(-np.maximum(x, 0.0) / tau), 0.0)
    z = x / sigma - sigma / tau
    with np.errstate(over="ignore", invalid="ignore"):
        # exp(-x/tau + sigma^2/2tau^2) * Phi(z), evaluated stably on both sides
        tail_neg = 0.5 * erfcx(-z / np.sqrt(2.0)) * np.exp(-0.5 * (x / sigma) ** 2)
        tail_pos = np.exp(-x / tau + 0.5 * (sigma / tau) ** 2) * ndtr(z)
    tail = np.where(z < 0, tail_neg, tail_pos)
    return ndtr(x / sigma) - tail


def _bin_probs(edges, taus, fracs, sigma, t0):
    cdf = sum(f * exp_gauss_cdf(edges, tau, sigma, t0) for f, tau in zip(fracs, taus))
    p = np.diff(cdf)
    total = cdf[-1] - cdf[0]
    return p / total


def _newton_gain(f, theta, n, h=1e-4):
    """Log-likelihood gain of one Newton step on ``n * f`` from finite differences."""
    k = len(theta)
    f0 = f(theta)
    g = np.empty(k)
    H = np.empty((k, k))
    e = np.eye(k) * h
    for i in range(k):
        fp, fm = f(theta + e[i]), f(theta - e[i])
        g[i] = (fp - fm) / (2 * h)
        H[i, i] = (fp - 2 * f0 + fm) / h ** 2
        for j in range(i):
            H[i, j] = H[j, i] = (f(theta + e[i] + e[j]) - f(theta + e[i] - e[j])
                                 - f(theta - e[i] + e[j]) + f(theta - e[i] - e[j])) / (4 * h * h)
    try:
        step = np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.inf
    gain = 0.5 * n * float(g @ step)
    return gain if np.all(np.linalg.eigvalsh(H) > 0) else np.inf


def _unpack(theta, model, fit_t0, t0_fixed):
    i = 0
    tau1 = np.exp(theta[i]); i += 1
    if model == "double":
        tau2 = tau1 + np.exp(theta[i]); i += 1
        f1 = 1.0 / (1.0 + np.exp(-theta[i])); i += 1
        taus, fracs = (tau1, tau2), (f1, 1.0 - f1)
    else:
        taus, fracs = (tau1,), (1.0,)
    t0 = theta[i] if fit_t0 else t0_fixed
    return taus, fracs, t0


def fit_lifetime(h: CoincidenceHistogram, model: str = "single", irf_sigma: float = 0.0, *,
                 t0: float | None = None, fit_range: tuple[float, float] | None = None,
                 initial: tuple[float, ...] | None = None, max_iter: int = 2000) -> LifetimeFit:
    """Fit one or two exponential decays convolved with a Gaussian IRF.

    Poisson likelihood over the histogram bins, with the total amplitude
    profiled out (equivalently a multinomial over the bins of ``fit_range``).
    ``t0`` is fitted when ``irf_sigma > 0`` unless given; without an IRF it
    defaults to 0. Uncertainties come from the expected Fisher information.
    Raises FitError when the optimizer does not converge.
    """
    if model not in ("single", "double"):
        raise ValueError(f"unknown model {model!r}")
    edges_all = np.append(h.bin_start, h.bin_start[-1] + h.bin_width).astype(float)
    counts_all = h.counts.astype(float)
    if fit_range is not None:
        sel = (edges_all[:-1] >= fit_range[0]) & (edges_all[1:] <= fit_range[1])
        first, last = np.flatnonzero(sel)[[0, -1]]
        edges = edges_all[first:last + 2]
        counts = counts_all[first:last + 1]
    else:
        edges, counts = edges_all, counts_all
    n = counts.sum()
    if n <= 0:
        raise ValueError("histogram is empty")
    fit_t0 = t0 is None and irf_sigma > 0
    t0_fixed = 0.0 if t0 is None else float(t0)

    centers = 0.5 * (edges[:-1] + edges[1:])
    if initial is None:
        peak = centers[np.argmax(counts)]
        after = counts * (centers > peak)
        mean_tail = np.sum(after * (centers - peak)) / max(after.sum(), 1)
        tau_guess = max(mean_tail, h.bin_width)
        initial = (tau_guess,) if model == "single" else (tau_guess * 0.7, tau_guess * 8, 0.9)
        t0_guess = peak
    else:
        t0_guess = centers[np.argmax(counts)]
    theta0 = [np.log(initial[0])]
    if model == "double":
        theta0 += [np.log(max(initial[1] - initial[0], 1.0)), np.log(initial[2] / (1 - initial[2]))]
    if fit_t0:
        theta0.append(t0_guess - min(irf_sigma, initial[0]))

    def nll(theta):
        taus, fracs, t = _unpack(theta, model, fit_t0, t0_fixed)
        p = _bin_probs(edges, taus, fracs, irf_sigma, t)
        p = np.maximum(p, 1e-300)
        return -np.sum(counts * np.log(p)) / n

    res = minimize(nll, np.asarray(theta0, float), method="Nelder-Mead",
                   options={"maxiter": max_iter, "xatol": 1e-10, "fatol": 1e-15, "adaptive": True})
    res = minimize(nll, res.x, method="BFGS", options={"gtol": 1e-10, "maxiter": max_iter})
    theta = res.x
    # Precision loss near the optimum is harmless if the remaining Newton
    # step would gain a negligible amount of log-likelihood. The likelihood
    # carries rounding noise near 1e-11, so BFGS's own gradient is useless
    # there; use central differences with steps well above the noise.
    ok = bool(res.success) or (res.status == 2 and 0 <= _newton_gain(nll, theta, n) < 1e-3)
    if not ok:
        raise FitError(f"lifetime fit did not converge: {res.message}", res)
    taus, fracs, tfit = _unpack(theta, model, fit_t0, t0_fixed)

    # natural parameters for Fisher information: tau..., f1, t0
    def natural_probs(q):
        if model == "double":
            ts, fs = (q[0], q[1]), (q[2], 1 - q[2])
            rest = q[3:]
        else:
            ts, fs = (q[0],), (1.0,)
            rest = q[1:]
        return _bin_probs(edges, ts, fs, irf_sigma, rest[0] if fit_t0 else t0_fixed)

    q = list(taus) + ([fracs[0]] if model == "double" else []) + ([tfit] if fit_t0 else [])
    q = np.asarray(q, float)
    p = natural_probs(q)
    jac = np.empty((len(p), len(q)))
    for k in range(len(q)):
        step = 1e-5 * max(abs(q[k]), 1.0)
        qp, qm = q.copy(), q.copy()
        qp[k] += step
        qm[k] -= step
        jac[:, k] = (natural_probs(qp) - natural_probs(qm)) / (2 * step)
    pos = p > 0
    fisher = n * (jac[pos].T / p[pos]) @ jac[pos]
    try:
        cov = np.linalg.inv(fisher)
        err = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        err = np.full(len(q), np.nan)
    ntau = len(taus)
    frac_err = np.array([err[ntau], err[ntau]]) if model == "double" else np.zeros(1)
    return LifetimeFit(
        model=model, lifetimes=np.asarray(taus), lifetime_errors=err[:ntau],
        fractions=np.asarray(fracs), fraction_errors=frac_err,
        t0=float(tfit), t0_error=float(err[-1]) if fit_t0 else 0.0,
        converged=True, n_counts=int(n), nll=float(res.fun),
    )


def start_stop_histogram(times: np.ndarray, period_ps: float, bin_width: int,
                         lo: int, hi: int) -> CoincidenceHistogram:
    """Histogram of click times relative to the preceding laser pulse."""
    if (hi - lo) % bin_width:
        raise ValueError("hi - lo must be a multiple of bin_width")
    t = np.asarray(times, float)
    rel = np.mod(t - lo, period_ps) + lo
    counts, _ = np.histogram(rel, bins=np.arange(lo, hi + bin_width, bin_width))
    span = hi - lo
    return CoincidenceHistogram(int(bin_width), int(span), counts.astype(np.int64),
                                int(round(lo + span / 2)))
