"""Polarization analysis of emitted photon pairs (Born-rule sampling)."""

from __future__ import annotations

import math

import numba
import numpy as np

from .quantum_math import ORTHOGONAL, POLARIZATIONS
from .source_model import FLAG_BACKGROUND, EventStream


def analyzer(label: str) -> np.ndarray:
    """2x2 matrix whose rows are the transmitted state and its orthogonal partner."""
    return np.stack([POLARIZATIONS[label], POLARIZATIONS[ORTHOGONAL[label]]])


BASES = {"HV": analyzer("H"), "DA": analyzer("D"), "RL": analyzer("R")}


def rotation(theta: float) -> np.ndarray:
    """Rotation of linear polarization by theta (radians)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


@numba.njit(cache=True)
def _sample_kernel(amp, ma, mb, u, out_a, out_b):
    # ma/mb: (1 or n, 2, 2) analyzer matrices; amplitudes projected on conj rows
    n = amp.shape[0]
    sa = ma.shape[0] > 1
    sb = mb.shape[0] > 1
    p = np.empty(4)
    for e in range(n):
        A = ma[e if sa else 0]
        B = mb[e if sb else 0]
        tot = 0.0
        for i in range(2):
            for j in range(2):
                z = (np.conj(A[i, 0]) * (amp[e, 0] * np.conj(B[j, 0]) + amp[e, 1] * np.conj(B[j, 1]))
                     + np.conj(A[i, 1]) * (amp[e, 2] * np.conj(B[j, 0]) + amp[e, 3] * np.conj(B[j, 1])))
                v = z.real * z.real + z.imag * z.imag
                p[2 * i + j] = v
                tot += v
        x = u[e] * tot
        k = 0
        acc = p[0]
        while k < 3 and x >= acc:
            k += 1
            acc += p[k]
        out_a[e] = k // 2
        out_b[e] = k % 2


@numba.njit(cache=True)
def _event_amplitudes(code, phase):
    n = code.shape[0]
    amp = np.zeros((n, 4), np.complex128)
    s = 1.0 / math.sqrt(2.0)
    for e in range(n):
        c = code[e]
        if c == 0:
            amp[e, 0] = s
            amp[e, 3] = s * complex(math.cos(phase[e]), math.sin(phase[e]))
        elif 1 <= c <= 4:
            amp[e, c - 1] = 1.0
    return amp


def sample_pair_outcomes(amp: np.ndarray, ma: np.ndarray, mb: np.ndarray,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample joint outcomes (0 = first row, 1 = second row) for each pair.

    ``amp`` has shape (n, 4); ``ma``/``mb`` are (2, 2) or (n, 2, 2) analyzer
    matrices acting on the XX and X photon respectively.
    """
    amp = np.ascontiguousarray(amp, np.complex128)
    n = len(amp)
    ma = np.asarray(ma, np.complex128).reshape(-1, 2, 2)
    mb = np.asarray(mb, np.complex128).reshape(-1, 2, 2)
    out_a = np.empty(n, np.int8)
    out_b = np.empty(n, np.int8)
    _sample_kernel(amp, ma, mb, rng.random(n), out_a, out_b)
    return out_a, out_b


def arm_outcomes(stream: EventStream, ma, mb, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Analyzer outcomes of the XX and X photon of every event.

    Background single photons are unpolarized and give random outcomes;
    the missing photon of a background event gets outcome -1.
    """
    n = len(stream)
    oa = np.full(n, -1, np.int8)
    ob = np.full(n, -1, np.int8)
    pair = (stream.flags & FLAG_BACKGROUND) == 0
    pidx = np.flatnonzero(pair)
    if len(pidx):
        ma_p = ma[pidx] if np.ndim(ma) == 3 else ma
        mb_p = mb[pidx] if np.ndim(mb) == 3 else mb
        amp = _event_amplitudes(stream.state_code[pidx], stream.phase[pidx])
        a, b = sample_pair_outcomes(amp, ma_p, mb_p, rng)
        oa[pidx] = a
        ob[pidx] = b
    bg = np.flatnonzero(~pair)
    coin = rng.integers(0, 2, len(bg)).astype(np.int8)
    has_xx = ~np.isnan(stream.xx_time[bg])
    oa[bg[has_xx]] = coin[has_xx]
    ob[bg[~has_xx]] = coin[~has_xx]
    return oa, ob
