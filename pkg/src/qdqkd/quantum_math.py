"""Two-qubit polarization algebra.

Basis order everywhere is (HH, HV, VH, VV); the first qubit is the XX photon
(Alice), the second the X photon (Bob).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HBAR_UEV_NS = 0.6582119569

_S2 = 1.0 / np.sqrt(2.0)

POLARIZATIONS: dict[str, np.ndarray] = {
    "H": np.array([1.0, 0.0], dtype=complex),
    "V": np.array([0.0, 1.0], dtype=complex),
    "D": np.array([_S2, _S2], dtype=complex),
    "A": np.array([_S2, -_S2], dtype=complex),
    "R": np.array([_S2, 1j * _S2], dtype=complex),
    "L": np.array([_S2, -1j * _S2], dtype=complex),
}

ORTHOGONAL = {"H": "V", "V": "H", "D": "A", "A": "D", "R": "L", "L": "R"}

# Coincidences in these bases are key-bit errors for a phi+ source.
QBER_PROJECTORS = (("H", "V"), ("V", "H"), ("D", "A"), ("A", "D"))

PHI_PLUS = np.array([_S2, 0.0, 0.0, _S2], dtype=complex)
PHI_MINUS = np.array([_S2, 0.0, 0.0, -_S2], dtype=complex)
PSI_PLUS = np.array([0.0, _S2, _S2, 0.0], dtype=complex)
PSI_MINUS = np.array([0.0, _S2, -_S2, 0.0], dtype=complex)

_SIGMA_YY = np.kron(np.array([[0, -1j], [1j, 0]]), np.array([[0, -1j], [1j, 0]]))

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = -1e-9


@dataclass(frozen=True)
class FssModelParams:
    """Inputs of the FSS time-averaged cascade state.

    fss_S is in µeV, x_lifetime_tau in ps, noise_admixture_p is the weight of
    white noise mixed into the state.
    """

    fss_S: float
    x_lifetime_tau: float
    noise_admixture_p: float = 0.0

    def __post_init__(self):
        if self.fss_S < 0:
            raise ValueError(f"fss_S must be >= 0, got {self.fss_S}")
        if self.x_lifetime_tau <= 0:
            raise ValueError(f"x_lifetime_tau must be > 0, got {self.x_lifetime_tau}")
        if not 0.0 <= self.noise_admixture_p <= 1.0:
            raise ValueError(f"noise_admixture_p must be in [0, 1], got {self.noise_admixture_p}")

    @property
    def phase_ratio(self) -> float:
        """Dimensionless S*tau/hbar."""
        return self.fss_S * (self.x_lifetime_tau * 1e-3) / HBAR_UEV_NS


def noise_from_g2(g2_xx: float, g2_x: float) -> float:
    """White-noise weight derived from the measured g2(0) of both lines.

    Uses the mean of the two values, clamped to [0, 1].
    """
    return float(min(1.0, max(0.0, 0.5 * (g2_xx + g2_x))))


def product_state(a: str, b: str) -> np.ndarray:
    """|a>_A ⊗ |b>_B for labels in H, V, D, A, R, L."""
    return np.kron(POLARIZATIONS[a], POLARIZATIONS[b])


def projector(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def pure_density(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > 1e-12:
        raise ValueError(f"state is not normalized (norm={norm!r})")
    return projector(psi)


def cascade_state(phase: float) -> np.ndarray:
    """(|HH> + e^{i phase}|VV>)/sqrt(2)."""
    return np.array([_S2, 0.0, 0.0, _S2 * np.exp(1j * phase)], dtype=complex)


def check_density_matrix(rho) -> np.ndarray:
    """Return rho as a 4x4 complex array or raise ValueError if unphysical."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {rho.shape}")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > HERMITIAN_TOL:
        raise ValueError(f"matrix is not Hermitian (max deviation {herm:.3e})")
    tr = np.trace(rho)
    if abs(tr - 1.0) > TRACE_TOL:
        raise ValueError(f"trace must be 1, got {tr.real:.15g}")
    lmin = np.linalg.eigvalsh(rho).min()
    if lmin < PSD_TOL:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {lmin:.3e})")
    return rho


def expectation(rho: np.ndarray, psi: np.ndarray) -> float:
    return float(np.real(np.vdot(psi, rho @ psi)))


# Single-qubit projectors with exactly representable entries (|D><D| has 1/2, not 1/sqrt(2)^2).
_PROJ1 = {
    "H": np.array([[1, 0], [0, 0]], dtype=complex),
    "V": np.array([[0, 0], [0, 1]], dtype=complex),
    "D": 0.5 * np.array([[1, 1], [1, 1]], dtype=complex),
    "A": 0.5 * np.array([[1, -1], [-1, 1]], dtype=complex),
    "R": 0.5 * np.array([[1, -1j], [1j, 1]], dtype=complex),
    "L": 0.5 * np.array([[1, 1j], [-1j, 1]], dtype=complex),
}


def product_projector(a: str, b: str) -> np.ndarray:
    """|ab><ab| built from exact single-qubit projectors."""
    return np.kron(_PROJ1[a], _PROJ1[b])


def qber_from_rho(rho) -> float:
    """Expected BBM92 qubit error rate for a phi+ aligned setup.

    Half the summed weight of the four error projectors HV, VH, DA, AD.
    """
    rho = check_density_matrix(rho)
    return 0.5 * sum(float(np.real(np.sum(rho.T * product_projector(a, b)))) for a, b in QBER_PROJECTORS)


def fss_time_averaged_rho(params: FssModelParams) -> np.ndarray:
    """Cascade state averaged over the exciton decay time, plus white noise.

    The phase S t / hbar between HH and VV averaged over an exponential
    delay distribution leaves a coherence 1/2 / (1 - i S tau / hbar).
    """
    x = params.phase_ratio
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = rho[3, 3] = 0.5
    rho[3, 0] = 0.5 / (1.0 - 1j * x)
    rho[0, 3] = np.conj(rho[3, 0])
    p = params.noise_admixture_p
    return (1.0 - p) * rho + p * np.eye(4) / 4.0


def concurrence(rho) -> float:
    """Wootters concurrence.

    Uses the Hermitian form sqrt(rho) rho~ sqrt(rho). Eigenvalues at the
    rounding floor are set to zero before the square root, otherwise a rank
    deficient state picks up errors of order sqrt(machine epsilon).
    """
    rho = np.asarray(rho, dtype=complex)
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    s = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
    tilde = _SIGMA_YY @ rho.conj() @ _SIGMA_YY
    m = s @ tilde @ s
    lam2 = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    floor = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(lam2))))
    ev = np.sort(np.sqrt(np.where(lam2 > floor, lam2, 0.0)))[::-1]
    return float(max(0.0, ev[0] - ev[1] - ev[2] - ev[3]))


def bell_fidelity_max(rho) -> float:
    """Largest overlap with (|HH> + e^{i phi}|VV>)/sqrt(2) over phi."""
    rho = np.asarray(rho, dtype=complex)
    return float(0.5 * np.real(rho[0, 0] + rho[3, 3]) + abs(rho[0, 3]))


def state_fidelity(rho, sigma) -> float:
    """Uhlmann fidelity (squared convention) between two density matrices."""
    from scipy.linalg import sqrtm

    rho = np.asarray(rho, dtype=complex)
    sigma = np.asarray(sigma, dtype=complex)
    s = sqrtm(rho)
    inner = sqrtm(s @ sigma @ s)
    return float(np.real(np.trace(inner)) ** 2)


def random_density_matrix(rng: np.random.Generator, rank: int = 4) -> np.ndarray:
    """Ginibre-distributed random state of the given rank."""
    g = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def format_density_matrix(rho) -> str:
    """Four lines of four "re+imj" entries, 17 significant digits."""
    rho = np.asarray(rho, dtype=complex)
    lines = []
    for row in rho:
        lines.append(" ".join(f"{z.real:.17g}{z.imag:+.17g}j" for z in row))
    return "\n".join(lines) + "\n"


def parse_density_matrix(text: str) -> np.ndarray:
    rows = [line.split() for line in text.strip().splitlines() if line.strip()]
    if len(rows) != 4 or any(len(r) != 4 for r in rows):
        raise ValueError("density matrix text must have 4 lines of 4 entries")
    out = np.empty((4, 4), dtype=complex)
    for i, row in enumerate(rows):
        for j, tok in enumerate(row):
            try:
                if not tok.endswith("j"):
                    raise ValueError
                out[i, j] = complex(tok)
            except ValueError:
                raise ValueError(f"bad matrix entry {tok!r} at row {i}, column {j}") from None
    return out
