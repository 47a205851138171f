"""Atomic level data and the matter-side algebra of the laser-matter system.

The material is an ensemble of identical atoms confined to their N lowest
levels.  Its state is an N x N Hermitian density matrix: the diagonal holds
level occupations (populations), the off-diagonal holds level correlations
(coherences).  This module owns the static atomic data (energies, dipole
matrix, transition rates, temperature) and the pure matrix operations built
on it: the relaxation operator, dipole coupling, commutators, and the
frequency-shift/damping map acting entrywise on coherences.

All operations are pure functions of immutable inputs and broadcast over
arbitrary leading axes, so a "matrix" argument may equally be a field of
matrices sampled on a grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

#: relative tolerance used when validating detailed balance of a full rate matrix
DETAILED_BALANCE_RTOL = 1e-9


# ---------------------------------------------------------------------------
# matrix-level helpers (no atomic data required)
# ---------------------------------------------------------------------------

def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def split_diag_offdiag(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a matrix (field) into its diagonal and off-diagonal parts."""
    rho = np.asarray(rho)
    n = rho.shape[-1]
    idx = np.arange(n)
    diag = np.zeros_like(rho)
    diag[..., idx, idx] = rho[..., idx, idx]
    return diag, rho - diag


def pauli_sharp_w(w: np.ndarray, rho_d: np.ndarray) -> np.ndarray:
    """Gain/loss action of a nonnegative rate matrix on a diagonal matrix.

    Entry (n, n) of the result is sum_k [w(k,n) rho(k,k) - w(n,k) rho(n,n)];
    off-diagonal entries are zero.  The result is traceless by telescoping.
    """
    w = np.asarray(w, dtype=float)
    rho_d = np.asarray(rho_d)
    n = w.shape[0]
    idx = np.arange(n)
    pops = rho_d[..., idx, idx]
    rates = pauli_rates(w, pops)
    out = np.zeros_like(rho_d)
    out[..., idx, idx] = rates
    return out


def pauli_rates(w: np.ndarray, pops: np.ndarray) -> np.ndarray:
    """Vectorized gain/loss rates for a population vector field (..., N)."""
    gain = pops @ w                      # sum_k pops(k) w(k, n)
    loss = pops * np.sum(w, axis=1)      # pops(n) sum_k w(n, k)
    return gain - loss


def dipole_couple_matrix(dipole: np.ndarray, e_vec: np.ndarray) -> np.ndarray:
    """Componentwise product E . Gamma, summed over the three field axes.

    No complex conjugation is applied to either factor.
    """
    e_vec = np.asarray(e_vec)
    return np.tensordot(dipole, e_vec, axes=([2], [0])) if e_vec.ndim == 1 else (
        dipole[..., 0] * e_vec[..., 0]
        + dipole[..., 1] * e_vec[..., 1]
        + dipole[..., 2] * e_vec[..., 2]
    )


def trace_prod(gamma_z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Trace of (gamma_z @ x) over the last two axes; broadcasts over fields."""
    return np.einsum("mn,...nm->...", gamma_z, x)


# ---------------------------------------------------------------------------
# the atomic species
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelSystem:
    """Static data of one atomic species.

    Attributes
    ----------
    omega : (N,) increasing positive level energies (dimensionless).
    dipole : (N, N, 3) complex Hermitian dipole matrix of 3-vectors.
        Transverse-magnetic runs use only the last (z) component.
    pauli : (N, N) nonnegative transition rates with zero diagonal,
        satisfying detailed balance at ``temperature``.
    gamma : coherence damping rate (>= 0; the asymptotic machinery
        requires > 0, but 0 is accepted for reversibility diagnostics).
    temperature : positive temperature fixing the equilibrium state.
    """

    omega: np.ndarray
    dipole: np.ndarray
    pauli: np.ndarray
    gamma: float
    temperature: float

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        dipole = np.asarray(self.dipole, dtype=complex)
        pauli = np.asarray(self.pauli, dtype=float)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "dipole", dipole)
        object.__setattr__(self, "pauli", pauli)
        self._validate()

    def _validate(self):
        n = self.omega.size
        if n < 2:
            raise ValidationError("need at least two levels")
        if self.omega[0] <= 0:
            raise ValidationError("level energies must be strictly positive")
        if np.any(np.diff(self.omega) < 0):
            raise ValidationError("level energies must be sorted increasingly")
        if self.dipole.shape != (n, n, 3):
            raise ValidationError(f"dipole must have shape ({n},{n},3)")
        herm_defect = np.max(np.abs(self.dipole - np.conj(np.swapaxes(self.dipole, 0, 1))))
        if herm_defect > 1e-12:
            raise ValidationError(f"dipole matrix is not Hermitian (defect {herm_defect:.2e})")
        if self.pauli.shape != (n, n):
            raise ValidationError(f"pauli matrix must have shape ({n},{n})")
        if np.any(self.pauli < 0):
            raise ValidationError("pauli rates must be nonnegative")
        if np.any(np.abs(np.diag(self.pauli)) > 0):
            raise ValidationError("pauli matrix must have zero diagonal")
        if self.gamma < 0:
            raise ValidationError("gamma must be nonnegative")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        bad = detailed_balance_defects(self.pauli, self.omega, self.temperature,
                                       rtol=DETAILED_BALANCE_RTOL)
        if bad:
            n_, k_, defect = bad[0]
            raise ValidationError(
                f"pauli rates violate detailed balance at pair ({n_},{k_}):"
                f" relative defect {defect:.2e}"
            )

    @property
    def n_levels(self) -> int:
        return self.omega.size

    @property
    def dipole_z(self) -> np.ndarray:
        return self.dipole[:, :, 2]

    @property
    def omega_diff_matrix(self) -> np.ndarray:
        """Matrix of transition energies omega(m) - omega(n)."""
        return self.omega[:, None] - self.omega[None, :]

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_upper_rates(cls, omega, gamma, temperature, dipole, pauli_upper):
        """Build the full rate matrix from its strict upper triangle.

        The lower triangle is filled by detailed balance at ``temperature``:
        w(k, n) = w(n, k) * exp((omega(k) - omega(n)) / temperature) for n < k,
        so downward transitions dominate and diag(exp(-omega/T)) is stationary.
        """
        omega = np.asarray(omega, dtype=float)
        upper = np.asarray(pauli_upper, dtype=float)
        n = omega.size
        w = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                w[i, j] = upper[i, j]
                w[j, i] = upper[i, j] * np.exp((omega[j] - omega[i]) / temperature)
        return cls(omega=omega, dipole=np.asarray(dipole, dtype=complex),
                   pauli=w, gamma=gamma, temperature=temperature)

    @classmethod
    def tm(cls, omega, gamma, temperature, dipole_z, pauli_upper=None, pauli_full=None):
        """Species for transverse-magnetic runs: dipole entries along z only."""
        omega = np.asarray(omega, dtype=float)
        n = omega.size
        gz = np.asarray(dipole_z, dtype=complex)
        dipole = np.zeros((n, n, 3), dtype=complex)
        dipole[:, :, 2] = gz
        if (pauli_upper is None) == (pauli_full is None):
            raise ValidationError("give exactly one of pauli_upper / pauli_full")
        if pauli_full is not None:
            return cls(omega=omega, dipole=dipole, pauli=np.asarray(pauli_full, float),
                       gamma=gamma, temperature=temperature)
        return cls.from_upper_rates(omega, gamma, temperature, dipole, pauli_upper)


def detailed_balance_defects(w, omega, temperature, rtol=DETAILED_BALANCE_RTOL):
    """Return [(n, k, defect), ...] (1-based) where detailed balance fails.

    The balance relation is w(n,k) exp(-omega(n)/T) = w(k,n) exp(-omega(k)/T),
    the unique orientation under which the thermal state is a fixed point of
    the gain/loss operator.
    """
    w = np.asarray(w, dtype=float)
    omega = np.asarray(omega, dtype=float)
    n = omega.size
    bad = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            expected = w[j, i] * np.exp((omega[i] - omega[j]) / temperature)
            scale = max(abs(w[i, j]), abs(expected), 1e-300)
            defect = abs(w[i, j] - expected) / scale
            if defect > rtol and (abs(w[i, j]) > 0 or abs(expected) > 0):
                bad.append((i + 1, j + 1, defect))
    return bad


# ---------------------------------------------------------------------------
# density matrices
# ---------------------------------------------------------------------------

@dataclass
class DensityMatrix:
    """Thin wrapper around an N x N complex matrix with Hermiticity checks."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=complex)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValidationError("density matrix must be square")
        self.entries = entries

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.entries - self.entries.conj().T)))

    def validate(self, tol: float = 1e-12) -> None:
        if self.hermiticity_defect() > tol:
            raise ValidationError("density matrix is not Hermitian")
        if abs(np.imag(np.trace(self.entries))) > tol:
            raise ValidationError("density matrix trace is not real")

    @property
    def diag(self) -> np.ndarray:
        return split_diag_offdiag(self.entries)[0]

    @property
    def offdiag(self) -> np.ndarray:
        return split_diag_offdiag(self.entries)[1]

    @classmethod
    def from_populations(cls, pops) -> "DensityMatrix":
        return cls(np.diag(np.asarray(pops, dtype=complex)))


# ---------------------------------------------------------------------------
# operations tied to a species
# ---------------------------------------------------------------------------

def omega_diff(sys: LevelSystem, m: int, n: int) -> float:
    """Transition energy omega(m) - omega(n) for 1-based level indices."""
    if not (1 <= m <= sys.n_levels and 1 <= n <= sys.n_levels):
        raise IndexError(f"level indices ({m},{n}) out of range 1..{sys.n_levels}")
    return float(sys.omega[m - 1] - sys.omega[n - 1])


def pauli_sharp(sys: LevelSystem, rho_d: np.ndarray) -> np.ndarray:
    """Gain/loss relaxation of populations; see :func:`pauli_sharp_w`."""
    return pauli_sharp_w(sys.pauli, np.asarray(rho_d))


def relaxation_q(sys: LevelSystem, rho: np.ndarray) -> np.ndarray:
    """Relaxation operator: population gain/loss minus coherence damping."""
    rho_d, rho_od = split_diag_offdiag(np.asarray(rho))
    return pauli_sharp_w(sys.pauli, rho_d) - sys.gamma * rho_od


def omega_gamma_apply(sys: LevelSystem, c: np.ndarray) -> np.ndarray:
    """Entrywise (omega(n,p) - i gamma) c(n,p); equals [Omega, c] when gamma=0."""
    return (sys.omega_diff_matrix - 1j * sys.gamma) * np.asarray(c)


def dipole_couple(sys: LevelSystem, e_vec: np.ndarray) -> np.ndarray:
    """Dipole momentum matrix E . Gamma (componentwise, no conjugation)."""
    return dipole_couple_matrix(sys.dipole, e_vec)


def gibbs_populations(sys: LevelSystem) -> np.ndarray:
    weights = np.exp(-sys.omega / sys.temperature)
    return weights / weights.sum()


def gibbs_state(sys: LevelSystem) -> np.ndarray:
    """Thermal equilibrium: diagonal exp(-omega/T), normalized to unit trace."""
    return np.diag(gibbs_populations(sys)).astype(complex)
