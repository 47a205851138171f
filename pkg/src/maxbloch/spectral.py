"""Phase-lattice combinatorics and the linear algebra of the fast scales.

The fast oscillations of the system live on a 2d-dimensional integer lattice
of modes alpha = (alpha0, alpha1): alpha0 indexes harmonics of the spatial
carrier phases, alpha1 harmonics of the temporal ones.  A mode is
characteristic for the one-dimensional field operator exactly when
alpha1 = +alpha0 (right movers), alpha1 = -alpha0 (left movers) or
alpha1 = 0 (frozen spatial gratings); everything else is evanescent.  This
module classifies modes, detects matter resonances, and builds the constant
6x6 projectors / pseudo-inverses attached to each class, plus the
eigenstructure of the transverse operator and the bicharacteristic averages
used by the slow-envelope analysis.

The 6-vector component order is (Bx, By, Bz, Ex, Ey, Ez).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ResonanceError, ValidationError
from .quantum import LevelSystem

#: component indices of the 6-vector field
BX, BY, BZ, EX, EY, EZ = range(6)

Mode = tuple[tuple[int, ...], tuple[int, ...]]


def _cross_matrix(axis: int) -> np.ndarray:
    """3x3 matrix C with C v = e_axis x v."""
    c = np.zeros((3, 3))
    i, j, k = axis, (axis + 1) % 3, (axis + 2) % 3
    c[j, k] = -1.0
    c[k, j] = 1.0
    return c


def _symbol_matrix(axis: int) -> np.ndarray:
    """Symmetric 6x6 coefficient of the axis-derivative in the field operator."""
    cm = _cross_matrix(axis)
    a = np.zeros((6, 6))
    a[:3, 3:] = cm
    a[3:, :3] = -cm
    return a


A_X = _symbol_matrix(0)
A_Y = _symbol_matrix(1)
A_Z = _symbol_matrix(2)


def _projector(vectors) -> np.ndarray:
    p = np.zeros((6, 6))
    for v in vectors:
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        p += np.outer(v, v)
    return p


# Constant projectors onto the eigenspaces of A_X for eigenvalues +1, -1, 0.
# They coincide with the kernel projectors of the 1D field symbol on the
# right-moving, left-moving and frozen mode classes respectively.
PI_PLUS = _projector([(0, 1, 0, 0, 0, -1), (0, 0, 1, 0, 1, 0)])
PI_MINUS = _projector([(0, 1, 0, 0, 0, 1), (0, 0, 1, 0, -1, 0)])
PI_ZERO = np.diag([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])


class ModeClass(Enum):
    MEAN = "mean"
    C_PLUS = "c_plus"
    C_MINUS = "c_minus"
    C_ZERO = "c_zero"
    NON_CHARACTERISTIC = "non_characteristic"


@dataclass(frozen=True)
class ModeIndex:
    """One lattice mode: spatial index alpha0, temporal index alpha1, decay kappa."""

    alpha0: tuple[int, ...]
    alpha1: tuple[int, ...]
    kappa: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha0", tuple(int(a) for a in self.alpha0))
        object.__setattr__(self, "alpha1", tuple(int(a) for a in self.alpha1))
        if len(self.alpha0) != len(self.alpha1):
            raise ValidationError("alpha0 and alpha1 must have the same dimension")
        if self.kappa < 0:
            raise ValidationError("decay index kappa must be nonnegative")

    @property
    def mode(self) -> Mode:
        return (self.alpha0, self.alpha1)

    @classmethod
    def scalar(cls, a0: int, a1: int, kappa: int = 0) -> "ModeIndex":
        return cls((a0,), (a1,), kappa)


def as_mode(alpha) -> Mode:
    """Normalize a ModeIndex or a raw (alpha0, alpha1) pair to tuples."""
    if isinstance(alpha, ModeIndex):
        return alpha.mode
    a0, a1 = alpha
    if isinstance(a0, int):
        a0, a1 = (a0,), (a1,)
    return (tuple(int(a) for a in a0), tuple(int(a) for a in a1))


def mode_add(a: Mode, b: Mode) -> Mode:
    return (tuple(x + y for x, y in zip(a[0], b[0])),
            tuple(x + y for x, y in zip(a[1], b[1])))


def mode_neg(a: Mode) -> Mode:
    return (tuple(-x for x in a[0]), tuple(-x for x in a[1]))


def mode_sup(a: Mode) -> int:
    return max((abs(x) for x in a[0] + a[1]), default=0)


@dataclass(frozen=True)
class PhaseLattice:
    """Carrier wave vector and lattice truncation data.

    The wave vector must satisfy a small-divisor margin on the truncated
    lattice: |beta . k| >= c_dioph * |beta|^(-a) for every nonzero integer
    beta with |beta|_inf <= 2 * a_max.  Construction fails otherwise.
    """

    k: np.ndarray
    a: float
    c_dioph: float
    a_max: int = 8

    def __post_init__(self):
        k = np.atleast_1d(np.asarray(self.k, dtype=float))
        object.__setattr__(self, "k", k)
        if k.ndim != 1 or k.size < 1:
            raise ValidationError("wave vector must be a nonempty 1-d array")
        if np.any(k <= 0):
            raise ValidationError("wave vector components must be strictly positive")
        if self.a <= 0 or self.c_dioph <= 0:
            raise ValidationError("small-divisor exponent and constant must be positive")
        if self.a_max < 1:
            raise ValidationError("truncation radius a_max must be >= 1")
        beta, margin = self.worst_margin()
        if margin < 1.0:
            raise ValidationError(
                f"wave vector violates the small-divisor bound at beta={beta}:"
                f" |beta.k| = {abs(self.dot(beta)):.3e} <"
                f" {self.c_dioph:.3e} * |beta|^-{self.a}"
            )

    @property
    def d(self) -> int:
        return self.k.size

    def dot(self, beta) -> float:
        return float(np.dot(self.k, np.asarray(beta, dtype=float)))

    def worst_margin(self) -> tuple[tuple[int, ...], float]:
        """Smallest ratio |beta.k| / (c |beta|^-a) over the checked lattice."""
        worst_beta, worst = None, np.inf
        rng = range(-2 * self.a_max, 2 * self.a_max + 1)
        for beta in itertools.product(rng, repeat=self.d):
            if all(b == 0 for b in beta):
                continue
            bound = self.c_dioph * max(abs(b) for b in beta) ** (-self.a)
            ratio = abs(self.dot(beta)) / bound
            if ratio < worst:
                worst, worst_beta = ratio, beta
        return worst_beta, worst

    def modes(self, radius: int | None = None):
        """All modes with |alpha0|_inf, |alpha1|_inf <= radius (default a_max)."""
        r = self.a_max if radius is None else radius
        rng = range(-r, r + 1)
        for a0 in itertools.product(rng, repeat=self.d):
            for a1 in itertools.product(rng, repeat=self.d):
                yield (a0, a1)


def classify_mode(lat: PhaseLattice, alpha) -> ModeClass:
    a0, a1 = as_mode(alpha)
    zero0 = all(a == 0 for a in a0)
    zero1 = all(a == 0 for a in a1)
    if zero0 and zero1:
        return ModeClass.MEAN
    if not zero0 and a1 == a0:
        return ModeClass.C_PLUS
    if not zero0 and a1 == tuple(-a for a in a0):
        return ModeClass.C_MINUS
    if zero1:
        return ModeClass.C_ZERO
    return ModeClass.NON_CHARACTERISTIC


_CONST_PROJECTORS = {
    ModeClass.MEAN: np.eye(6),
    ModeClass.C_PLUS: PI_PLUS,
    ModeClass.C_MINUS: PI_MINUS,
    ModeClass.C_ZERO: PI_ZERO,
    ModeClass.NON_CHARACTERISTIC: np.zeros((6, 6)),
}


def pi_projector(lat: PhaseLattice, alpha) -> np.ndarray:
    """Orthogonal projector onto the kernel of the 1D field symbol at alpha.

    Constant on each mode class: identity on the mean mode, the fixed
    rank-2 matrices on the three characteristic classes, zero elsewhere.
    """
    return _CONST_PROJECTORS[classify_mode(lat, alpha)].copy()


def m1_symbol(lat: PhaseLattice, alpha) -> np.ndarray:
    """The 1D field symbol -i(k.alpha1) I + i(k.alpha0) A_X at the mode."""
    a0, a1 = as_mode(alpha)
    return -1j * lat.dot(a1) * np.eye(6) + 1j * lat.dot(a0) * A_X


def m1_pseudo_inverse(lat: PhaseLattice, alpha) -> np.ndarray:
    """Inverse of the 1D field symbol on the range of (1 - pi), zero on the kernel."""
    a0, a1 = as_mode(alpha)
    q0, q1 = lat.dot(a0), lat.dot(a1)
    out = np.zeros((6, 6), dtype=complex)
    for mu, proj in ((1.0, PI_PLUS), (-1.0, PI_MINUS), (0.0, PI_ZERO)):
        denom = 1j * (q0 * mu - q1)
        if abs(denom) > 1e-14 * max(abs(q0), abs(q1), 1.0):
            out += proj / denom
    return out


def group_velocity(lat: PhaseLattice, alpha) -> float:
    """Transport speed of a characteristic mode: +1, -1 or 0."""
    cls = classify_mode(lat, alpha)
    if cls is ModeClass.C_PLUS:
        return 1.0
    if cls is ModeClass.C_MINUS:
        return -1.0
    if cls is ModeClass.C_ZERO:
        return 0.0
    raise ValidationError(f"group velocity undefined on mode class {cls.value}")


def diffraction_coeff(lat: PhaseLattice, alpha) -> float:
    """Transverse dispersion coefficient: +-1/(2 k.alpha0) on movers, 0 on gratings."""
    cls = classify_mode(lat, alpha)
    a0, _ = as_mode(alpha)
    if cls is ModeClass.C_PLUS:
        return 1.0 / (2.0 * lat.dot(a0))
    if cls is ModeClass.C_MINUS:
        return -1.0 / (2.0 * lat.dot(a0))
    if cls is ModeClass.C_ZERO:
        return 0.0
    raise ValidationError(f"diffraction coefficient undefined on mode class {cls.value}")


# ---------------------------------------------------------------------------
# matter resonances
# ---------------------------------------------------------------------------

def resonance_tolerance(sys: LevelSystem) -> float:
    return 1e-9 * float(np.max(np.abs(sys.omega)))


def resonant_set(sys: LevelSystem, lat: PhaseLattice, tol: float | None = None):
    """Triples (m, n, alpha1) with k.alpha1 equal to a transition energy.

    Levels are 1-based.  For each ordered pair (m, n) the temporal index
    alpha1 within the truncation must be unique; two candidates within the
    tolerance mean the lattice cannot separate the pair and construction
    fails.
    """
    if tol is None:
        tol = resonance_tolerance(sys)
    if tol < 0:
        raise ValidationError("resonance tolerance must be nonnegative")
    rng = range(-lat.a_max, lat.a_max + 1)
    alpha1_candidates = list(itertools.product(rng, repeat=lat.d))
    out = set()
    n_lev = sys.n_levels
    for m in range(1, n_lev + 1):
        for n in range(1, n_lev + 1):
            target = float(sys.omega[m - 1] - sys.omega[n - 1])
            hits = [a1 for a1 in alpha1_candidates if abs(lat.dot(a1) - target) <= tol]
            if len(hits) > 1:
                raise ResonanceError(
                    f"ambiguous resonance for levels ({m},{n}):"
                    f" candidates {hits} all match {target:.6g} within {tol:.2e}"
                )
            if hits:
                out.add((m, n, hits[0]))
    return out


def resonant_alpha1(sys: LevelSystem, lat: PhaseLattice, tol: float | None = None):
    """Map (m, n) -> unique resonant alpha1 (levels 1-based)."""
    return {(m, n): a1 for (m, n, a1) in resonant_set(sys, lat, tol)}


def mode_inverse_omega_gamma(sys: LevelSystem, lat: PhaseLattice,
                             m: int, n: int, alpha1, kappa: int) -> complex:
    """Inverse of the coherence symbol on one matrix entry and mode.

    Returns 1 / (i (omega(m,n) - k.alpha1) + gamma (1 - kappa)).  On a
    resonant entry with kappa = 1 the symbol vanishes and the caller must
    branch to the resonant evolution equation instead; that case raises.
    """
    alpha1 = tuple(int(a) for a in np.atleast_1d(alpha1))
    target = float(sys.omega[m - 1] - sys.omega[n - 1])
    denom = 1j * (target - lat.dot(alpha1)) + sys.gamma * (1 - kappa)
    if abs(denom) <= max(resonance_tolerance(sys), 1e-13):
        raise ResonanceError(
            f"division on resonant mode: levels ({m},{n}), alpha1={alpha1}, kappa={kappa}"
        )
    return 1.0 / denom


# ---------------------------------------------------------------------------
# transverse operator: eigenstructure and semigroup
# ---------------------------------------------------------------------------

def m2_symbol(eta: float, zeta: float) -> np.ndarray:
    return eta * A_Y + zeta * A_Z


def m2_spectral(eta: float, zeta: float):
    """Eigenpairs of the transverse symbol at one frequency (eta, zeta).

    Returns [(0, p0), (+r, p_plus), (-r, p_minus)] with r = hypot(eta, zeta);
    each projector is a rank-2 orthogonal projector and the three sum to the
    identity.  Built in closed form from z = (0, eta, zeta), its rotation
    z_perp = (0, -zeta, eta) and the propagation direction e_x.
    """
    r = float(np.hypot(eta, zeta))
    if r == 0.0:
        raise ValidationError("transverse eigenstructure undefined at zero frequency")
    z = np.array([0.0, eta, zeta]) / r
    zp = np.array([0.0, -zeta, eta]) / r
    ex = np.array([1.0, 0.0, 0.0])
    zero6 = np.zeros(3)

    def vec(b, e):
        return np.concatenate([b, e]) / np.sqrt(2.0)

    p0 = _projector([np.concatenate([z, zero6]), np.concatenate([zero6, z])])
    p_plus = _projector([vec(ex, zp) * np.sqrt(2.0), vec(zp, -ex) * np.sqrt(2.0)])
    p_minus = _projector([vec(-ex, zp) * np.sqrt(2.0), vec(zp, ex) * np.sqrt(2.0)])
    return [(0.0, p0), (r, p_plus), (-r, p_minus)]


def semigroup_m2(u: np.ndarray, dT: float, ly: float = 2 * np.pi,
                 lz: float = 2 * np.pi) -> np.ndarray:
    """Apply exp(-dT * M2(0, dy, dz)) to a 6-vector field on a periodic grid.

    ``u`` has shape (ny, nz, 6).  The evolution is exact in Fourier space:
    every frequency is decomposed on the three eigenprojectors and each part
    picks up the phase exp(-i dT lambda_k).  Unitary on the L2 norm.
    """
    u = np.asarray(u)
    if u.ndim != 3 or u.shape[-1] != 6:
        raise ValidationError("semigroup_m2 expects a field of shape (ny, nz, 6)")
    ny, nz = u.shape[0], u.shape[1]
    eta = 2 * np.pi * np.fft.fftfreq(ny, d=ly / ny)
    zeta = 2 * np.pi * np.fft.fftfreq(nz, d=lz / nz)
    spec = np.fft.fft2(u, axes=(0, 1))
    out = np.empty_like(spec)
    for iy in range(ny):
        for iz in range(nz):
            if eta[iy] == 0.0 and zeta[iz] == 0.0:
                out[iy, iz] = spec[iy, iz]
                continue
            acc = np.zeros(6, dtype=complex)
            for lam, proj in m2_spectral(eta[iy], zeta[iz]):
                acc += np.exp(-1j * dT * lam) * (proj @ spec[iy, iz])
            out[iy, iz] = acc
    res = np.fft.ifft2(out, axes=(0, 1))
    if not np.iscomplexobj(u):
        return res.real
    return res


# ---------------------------------------------------------------------------
# bicharacteristic averages
# ---------------------------------------------------------------------------

def _lambda_grid(k_class, ny: int, nz: int, ly: float, lz: float) -> np.ndarray:
    sign = {0: 0.0, "0": 0.0, "+": 1.0, "+1": 1.0, 1: 1.0, "-": -1.0, "-1": -1.0, -1: -1.0}[k_class]
    eta = 2 * np.pi * np.fft.fftfreq(ny, d=ly / ny)
    zeta = 2 * np.pi * np.fft.fftfreq(nz, d=lz / nz)
    return sign * np.hypot(eta[:, None], zeta[None, :])


def birkhoff_average(k_class, u: np.ndarray, S: float, dt: float,
                     ly: float = 2 * np.pi, lz: float = 2 * np.pi) -> np.ndarray:
    """Finite-window average along the bicharacteristics of one wave family.

    ``u`` holds uniform samples over an interval of length ``S``: shape
    (nT, ny, nz, ...) with (nT - 1) * dt == S.  The average at the window's
    base time is (1/S) int_0^S shift_s(u)(. + s) ds where the shift is the
    scalar Fourier phase exp(i s lambda_k(eta, zeta)); the integral uses the
    trapezoid rule on the given samples.  Class 0 reduces to the plain time
    average.
    """
    u = np.asarray(u)
    if u.ndim < 3:
        raise ValidationError("expected samples of shape (nT, ny, nz, ...)")
    n_t = u.shape[0]
    if S < 2 * dt:
        raise ValidationError(f"window S={S} shorter than two grid steps ({2 * dt})")
    if abs((n_t - 1) * dt - S) > 1e-9 * max(S, 1.0):
        raise ValidationError("sample count inconsistent with window length")
    lam = _lambda_grid(k_class, u.shape[1], u.shape[2], ly, lz)
    lam = lam.reshape((1,) + lam.shape + (1,) * (u.ndim - 3))
    s = (dt * np.arange(n_t)).reshape((n_t,) + (1,) * (u.ndim - 1))
    spec = np.fft.fft2(u, axes=(1, 2))
    shifted = np.exp(1j * s * lam) * spec
    weights = np.full(n_t, dt)
    weights[0] = weights[-1] = dt / 2.0
    acc = np.tensordot(weights, shifted, axes=(0, 0)) / S
    out = np.fft.ifft2(acc, axes=(0, 1))
    if not np.iscomplexobj(u):
        return out.real
    return out
