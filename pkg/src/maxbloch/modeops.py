"""Arithmetic on sparse mode dictionaries.

Slow-envelope objects are stored as dictionaries mapping a lattice mode
(alpha0, alpha1) to a complex coefficient field over the spatial grid.
Quadratic couplings become convolutions over mode pairs; everything here is
truncated to the lattice radius, and the mass dropped by truncation can be
accumulated for diagnostics.
"""

from __future__ import annotations

import numpy as np

from .errors import ResonanceError
from .quantum import LevelSystem
from .spectral import Mode, PhaseLattice, mode_add, resonance_tolerance

ZERO_MODE_1D: Mode = ((0,), (0,))


def zero_mode(d: int) -> Mode:
    return ((0,) * d, (0,) * d)


def mode_within(mode: Mode, a_max: int) -> bool:
    a0, a1 = mode
    return max(map(abs, a0), default=0) <= a_max and max(map(abs, a1), default=0) <= a_max


class TruncationLedger:
    """Accumulates the L2 mass dropped by lattice truncation."""

    def __init__(self):
        self.dropped_sq = 0.0

    def drop(self, value: np.ndarray):
        self.dropped_sq += float(np.sum(np.abs(value) ** 2))

    @property
    def dropped(self) -> float:
        return float(np.sqrt(self.dropped_sq))


def dict_add(*dicts):
    out = {}
    for d in dicts:
        for k, v in d.items():
            out[k] = out.get(k, 0) + v
    return out


def dict_scale(d, s):
    return {k: s * v for k, v in d.items()}


def dict_axpy(y, a, x):
    """y + a * x on mode dictionaries."""
    out = dict(y)
    for k, v in x.items():
        out[k] = out.get(k, 0) + a * v
    return out


def dict_norm_sq(d) -> float:
    return sum(float(np.sum(np.abs(v) ** 2)) for v in d.values())


def convolve(a: dict, b: dict, combine, a_max: int, tail: TruncationLedger | None = None) -> dict:
    """Mode convolution out[p+q] += combine(a[p], b[q]), truncated at a_max."""
    out: dict[Mode, np.ndarray] = {}
    for ka, va in a.items():
        for kb, vb in b.items():
            k = mode_add(ka, kb)
            term = combine(va, vb)
            if not mode_within(k, a_max):
                if tail is not None:
                    tail.drop(term)
                continue
            if k in out:
                out[k] = out[k] + term
            else:
                out[k] = term
    return out


# -- combine kernels ---------------------------------------------------------

def commutator_with_diag(eg: np.ndarray, pops: np.ndarray) -> np.ndarray:
    """[eg, diag(pops)] for a matrix field and a population-vector field."""
    return eg * (pops[..., None, :] - pops[..., :, None])


def matrix_commutator(eg: np.ndarray, c: np.ndarray) -> np.ndarray:
    return eg @ c - c @ eg


def scalar_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a * b


# -- species-dependent transforms -------------------------------------------

def dipole_modes(sys: LevelSystem, field_modes: dict, grid_ndim: int = 3) -> dict:
    """Dipole-coupling matrices E_alpha . Gamma per mode.

    Accepts three field layouts per mode value: a scalar field (the
    transverse-magnetic convention E = (0, 0, e)), a 3-vector field, or a
    full 6-vector field whose last three components are the electric part.
    """
    gz = sys.dipole[:, :, 2]
    out = {}
    for mode, val in field_modes.items():
        if val.ndim == grid_ndim:
            out[mode] = val[..., None, None] * gz
        elif val.shape[-1] == 6:
            e = val[..., 3:6]
            out[mode] = np.einsum("...c,mnc->...mn", e, sys.dipole)
        elif val.shape[-1] == 3:
            out[mode] = np.einsum("...c,mnc->...mn", val, sys.dipole)
        else:
            raise ValueError(f"unrecognized field layout with shape {val.shape}")
    return out


def offdiag_part(modes: dict) -> dict:
    out = {}
    for k, v in modes.items():
        n = v.shape[-1]
        idx = np.arange(n)
        w = v.copy()
        w[..., idx, idx] = 0.0
        out[k] = w
    return out


def diag_part(modes: dict) -> dict:
    n_idx = None
    out = {}
    for k, v in modes.items():
        n = v.shape[-1]
        idx = np.arange(n) if n_idx is None else n_idx
        out[k] = v[..., idx, idx]
    return out


def coherence_symbol_inverse(sys: LevelSystem, lat: PhaseLattice, modes: dict,
                             kappa: int = 0) -> dict:
    """Apply the inverse coherence symbol entrywise to each mode.

    Divides entry (m, n) of the mode-alpha coefficient by
    i (omega(m,n) - k.alpha1) + gamma (1 - kappa).  Raises on a resonant
    entry when kappa = 1 makes the denominator vanish.
    """
    omdiff = sys.omega_diff_matrix
    tol = max(resonance_tolerance(sys), 1e-13)
    out = {}
    for (a0, a1), val in modes.items():
        denom = 1j * (omdiff - lat.dot(a1)) + sys.gamma * (1 - kappa)
        if np.any(np.abs(denom) <= tol):
            m, n = np.argwhere(np.abs(denom) <= tol)[0]
            raise ResonanceError(
                f"division on resonant mode: levels ({m + 1},{n + 1}), alpha1={a1}, kappa={kappa}"
            )
        out[(a0, a1)] = val / denom
    return out


def trace_modes(gz: np.ndarray, modes: dict) -> dict:
    """Trace of gz @ value per mode; collapses matrix fields to scalar fields."""
    return {k: np.einsum("mn,...nm->...", gz, v) for k, v in modes.items()}
