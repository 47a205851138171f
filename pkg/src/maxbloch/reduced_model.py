"""Limiting slow dynamics: envelope transport/dispersion plus rate equations.

At leading order the moving field modes satisfy scalar Schrodinger-type
envelope equations (transport along x, transverse dispersion, quadratic
matter coupling), populations satisfy a rate equation whose transition
rates are quadratic in the field envelope, and resonant coherences satisfy
a linear commutator ODE in the intermediate time.  The mode bookkeeping is
shared with the profile builder, so the right-hand sides evaluated here are
exactly the time derivatives used when assembling residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import modeops as mo
from .domain import Grid
from .errors import ValidationError
from .quantum import LevelSystem, pauli_rates
from .spectral import (
    Mode,
    ModeClass,
    PhaseLattice,
    classify_mode,
    diffraction_coeff,
    group_velocity,
    m2_spectral,
    pi_projector,
    resonant_alpha1,
)

MOVER_CLASSES = (ModeClass.C_PLUS, ModeClass.C_MINUS)


@dataclass
class ReducedState:
    """Leading-order slow state.

    ``u_modes`` holds the moving 6-vector field envelopes (right/left wave
    classes only); ``space_modes`` the frozen spatial gratings; ``mean_field``
    the lattice-mean field; ``pop_modes`` diagonal population vectors on the
    grating classes; ``coh_modes`` resonant coherence entries keyed by
    (m, n, mode) with 1-based levels.  ``t`` is the slow time, ``T`` the
    intermediate time.
    """

    sys: LevelSystem
    lat: PhaseLattice
    grid: Grid
    u_modes: dict = dc_field(default_factory=dict)
    space_modes: dict = dc_field(default_factory=dict)
    mean_field: Optional[np.ndarray] = None
    pop_modes: dict = dc_field(default_factory=dict)
    coh_modes: dict = dc_field(default_factory=dict)
    t: float = 0.0
    T: float = 0.0
    tm: bool = True
    tail: mo.TruncationLedger = dc_field(default_factory=mo.TruncationLedger)

    def __post_init__(self):
        if self.mean_field is None:
            self.mean_field = np.zeros(self.grid.shape + (6,), dtype=complex)
        for mode in self.u_modes:
            if classify_mode(self.lat, mode) not in MOVER_CLASSES:
                raise ValidationError(f"u_modes key {mode} is not a moving mode")
        for mode in self.space_modes:
            if classify_mode(self.lat, mode) is not ModeClass.C_ZERO:
                raise ValidationError(f"space_modes key {mode} is not a frozen grating")
        for mode in self.pop_modes:
            if classify_mode(self.lat, mode) not in (ModeClass.C_ZERO, ModeClass.MEAN):
                raise ValidationError(f"pop_modes key {mode} is not a grating/mean mode")

    def copy(self) -> "ReducedState":
        return ReducedState(
            sys=self.sys, lat=self.lat, grid=self.grid,
            u_modes={k: v.copy() for k, v in self.u_modes.items()},
            space_modes={k: v.copy() for k, v in self.space_modes.items()},
            mean_field=self.mean_field.copy(),
            pop_modes={k: v.copy() for k, v in self.pop_modes.items()},
            coh_modes={k: v.copy() for k, v in self.coh_modes.items()},
            t=self.t, T=self.T, tm=self.tm, tail=self.tail,
        )

    def total_population(self) -> float:
        """Grid mean of the level-summed mean-mode population (real part)."""
        zero = mo.zero_mode(self.lat.d)
        if zero not in self.pop_modes:
            return 0.0
        return float(np.mean(np.sum(self.pop_modes[zero].real, axis=-1)))

    def field_modes_with_mean(self) -> dict:
        """Moving modes plus the mean field, keyed by mode."""
        out = dict(self.u_modes)
        zero = mo.zero_mode(self.lat.d)
        if np.any(self.mean_field):
            out[zero] = self.mean_field
        return out


# ---------------------------------------------------------------------------
# quadratic matter coupling
# ---------------------------------------------------------------------------

def first_coherence_modes(sys: LevelSystem, lat: PhaseLattice, eg_modes: dict,
                          pop_modes: dict, a_max: int | None = None,
                          tail: mo.TruncationLedger | None = None) -> dict:
    """Coherence response i * inv_symbol([E.Gamma, N]) per product mode."""
    a_max = lat.a_max if a_max is None else a_max
    x = mo.convolve(eg_modes, pop_modes, mo.commutator_with_diag, a_max, tail)
    return mo.dict_scale(mo.coherence_symbol_inverse(sys, lat, x, kappa=0), 1j)


def nonlinear_pauli_rates(sys: LevelSystem, lat: PhaseLattice, e_modes: dict,
                          pop_modes: dict, tail: mo.TruncationLedger | None = None) -> dict:
    """Field-induced population transfer rates on the grating/mean modes.

    Evaluates the double-commutator expression
    -[E.Gamma, inv_symbol([E.Gamma, N]_od)]_diag, keeping only modes with
    vanishing temporal index.  The mean-mode rates sum to zero over levels
    (trace of a commutator), so total population is conserved.
    """
    eg = mo.dipole_modes(sys, e_modes)
    x = mo.convolve(eg, pop_modes, mo.commutator_with_diag, lat.a_max, tail)
    y = mo.coherence_symbol_inverse(sys, lat, mo.offdiag_part(x), kappa=0)
    z = mo.convolve(eg, y, mo.matrix_commutator, lat.a_max, tail)
    rates = {}
    for mode, val in z.items():
        if any(a != 0 for a in mode[1]):
            continue
        n = val.shape[-1]
        rates[mode] = -val[..., np.arange(n), np.arange(n)]
    return rates


def field_source_modes(sys: LevelSystem, lat: PhaseLattice, u_modes: dict,
                       pop_modes: dict, mean_field: np.ndarray | None = None,
                       a_max: int | None = None,
                       tail: mo.TruncationLedger | None = None) -> dict:
    """Projected matter source of the envelope equations, moving modes only.

    The electric-part source is i Tr(Gamma shift_damp(C1)) - i Tr(Gamma X)
    with X = [E.Gamma, N] per product mode and C1 the coherence response;
    the 6-vector (0, source) is then projected on the kernel projector of
    the mode's class.  Equivalent forms: the combination
    i Tr(Gamma (shift_damp o inv_symbol - 1) X) applied modewise.
    """
    a_max = lat.a_max if a_max is None else a_max
    fields = dict(u_modes)
    if mean_field is not None and np.any(mean_field):
        fields[mo.zero_mode(lat.d)] = mean_field
    eg = mo.dipole_modes(sys, fields)
    x = mo.convolve(eg, pop_modes, mo.commutator_with_diag, a_max, tail)
    c1 = mo.dict_scale(mo.coherence_symbol_inverse(sys, lat, x, kappa=0), 1j)
    omdiff = sys.omega_diff_matrix
    gamma = sys.gamma
    out = {}
    for mode, xval in x.items():
        if classify_mode(lat, mode) not in MOVER_CLASSES:
            continue
        shifted = (omdiff - 1j * gamma) * c1[mode]
        tvec = np.stack(
            [np.einsum("mn,...nm->...", sys.dipole[:, :, c], shifted)
             - np.einsum("mn,...nm->...", sys.dipole[:, :, c], xval)
             for c in range(3)], axis=-1)
        src = np.zeros(tvec.shape[:-1] + (6,), dtype=complex)
        src[..., 3:6] = 1j * tvec
        proj = pi_projector(lat, mode)
        out[mode] = src @ proj.T
    return out


def field_rhs(sys: LevelSystem, lat: PhaseLattice, grid: Grid, u_modes: dict,
              pop_modes: dict, mean_field: np.ndarray | None = None,
              tail: mo.TruncationLedger | None = None) -> dict:
    """Exact slow-time derivative of every moving field mode.

    Modes not yet present in ``u_modes`` but excited by the quadratic source
    are reported as well, so a zero-valued envelope still knows its growth
    rate.
    """
    src = field_source_modes(sys, lat, u_modes, pop_modes, mean_field, tail=tail)
    out = {}
    for mode, u in u_modes.items():
        v = group_velocity(lat, mode)
        a = diffraction_coeff(lat, mode)
        lap = grid.deriv(u, axis=1, order=2)
        if grid.nz > 1:
            lap = lap + grid.deriv(u, axis=2, order=2)
        rhs = -v * grid.deriv(u, axis=0) + 1j * a * lap
        if mode in src:
            rhs = rhs + src[mode]
        out[mode] = rhs
    for mode, s in src.items():
        if mode not in out:
            out[mode] = s
    return out


def pop_rhs(sys: LevelSystem, lat: PhaseLattice, u_modes: dict, pop_modes: dict,
            mean_field: np.ndarray | None = None,
            tail: mo.TruncationLedger | None = None) -> dict:
    """Exact slow-time derivative of every population mode."""
    fields = dict(u_modes)
    if mean_field is not None and np.any(mean_field):
        fields[mo.zero_mode(lat.d)] = mean_field
    rates = nonlinear_pauli_rates(sys, lat, fields, pop_modes, tail=tail)
    out = {}
    for mode, pops in pop_modes.items():
        rhs = pauli_rates(sys.pauli, pops)
        if mode in rates:
            rhs = rhs + rates[mode]
        out[mode] = rhs
    for mode, rate in rates.items():
        if mode not in out:
            out[mode] = rate
    return out


# ---------------------------------------------------------------------------
# time steppers
# ---------------------------------------------------------------------------

def _rk4_dict(y: dict, rhs, dt: float) -> dict:
    k1 = rhs(y)
    k2 = rhs(mo.dict_axpy(y, dt / 2.0, k1))
    k3 = rhs(mo.dict_axpy(y, dt / 2.0, k2))
    k4 = rhs(mo.dict_axpy(y, dt, k3))
    out = dict(y)
    for k in set().union(k1, k2, k3, k4):
        incr = (dt / 6.0) * (k1.get(k, 0) + 2 * k2.get(k, 0) + 2 * k3.get(k, 0) + k4.get(k, 0))
        out[k] = out.get(k, 0) + incr
    return out


def step_populations(sys: LevelSystem, lat: PhaseLattice, state: ReducedState,
                     dt: float) -> ReducedState:
    """RK4 update of the population modes with the field envelopes frozen."""
    if dt <= 0:
        raise ValidationError("dt must be positive")
    fields = state.field_modes_with_mean()

    def rhs(pop):
        return pop_rhs(sys, lat, fields, pop, tail=state.tail)

    out = state.copy()
    out.pop_modes = _rk4_dict(state.pop_modes, rhs, dt)
    out.t = state.t + dt
    return out


def _linear_phase(sys, lat, grid, mode, u, dt):
    """Exact transport + dispersion factor for one moving mode."""
    v = group_velocity(lat, mode)
    a = diffraction_coeff(lat, mode)
    kx = grid.wavenumbers(0)[:, None, None, None]
    ky = grid.wavenumbers(1)[None, :, None, None]
    ksq = ky ** 2
    if grid.nz > 1:
        kz = grid.wavenumbers(2)[None, None, :, None]
        ksq = ksq + kz ** 2
    phase = np.exp(-1j * dt * (v * kx + a * ksq))
    spec = np.fft.fftn(u, axes=(0, 1, 2))
    return np.fft.ifftn(spec * phase, axes=(0, 1, 2))


def step_field(sys: LevelSystem, lat: PhaseLattice, state: ReducedState,
               dt: float) -> ReducedState:
    """Strang step of the moving modes: exact linear phases around an RK4
    update of the matter coupling (populations frozen).  Mean and grating
    components are constant in slow time by construction."""
    if dt <= 0:
        raise ValidationError("dt must be positive")
    out = state.copy()
    half = {m: _linear_phase(sys, lat, state.grid, m, u, dt / 2.0)
            for m, u in state.u_modes.items()}

    def rhs(u_modes):
        return field_source_modes(sys, lat, u_modes, state.pop_modes,
                                  state.mean_field, tail=state.tail)

    mid = _rk4_dict(half, rhs, dt)
    out.u_modes = {m: _linear_phase(sys, lat, state.grid, m, u, dt / 2.0)
                   for m, u in mid.items()}
    out.t = state.t + dt
    return out


def step_coherence_T(sys: LevelSystem, state: ReducedState, dT: float) -> ReducedState:
    """RK4 update of the resonant coherence entries in intermediate time.

    The ODE is the commutator coupling d/dT c = i [E.Gamma, c] restricted to
    the stored resonant triples; the envelope is constant over the substep.
    Triples outside the resonant set stay identically zero because the
    commutator is projected back onto the stored key set.
    """
    if not state.coh_modes:
        out = state.copy()
        out.T = state.T + dT
        return out
    lat = state.lat
    eg = mo.dipole_modes(sys, state.field_modes_with_mean())
    keys = set(state.coh_modes)
    modes_of = {}
    for (m, n, mode) in keys:
        modes_of.setdefault(mode, []).append((m, n))
    n_lev = sys.n_levels

    def as_matrix_dict(coh):
        md = {}
        for (m, n, mode), val in coh.items():
            if mode not in md:
                md[mode] = np.zeros(state.grid.shape + (n_lev, n_lev), dtype=complex)
            md[mode][..., m - 1, n - 1] = val
        return md

    def rhs(coh):
        full = mo.convolve(eg, as_matrix_dict(coh), mo.matrix_commutator, lat.a_max,
                           state.tail)
        out_d = {}
        for mode, pairs in modes_of.items():
            if mode not in full:
                continue
            for (m, n) in pairs:
                out_d[(m, n, mode)] = 1j * full[mode][..., m - 1, n - 1]
        return out_d

    out = state.copy()
    out.coh_modes = _rk4_dict(state.coh_modes, rhs, dT)
    out.T = state.T + dT
    return out


def evolve_mean_T(state: ReducedState, dT: float) -> ReducedState:
    """Intermediate-time evolution of the mean field.

    No-op in the transverse-magnetic setting, where the mean components
    reduce to constants.  In the general setting the mean field is advected
    by the exact transverse semigroup, applied per x-slice.
    """
    out = state.copy()
    out.T = state.T + dT
    if state.tm:
        return out
    from .spectral import semigroup_m2

    mean = state.mean_field
    evolved = np.empty_like(mean)
    for ix in range(mean.shape[0]):
        evolved[ix] = semigroup_m2(mean[ix], dT, ly=state.grid.ly, lz=state.grid.lz)
    out.mean_field = evolved
    return out


def advance(state: ReducedState, dt: float, with_intermediate: bool = False,
            dT: float | None = None) -> ReducedState:
    """One coupled slow step: Strang splitting populations / field.

    When ``with_intermediate`` is set the intermediate-time blocks (mean
    semigroup and resonant coherences) advance by ``dT`` as well.
    """
    s = step_populations(state.sys, state.lat, state, dt / 2.0)
    s.t = state.t  # half-step bookkeeping; final time set below
    s = step_field(state.sys, state.lat, s, dt)
    s.t = state.t
    s = step_populations(state.sys, state.lat, s, dt / 2.0)
    s.t = state.t + dt
    if with_intermediate:
        step = dT if dT is not None else dt
        s = evolve_mean_T(s, step)
        s = step_coherence_T(state.sys, s, step)
        s.T = state.T + step
    return s


def m2_spectral_check(eta: float, zeta: float) -> float:
    """Largest defect of the transverse eigen-decomposition at one frequency."""
    from .spectral import m2_symbol

    pairs = m2_spectral(eta, zeta)
    recon = sum(lam * p for lam, p in pairs)
    return float(np.max(np.abs(recon - m2_symbol(eta, zeta))))
