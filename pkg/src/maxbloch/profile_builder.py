"""Multiscale expansion of the transverse-magnetic system.

The approximate solution is a three-term hierarchy
``U0 + sqrt(eps) U1 + eps U2`` whose coefficients live on the mode lattice
and depend on the slow variables (t, x, y).  The leading coefficients are
fixed by polarization conditions and evolved by the reduced model; both
correctors follow in closed form once the leading data is known.  This
module lifts initial data onto the polarized mode classes, fills the
corrector slots, and samples ("assembles") the hierarchy on a two-scale
(x, y, theta0) grid for a given scale separation epsilon.

Every stored slot also carries its exact slow-time derivative, obtained by
differentiating the closed forms with the product rule; assembled time
derivatives are therefore free of finite-difference noise, which matters
when measuring residual decay rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import modeops as mo
from . import reduced_model as rm
from .domain import Grid
from .errors import ProfileError, ValidationError
from .quantum import LevelSystem
from .spectral import (
    BX, BY, BZ, EX, EY, EZ,
    Mode,
    ModeClass,
    PhaseLattice,
    classify_mode,
    pi_projector,
    resonant_alpha1,
)

SlotKey = tuple[int, int, Mode]  # (expansion order j, decay index kappa, mode)

_TM_FIELD_COMPONENTS = {BX, BY, EZ}


@dataclass
class ProfileSet:
    """Sparse container for hierarchy coefficients and their derivatives.

    Three families of slots, all keyed by (j, kappa, mode): 6-vector field
    coefficients, diagonal population vectors, and coherence matrices.
    Slots that a polarization condition forces to vanish are simply absent;
    ``provenance`` records how each stored slot was obtained ("lifted",
    "evolved", "closed-form", "zero-free-choice").
    """

    sys: LevelSystem
    lat: PhaseLattice
    grid: Grid
    t: float = 0.0
    field: dict = dc_field(default_factory=dict)
    pop: dict = dc_field(default_factory=dict)
    coh: dict = dc_field(default_factory=dict)
    field_dt: dict = dc_field(default_factory=dict)
    pop_dt: dict = dc_field(default_factory=dict)
    coh_dt: dict = dc_field(default_factory=dict)
    provenance: dict = dc_field(default_factory=dict)

    def set_field(self, j, kappa, mode, value, origin, dt=None):
        key = (j, kappa, mode)
        self.field[key] = value
        self.provenance[("field",) + key] = origin
        if dt is not None:
            self.field_dt[key] = dt

    def set_pop(self, j, kappa, mode, value, origin, dt=None):
        key = (j, kappa, mode)
        self.pop[key] = value
        self.provenance[("pop",) + key] = origin
        if dt is not None:
            self.pop_dt[key] = dt

    def set_coh(self, j, kappa, mode, value, origin, dt=None):
        key = (j, kappa, mode)
        self.coh[key] = value
        self.provenance[("coh",) + key] = origin
        if dt is not None:
            self.coh_dt[key] = dt

    # -- mode-dict views of the leading order --------------------------------

    def leading_field_modes(self, cls_filter=None) -> dict:
        out = {}
        for (j, kappa, mode), val in self.field.items():
            if j != 0 or kappa != 0:
                continue
            if cls_filter is None or classify_mode(self.lat, mode) in cls_filter:
                out[mode] = val
        return out

    def leading_pop_modes(self) -> dict:
        return {mode: val for (j, kappa, mode), val in self.pop.items()
                if j == 0 and kappa == 0}

    def leading_coh_modes(self) -> dict:
        return {mode: val for (j, kappa, mode), val in self.coh.items()
                if j == 0 and kappa == 1}

    def has_coherence_data(self) -> bool:
        return any(np.any(v) for v in self.leading_coh_modes().values())

    # -- invariants ----------------------------------------------------------

    def check_polarizations(self, tol: float = 1e-12):
        """Raise if any stored slot sits where a polarization forces zero."""
        lat = self.lat
        for (j, kappa, mode), val in self.field.items():
            cls = classify_mode(lat, mode)
            if j == 0:
                if kappa != 0:
                    raise ProfileError("leading field must carry no decay index")
                if cls is ModeClass.NON_CHARACTERISTIC:
                    raise ProfileError(f"leading field on evanescent mode {mode}")
            if j == 1 and kappa > 1:
                raise ProfileError("first corrector field with decay index > 1")
            if j == 2 and kappa > 1:
                raise ProfileError("second corrector field with decay index > 1")
        for (j, kappa, mode), val in self.pop.items():
            if j == 0:
                if kappa != 0:
                    raise ProfileError("leading populations must carry no decay index")
                if classify_mode(lat, mode) not in (ModeClass.C_ZERO, ModeClass.MEAN):
                    raise ProfileError(f"leading populations on moving mode {mode}")
            if j == 1 and kappa > 1:
                raise ProfileError("first corrector populations with decay index > 1")
            if j == 2 and kappa > 2:
                raise ProfileError("second corrector populations with decay index > 2")
        res = resonant_alpha1(self.sys, self.lat)
        for (j, kappa, mode), val in self.coh.items():
            if j == 0:
                if kappa != 1:
                    raise ProfileError("leading coherences live on decay index 1 only")
                n = val.shape[-1]
                for m_ in range(n):
                    for n_ in range(n):
                        if np.any(np.abs(val[..., m_, n_]) > tol):
                            if m_ == n_:
                                raise ProfileError("diagonal entry stored as coherence")
                            if res.get((m_ + 1, n_ + 1)) != mode[1]:
                                raise ProfileError(
                                    f"leading coherence ({m_ + 1},{n_ + 1}) at"
                                    f" non-resonant temporal index {mode[1]}")
            if j == 1 and kappa > 1:
                raise ProfileError("first corrector coherences with decay index > 1")
            if j == 2 and kappa > 2:
                raise ProfileError("second corrector coherences with decay index > 2")


# ---------------------------------------------------------------------------
# lifting initial data
# ---------------------------------------------------------------------------

def lift_initial_data(sys: LevelSystem, lat: PhaseLattice, grid: Grid,
                      u_ini: dict, pop_ini: dict, coh_ini: dict | None = None) -> ProfileSet:
    """Split single-phase initial data onto the polarized mode classes.

    ``u_ini`` maps a spatial harmonic index beta (length-d tuple) to a
    6-vector field; each nonzero beta is distributed onto the three kernel
    projectors of the classes (beta, beta), (beta, -beta), (beta, 0), while
    beta = 0 goes to the mean slot.  ``pop_ini`` maps beta to a diagonal
    population vector, stored on the frozen class.  ``coh_ini`` maps
    (m, n, beta) with 1-based m != n to a scalar field; the entry is placed
    at the unique resonant temporal index of the transition, and a nonzero
    entry for a transition that resonates with no lattice mode is rejected.
    """
    ps = ProfileSet(sys=sys, lat=lat, grid=grid, t=0.0)
    d = lat.d
    zero = (0,) * d
    for beta, val in u_ini.items():
        beta = tuple(int(b) for b in np.atleast_1d(beta))
        val = np.asarray(val, dtype=complex)
        if val.shape != grid.shape + (6,):
            raise ProfileError(f"field data for beta={beta} has shape {val.shape}")
        if not np.any(val):
            continue
        if beta == zero:
            ps.set_field(0, 0, (zero, zero), val.copy(), "lifted")
            continue
        for alpha1, proj in (((beta, beta), pi_projector(lat, (beta, beta))),
                             ((beta, tuple(-b for b in beta)),
                              pi_projector(lat, (beta, tuple(-b for b in beta)))),
                             ((beta, zero), pi_projector(lat, (beta, zero)))):
            part = val @ proj.T
            if np.any(np.abs(part) > 0):
                ps.set_field(0, 0, alpha1, part, "lifted")
    for beta, val in (pop_ini or {}).items():
        beta = tuple(int(b) for b in np.atleast_1d(beta))
        val = np.asarray(val, dtype=complex)
        if val.shape != grid.shape + (sys.n_levels,):
            raise ProfileError(f"population data for beta={beta} has shape {val.shape}")
        if np.any(val):
            ps.set_pop(0, 0, (beta, zero), val.copy(), "lifted")
    if coh_ini:
        res = resonant_alpha1(sys, lat)
        per_mode: dict[Mode, np.ndarray] = {}
        n_lev = sys.n_levels
        for (m, n, beta), val in coh_ini.items():
            beta = tuple(int(b) for b in np.atleast_1d(beta))
            val = np.asarray(val, dtype=complex)
            if not np.any(val):
                continue
            if m == n:
                raise ProfileError(f"({m},{n}) is a population entry, not a coherence")
            if (m, n) not in res:
                raise ProfileError(
                    f"coherence ({m},{n}) cannot be lifted: transition energy"
                    f" {sys.omega[m - 1] - sys.omega[n - 1]:.6g} resonates with no"
                    " lattice mode")
            mode = (beta, res[(m, n)])
            if mode not in per_mode:
                per_mode[mode] = np.zeros(grid.shape + (n_lev, n_lev), dtype=complex)
            per_mode[mode][..., m - 1, n - 1] += val
        for mode, mat in per_mode.items():
            ps.set_coh(0, 1, mode, mat, "lifted")
    ps.check_polarizations()
    return ps


def reduced_state_from_leading(ps: ProfileSet, tm: bool = True) -> rm.ReducedState:
    """View the leading-order slots of a profile set as a reduced state."""
    movers = ps.leading_field_modes((ModeClass.C_PLUS, ModeClass.C_MINUS))
    gratings = ps.leading_field_modes((ModeClass.C_ZERO,))
    mean = ps.leading_field_modes((ModeClass.MEAN,))
    mean_field = next(iter(mean.values())).copy() if mean else None
    coh = {}
    for mode, mat in ps.leading_coh_modes().items():
        n = mat.shape[-1]
        for m_ in range(n):
            for n_ in range(n):
                if np.any(mat[..., m_, n_]):
                    coh[(m_ + 1, n_ + 1, mode)] = mat[..., m_, n_].copy()
    return rm.ReducedState(
        sys=ps.sys, lat=ps.lat, grid=ps.grid,
        u_modes={k: v.copy() for k, v in movers.items()},
        space_modes={k: v.copy() for k, v in gratings.items()},
        mean_field=mean_field,
        pop_modes={k: v.copy() for k, v in ps.leading_pop_modes().items()},
        coh_modes=coh, t=ps.t, tm=tm,
    )


def leading_profiles_from_state(state: rm.ReducedState, with_dt: bool = True) -> ProfileSet:
    """Leading-order slots (and their exact slow-time derivatives)."""
    ps = ProfileSet(sys=state.sys, lat=state.lat, grid=state.grid, t=state.t)
    du = rm.field_rhs(state.sys, state.lat, state.grid, state.u_modes,
                      state.pop_modes, state.mean_field, tail=state.tail) if with_dt else {}
    dpop = rm.pop_rhs(state.sys, state.lat, state.u_modes, state.pop_modes,
                      state.mean_field, tail=state.tail) if with_dt else {}
    for mode, val in state.u_modes.items():
        ps.set_field(0, 0, mode, val, "evolved", dt=du.get(mode))
    for mode, dval in du.items():
        if mode not in state.u_modes:
            # excited but not yet populated: zero value, nonzero growth rate
            ps.set_field(0, 0, mode, np.zeros_like(dval), "evolved", dt=dval)
    for mode, val in state.space_modes.items():
        ps.set_field(0, 0, mode, val, "evolved", dt=np.zeros_like(val))
    if np.any(state.mean_field):
        zero = mo.zero_mode(state.lat.d)
        ps.set_field(0, 0, (zero, zero), state.mean_field, "evolved",
                     dt=np.zeros_like(state.mean_field))
    for mode, val in state.pop_modes.items():
        dt_val = dpop.get(mode)
        ps.set_pop(0, 0, mode, val, "evolved",
                   dt=dt_val if dt_val is not None else (np.zeros_like(val) if with_dt else None))
    for mode, dval in dpop.items():
        if mode not in state.pop_modes:
            ps.set_pop(0, 0, mode, np.zeros_like(dval), "evolved", dt=dval)
    n_lev = state.sys.n_levels
    per_mode: dict[Mode, np.ndarray] = {}
    for (m, n, mode), val in state.coh_modes.items():
        if mode not in per_mode:
            per_mode[mode] = np.zeros(state.grid.shape + (n_lev, n_lev), dtype=complex)
        per_mode[mode][..., m - 1, n - 1] = val
    for mode, mat in per_mode.items():
        ps.set_coh(0, 1, mode, mat, "evolved")
    return ps


# ---------------------------------------------------------------------------
# transverse-magnetic correctors
# ---------------------------------------------------------------------------

def _require_tm(sys: LevelSystem, grid: Grid):
    if grid.nz != 1:
        raise ProfileError("transverse-magnetic correctors require nz == 1")
    if np.any(np.abs(sys.dipole[:, :, :2]) > 0):
        raise ProfileError("transverse-magnetic correctors require a z-aligned dipole")
    if sys.gamma <= 0:
        raise ProfileError("corrector construction requires gamma > 0")


def _tm_scalar_modes(field_modes: dict, comp: int) -> dict:
    return {mode: val[..., comp] for mode, val in field_modes.items()
            if np.any(val[..., comp])}


def build_corrector1_tm(sys: LevelSystem, lat: PhaseLattice, ps: ProfileSet) -> ProfileSet:
    """Fill the first corrector of a prepared transverse-magnetic hierarchy.

    Closed forms: the longitudinal magnetic slot on moving modes is a
    transverse derivative of the envelope divided by the temporal symbol;
    on frozen gratings the transverse magnetic slot derives from the
    grating; the mean longitudinal slot inverts the transverse derivative
    against the mean flux; coherences are the damped symbol inverse of the
    field/population commutator.  All undetermined components are set to
    zero.  The mean inversion requires the x-derivative of the mean
    transverse field to have zero y-average at every x; violating data is
    rejected.
    """
    _require_tm(sys, ps.grid)
    if ps.has_coherence_data():
        raise ProfileError("corrector pipeline requires prepared data (no leading coherences)")
    grid, d = ps.grid, lat.d
    zero = (0,) * d
    movers = ps.leading_field_modes((ModeClass.C_PLUS, ModeClass.C_MINUS))
    movers_dt = {m: ps.field_dt.get((0, 0, m)) for m in movers}
    gratings = ps.leading_field_modes((ModeClass.C_ZERO,))
    mean = ps.leading_field_modes((ModeClass.MEAN,))
    have_dt = all(v is not None for v in movers_dt.values()) and \
        all((0, 0, m) in ps.pop_dt for m in ps.leading_pop_modes())

    # moving modes: longitudinal magnetic component from the envelope
    for mode, val in movers.items():
        coeff = 1.0 / (1j * lat.dot(mode[1]))
        slot = np.zeros_like(val)
        slot[..., BX] = coeff * grid.deriv(val[..., EZ], axis=1)
        dt_slot = None
        if have_dt:
            dt_slot = np.zeros_like(val)
            dt_slot[..., BX] = coeff * grid.deriv(movers_dt[mode][..., EZ], axis=1)
        ps.set_field(1, 0, mode, slot, "closed-form", dt=dt_slot)

    # frozen gratings: transverse magnetic component from the grating
    for mode, val in gratings.items():
        coeff = 1.0 / (1j * lat.dot(mode[0]))
        slot = np.zeros_like(val)
        slot[..., BY] = coeff * grid.deriv(val[..., BX], axis=1)
        ps.set_field(1, 0, mode, slot, "closed-form",
                     dt=np.zeros_like(val) if have_dt else None)

    # mean: longitudinal component from the mean transverse flux
    if mean:
        mean_val = next(iter(mean.values()))
        flux = grid.deriv(mean_val[..., BY].real, axis=0)
        y_avg = np.mean(flux, axis=1)
        if np.max(np.abs(y_avg)) > 1e-10 * max(1.0, np.max(np.abs(flux))):
            raise ProfileError(
                "mean transverse field has x-flux with nonzero y-average;"
                " the mean corrector slot is not integrable")
        slot = np.zeros_like(mean_val)
        slot[..., BX] = grid.invert_deriv(flux, axis=1)
        if np.any(slot):
            ps.set_field(1, 0, (zero, zero), slot, "closed-form",
                         dt=np.zeros_like(mean_val) if have_dt else None)

    # coherence corrector
    pop = ps.leading_pop_modes()
    eg = mo.dipole_modes(sys, movers)
    c1 = rm.first_coherence_modes(sys, lat, eg, pop, a_max=lat.a_max)
    dc1 = {}
    if have_dt:
        eg_dt = mo.dipole_modes(sys, {m: movers_dt[m] for m in movers})
        pop_dt = {m: ps.pop_dt[(0, 0, m)] for m in pop}
        x_dt = mo.dict_add(
            mo.convolve(eg_dt, pop, mo.commutator_with_diag, lat.a_max),
            mo.convolve(eg, pop_dt, mo.commutator_with_diag, lat.a_max))
        dc1 = mo.dict_scale(mo.coherence_symbol_inverse(sys, lat, x_dt, kappa=0), 1j)
    for mode, val in c1.items():
        ps.set_coh(1, 0, mode, val, "closed-form", dt=dc1.get(mode))
    return ps


def build_corrector2_tm(sys: LevelSystem, lat: PhaseLattice, ps: ProfileSet) -> ProfileSet:
    """Fill the second corrector of a prepared transverse-magnetic hierarchy.

    The moving-mode transverse pair follows from the order-0 cascade after
    the envelope equation removes its secular part; evanescent and frozen
    modes come from inverting the 2x2 transverse symbol against the
    quadratic source; populations acquire temporally oscillating slots from
    the field/coherence commutator; coherences take one more damped symbol
    inverse.  Undetermined components are zero.
    """
    _require_tm(sys, ps.grid)
    grid, d = ps.grid, lat.d
    zero = (0,) * d
    movers = ps.leading_field_modes((ModeClass.C_PLUS, ModeClass.C_MINUS))
    pop = ps.leading_pop_modes()
    gz = sys.dipole_z
    omdiff = sys.omega_diff_matrix

    c1 = {mode: val for (j, kappa, mode), val in ps.coh.items() if j == 1 and kappa == 0}
    dc1 = {mode: ps.coh_dt.get((1, 0, mode)) for mode in c1}
    have_dt = all(v is not None for v in dc1.values()) and \
        all((0, 0, m) in ps.field_dt for m in movers) and \
        all((0, 0, m) in ps.pop_dt for m in pop)

    eg = mo.dipole_modes(sys, movers)
    x = mo.convolve(eg, pop, mo.commutator_with_diag, lat.a_max)
    if have_dt:
        eg_dt = mo.dipole_modes(sys, {m: ps.field_dt[(0, 0, m)] for m in movers})
        pop_dt = {m: ps.pop_dt[(0, 0, m)] for m in pop}
        x_dt = mo.dict_add(
            mo.convolve(eg_dt, pop, mo.commutator_with_diag, lat.a_max),
            mo.convolve(eg, pop_dt, mo.commutator_with_diag, lat.a_max))

    def shifted_trace(cd):
        return {mode: np.einsum("mn,...nm->...", gz, (omdiff - 1j * sys.gamma) * val)
                for mode, val in cd.items()}

    t1 = shifted_trace(c1)
    t2 = mo.trace_modes(gz, x)
    if have_dt:
        t1_dt = shifted_trace({m: dc1[m] for m in c1})
        t2_dt = mo.trace_modes(gz, x_dt)

    bx1 = {mode: val for (j, kappa, mode), val in ps.field.items() if j == 1 and kappa == 0}

    # source G on non-moving modes; D on moving modes
    source_modes = sorted(set(t1) | set(t2))
    for mode in source_modes:
        cls = classify_mode(lat, mode)
        q0, q1 = lat.dot(mode[0]), lat.dot(mode[1])
        t1v = t1.get(mode, 0.0)
        t2v = t2.get(mode, 0.0)
        if cls in rm.MOVER_CLASSES:
            e0 = movers.get(mode)
            dval = -1j * t1v + 1j * t2v
            if e0 is not None:
                dval = dval + grid.deriv(e0[..., EZ], axis=1, order=2) / (1j * q1)
            coeff = 1.0 / (4j * q0)
            sign = 1.0 if cls is ModeClass.C_PLUS else -1.0
            slot = np.zeros(grid.shape + (6,), dtype=complex)
            slot[..., BY] = coeff * dval
            slot[..., EZ] = sign * coeff * dval
            dt_slot = None
            if have_dt:
                ddval = -1j * t1_dt.get(mode, 0.0) + 1j * t2_dt.get(mode, 0.0)
                if e0 is not None:
                    ddval = ddval + grid.deriv(
                        ps.field_dt[(0, 0, mode)][..., EZ], axis=1, order=2) / (1j * q1)
                dt_slot = np.zeros(grid.shape + (6,), dtype=complex)
                dt_slot[..., BY] = coeff * ddval
                dt_slot[..., EZ] = sign * coeff * ddval
            ps.set_field(2, 0, mode, slot, "closed-form", dt=dt_slot)
        elif cls is not ModeClass.MEAN:
            gval = 1j * t1v - 1j * t2v
            b1 = bx1.get(mode)
            if b1 is not None:
                gval = gval - grid.deriv(b1[..., BX], axis=1)
            det = q1 ** 2 - q0 ** 2
            slot = np.zeros(grid.shape + (6,), dtype=complex)
            slot[..., BY] = 1j * (-q0) * gval / det
            slot[..., EZ] = 1j * q1 * gval / det
            dt_slot = None
            if have_dt:
                dgval = 1j * t1_dt.get(mode, 0.0) - 1j * t2_dt.get(mode, 0.0)
                db1 = ps.field_dt.get((1, 0, mode))
                if db1 is not None:
                    dgval = dgval - grid.deriv(db1[..., BX], axis=1)
                dt_slot = np.zeros(grid.shape + (6,), dtype=complex)
                dt_slot[..., BY] = 1j * (-q0) * dgval / det
                dt_slot[..., EZ] = 1j * q1 * dgval / det
            ps.set_field(2, 0, mode, slot, "closed-form", dt=dt_slot)

    # coherence and population correctors from the field/coherence commutator
    y = mo.convolve(eg, c1, mo.matrix_commutator, lat.a_max)
    if have_dt:
        y_dt = mo.dict_add(
            mo.convolve(eg_dt, c1, mo.matrix_commutator, lat.a_max),
            mo.convolve(eg, {m: dc1[m] for m in c1}, mo.matrix_commutator, lat.a_max))
    c2 = mo.dict_scale(mo.coherence_symbol_inverse(sys, lat, mo.offdiag_part(y), kappa=0), 1j)
    dc2 = {}
    if have_dt:
        dc2 = mo.dict_scale(
            mo.coherence_symbol_inverse(sys, lat, mo.offdiag_part(y_dt), kappa=0), 1j)
    for mode, val in c2.items():
        ps.set_coh(2, 0, mode, val, "closed-form", dt=dc2.get(mode))
    idx = np.arange(sys.n_levels)
    for mode, val in y.items():
        if all(a == 0 for a in mode[1]):
            continue  # solvability handled by the rate equation
        q1 = lat.dot(mode[1])
        slot = -val[..., idx, idx] / q1
        dt_slot = None
        if have_dt and mode in y_dt:
            dt_slot = -y_dt[mode][..., idx, idx] / q1
        ps.set_pop(2, 0, mode, slot, "closed-form", dt=dt_slot)
    return ps


# ---------------------------------------------------------------------------
# two-scale assembly
# ---------------------------------------------------------------------------

@dataclass
class AssembledFields:
    """Hierarchy sampled on the (x, y, theta0) grid at one time."""

    bx: np.ndarray
    by: np.ndarray
    e: np.ndarray
    rho: np.ndarray
    reality_defect: float
    epsilon: float
    t: float


def _theta_phases(lat: PhaseLattice, ntheta: int, alpha0) -> np.ndarray:
    phases = None
    for a in alpha0:
        theta = 2.0 * np.pi * np.arange(ntheta) / ntheta
        f = np.exp(1j * a * theta)
        phases = f if phases is None else np.multiply.outer(phases, f)
    return phases


def assemble_uapp(ps: ProfileSet, epsilon: float, t: float, ntheta: int,
                  derivative: bool = False) -> AssembledFields:
    """Sample the hierarchy at scale separation epsilon and time t.

    The temporal phases and decay factors are evaluated exactly; stored
    slow-time derivative slots supply d/dt when ``derivative`` is set.
    Coefficient conjugate pairing makes the field components real; the
    largest imaginary remnant is reported as ``reality_defect``.
    """
    if ps.grid.nz != 1:
        raise ProfileError("two-scale assembly requires nz == 1")
    lat, grid, d = ps.lat, ps.grid, ps.lat.d
    if ntheta < 2 * lat.a_max + 2:
        raise ValidationError(
            f"ntheta={ntheta} cannot resolve modes up to a_max={lat.a_max}")
    theta_shape = (ntheta,) * d
    shape = (grid.nx, grid.ny) + theta_shape
    n_lev = ps.sys.n_levels
    comps = {BX: np.zeros(shape, dtype=complex), BY: np.zeros(shape, dtype=complex),
             EZ: np.zeros(shape, dtype=complex)}
    rho = np.zeros(shape + (n_lev, n_lev), dtype=complex)
    gamma = ps.sys.gamma
    sqe = np.sqrt(epsilon)

    def time_factor(j, kappa, mode):
        rate = (-1j * lat.dot(mode[1]) - kappa * gamma) / epsilon
        return sqe ** j * np.exp(rate * t), rate

    for key, val in ps.field.items():
        j, kappa, mode = key
        fac, rate = time_factor(j, kappa, mode)
        phases = _theta_phases(lat, ntheta, mode[0]) * fac
        if derivative:
            dt_val = ps.field_dt.get(key)
            if dt_val is None:
                raise ProfileError(f"missing slow-time derivative for field slot {key}")
            val = dt_val + rate * val
        for comp in (BX, BY, EZ):
            coeff = val[..., 0, comp]
            if np.any(coeff):
                comps[comp] += np.multiply.outer(coeff, phases)
        for comp in (BZ, EX, EY):
            if np.any(np.abs(val[..., comp]) > 1e-12):
                raise ProfileError("field slot carries non transverse-magnetic components")
    for key, val in ps.pop.items():
        j, kappa, mode = key
        fac, rate = time_factor(j, kappa, mode)
        phases = _theta_phases(lat, ntheta, mode[0]) * fac
        if derivative:
            dt_val = ps.pop_dt.get(key)
            if dt_val is None:
                raise ProfileError(f"missing slow-time derivative for population slot {key}")
            val = dt_val + rate * val
        idx = np.arange(n_lev)
        contrib = np.multiply.outer(val[..., 0, :], phases)  # (nx, ny, N, *theta)
        contrib = np.moveaxis(contrib, 2, -1)
        rho[..., idx, idx] += contrib
    for key, val in ps.coh.items():
        j, kappa, mode = key
        fac, rate = time_factor(j, kappa, mode)
        phases = _theta_phases(lat, ntheta, mode[0]) * fac
        if derivative:
            dt_val = ps.coh_dt.get(key)
            if dt_val is None:
                raise ProfileError(f"missing slow-time derivative for coherence slot {key}")
            val = dt_val + rate * val
        contrib = np.multiply.outer(val[..., 0, :, :], phases)  # (nx, ny, N, N, *theta)
        contrib = np.moveaxis(np.moveaxis(contrib, 2, -1), 2, -1)
        rho += contrib

    defect = max(float(np.max(np.abs(c.imag))) for c in comps.values()) if comps else 0.0
    return AssembledFields(
        bx=comps[BX].real.copy(), by=comps[BY].real.copy(), e=comps[EZ].real.copy(),
        rho=rho, reality_defect=defect, epsilon=epsilon, t=t)


# ---------------------------------------------------------------------------
# evolution pipeline
# ---------------------------------------------------------------------------

class TmProfilePipeline:
    """Evolves the leading profiles and rebuilds the full hierarchy on demand.

    The reduced trajectory does not depend on the scale separation, so a
    single pipeline serves a whole ladder of epsilon values.  Queries must
    come in nondecreasing time order per replay; asking for an earlier time
    restarts the integration from the initial state.
    """

    def __init__(self, state0: rm.ReducedState, dt_slow: float = 2e-3):
        _require_tm(state0.sys, state0.grid)
        if state0.coh_modes:
            raise ProfileError("corrector pipeline requires prepared data")
        mean_e = np.max(np.abs(state0.mean_field[..., EZ])) if np.any(state0.mean_field) else 0.0
        mean_bx = np.max(np.abs(state0.mean_field[..., BX])) if np.any(state0.mean_field) else 0.0
        if max(mean_e, mean_bx) > 1e-12:
            raise ProfileError("mean longitudinal/electric components must vanish")
        self.state0 = state0.copy()
        self.dt_slow = float(dt_slow)
        self._state = state0.copy()
        self._cache: dict[float, ProfileSet] = {}

    @property
    def tail_mass(self) -> float:
        return self._state.tail.dropped

    def _advance_to(self, t: float):
        if t < self._state.t - 1e-12:
            self._state = self.state0.copy()
        while self._state.t < t - 1e-12:
            step = min(self.dt_slow, t - self._state.t)
            self._state = rm.advance(self._state, step)

    def profiles_at(self, t: float) -> ProfileSet:
        key = round(float(t), 12)
        if key in self._cache:
            return self._cache[key]
        self._advance_to(t)
        ps = leading_profiles_from_state(self._state, with_dt=True)
        build_corrector1_tm(self._state.sys, self._state.lat, ps)
        build_corrector2_tm(self._state.sys, self._state.lat, ps)
        self._cache[key] = ps
        return ps

    def assemble(self, epsilon: float, t: float, ntheta: int,
                 derivative: bool = False) -> AssembledFields:
        return assemble_uapp(self.profiles_at(t), epsilon, t, ntheta, derivative=derivative)
