"""Quantitative checks of the scale-separation claims.

Three measurements matter: the residual left by the assembled hierarchy in
the stiff equations (expected to shrink like sqrt(epsilon)), the distance
between the directly computed stiff solution and the assembled hierarchy
(same rate, for suitably small initial perturbations), and the decay rate
of coherences in unprepared runs (gamma/epsilon).  Everything is evaluated
spectrally on the grid the profiles were built on, and slopes are fitted by
least squares on log-log points.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import stats

from .domain import Grid, l2_norm, sup_norm
from .errors import ModelError, SolverDivergedError, ValidationError
from .profile_builder import TmProfilePipeline, assemble_uapp
from .quantum import LevelSystem, pauli_rates
from .spectral import PhaseLattice, birkhoff_average
from .stiff_solver import TmStiffSolver, dt_max, initialize


# ---------------------------------------------------------------------------
# residual of the assembled hierarchy
# ---------------------------------------------------------------------------

class _SpectralOps:
    """Cached two-scale derivative operators on the (x, y, theta) grid."""

    def __init__(self, lat: PhaseLattice, grid: Grid, ntheta: int, epsilon: float):
        d = lat.d
        self.axes = tuple(range(2 + d))
        shape = (grid.nx, grid.ny) + (ntheta,) * d

        def expand(vec, axis):
            shp = [1] * len(shape)
            shp[axis] = vec.size
            return vec.reshape(shp)

        beta = np.fft.fftfreq(ntheta, d=1.0 / ntheta)
        self.kx_eff = expand(grid.wavenumbers(0), 0) + sum(
            lat.k[j] * expand(beta, 2 + j) / epsilon for j in range(d))
        self.ky = expand(grid.wavenumbers(1), 1)

    def d_x_singular(self, f):
        return np.fft.ifftn(1j * self.kx_eff * np.fft.fftn(f, axes=self.axes),
                            axes=self.axes).real

    def d_y(self, f):
        return np.fft.ifftn(1j * self.ky * np.fft.fftn(f, axes=self.axes),
                            axes=self.axes).real


def residual_fields(sys: LevelSystem, lat: PhaseLattice, profiles, epsilon: float,
                    ntheta: int, ops: _SpectralOps | None = None):
    """Pointwise residual of the assembled hierarchy in the stiff equations.

    Returns a dict of residual blocks (bx, by, e, rho).  Time derivatives
    come from the stored exact slow derivatives plus the fast phase rates,
    spatial derivatives are spectral on the same grid.
    """
    u = assemble_uapp(profiles, epsilon, profiles.t, ntheta)
    du = assemble_uapp(profiles, epsilon, profiles.t, ntheta, derivative=True)
    if ops is None:
        ops = _SpectralOps(lat, profiles.grid, ntheta, epsilon)
    sqe = np.sqrt(epsilon)
    gz = sys.dipole_z
    omdiff = sys.omega_diff_matrix
    n = sys.n_levels
    idx = np.arange(n)

    r_bx = du.bx + ops.d_y(u.e) / sqe
    r_by = du.by - ops.d_x_singular(u.e)
    rho_od = u.rho.copy()
    rho_od[..., idx, idx] = 0.0
    pops = u.rho[..., idx, idx]
    com = gz @ u.rho - u.rho @ gz
    shift = (omdiff - 1j * sys.gamma) * rho_od
    w_rates = pauli_rates(sys.pauli, pops)
    coupling_e = ((1j / sqe) * np.einsum("mn,...nm->...", gz, shift)
                  - 1j * u.e * np.einsum("mn,...nm->...", gz, com)
                  - sqe * np.einsum("nn,...n->...", gz, w_rates)).real
    r_e = du.e - ops.d_x_singular(u.by) + ops.d_y(u.bx) / sqe - coupling_e
    r_rho = du.rho + (1j / epsilon) * (omdiff - 1j * sys.gamma) * rho_od \
        - (1j / sqe) * u.e[..., None, None] * com
    r_rho[..., idx, idx] -= w_rates
    return {"bx": r_bx, "by": r_by, "e": r_e, "rho": r_rho}


def residual_norms(sys: LevelSystem, lat: PhaseLattice, pipeline: TmProfilePipeline,
                   epsilon: float, t_samples, ntheta: int):
    """Sup and L2 residual norms at each requested time."""
    ops = _SpectralOps(lat, pipeline.state0.grid, ntheta, epsilon)
    cell = pipeline.state0.grid.cell_volume * (2 * np.pi / ntheta) ** lat.d
    rows = []
    for t in t_samples:
        ps = pipeline.profiles_at(float(t))
        blocks = residual_fields(sys, lat, ps, epsilon, ntheta, ops)
        sup = max(sup_norm(v) for v in blocks.values())
        l2 = float(np.sqrt(sum(l2_norm(v, cell) ** 2 for v in blocks.values())))
        rows.append({"t": float(t), "sup": sup, "l2": l2})
    return rows


# ---------------------------------------------------------------------------
# slope fitting
# ---------------------------------------------------------------------------

def loglog_slope(x, y):
    """Least-squares slope of log(y) vs log(x) with a 95% half-width.

    Requires at least three points; returns (slope, half_width).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise ValidationError("slope fit requires at least three points")
    if np.any(y <= 0) or np.any(x <= 0):
        raise ValidationError("slope fit requires positive data")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    dof = x.size - 2
    if dof > 0:
        sigma2 = float(np.sum(resid ** 2)) / dof
        se = np.sqrt(sigma2 / np.sum((lx - lx.mean()) ** 2))
        half = float(stats.t.ppf(0.975, dof) * se)
    else:
        half = np.inf
    return float(slope), half


# ---------------------------------------------------------------------------
# stiff vs assembled convergence
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    """Log-log summary of residual and error decay over an epsilon ladder."""

    epsilons: list
    residual_norms: list
    error_norms: list
    residual_slope: float | None = None
    residual_slope_halfwidth: float | None = None
    error_slope: float | None = None
    error_slope_halfwidth: float | None = None
    runtimes: list = dc_field(default_factory=list)
    diverged: list = dc_field(default_factory=list)

    def fitted(self):
        return ((self.residual_slope, self.residual_slope_halfwidth),
                (self.error_slope, self.error_slope_halfwidth))


def seeded_perturbation(grid: Grid, ntheta: int, d: int, seed: int,
                        amplitude: float = 0.1, cutoff: int = 3) -> dict:
    """Fixed smooth random fields for the initial perturbation.

    Low-pass filtered white noise on the (x, y, theta) grid, normalized to
    unit sup norm and scaled; the same seed always yields the same fields.
    """
    rng = np.random.default_rng(seed)
    shape = (grid.nx, grid.ny) + (ntheta,) * d
    axes = tuple(range(len(shape)))
    out = {}
    for name in ("bx", "by", "e"):
        f = rng.standard_normal(shape)
        spec = np.fft.fftn(f, axes=axes)
        for axis, nsz in enumerate(shape):
            idx = np.rint(np.fft.fftfreq(nsz) * nsz).astype(int)
            mask = (np.abs(idx) <= cutoff).reshape(
                [nsz if a == axis else 1 for a in range(len(shape))])
            spec = spec * mask
        f = np.fft.ifftn(spec, axes=axes).real
        f = f / max(np.max(np.abs(f)), 1e-300)
        out[name] = amplitude * f
    return out


def error_norm(state, assembled) -> float:
    """Sup distance between a stiff state and assembled fields (all blocks)."""
    return max(
        sup_norm(state.bx - assembled.bx),
        sup_norm(state.by - assembled.by),
        sup_norm(state.e - assembled.e),
        sup_norm(state.rho - assembled.rho),
    )


def convergence_study(sys: LevelSystem, lat: PhaseLattice, pipeline: TmProfilePipeline,
                      epsilons, t_star: float, ntheta: int, seed: int = 1234,
                      delta_amplitude=None, delta_exponent: float = 0.5,
                      observer_stride: int = 5, c_cfl: float = 0.5,
                      dt_safety: float = 0.15,
                      with_residual: bool = True,
                      residual_samples: int = 6) -> ConvergenceReport:
    """Measure stiff-vs-assembled error (and residual) over an epsilon ladder.

    For each epsilon the stiff solver starts from the assembled hierarchy
    plus a fixed seeded perturbation scaled by epsilon**delta_exponent, and
    the sup distance to the assembled hierarchy is recorded along the run.
    Slopes come from a log-log least-squares fit; a diverged run is flagged
    and excluded from the fit.

    ``c_cfl`` is the admissibility bound of the stepper; ``dt_safety``
    additionally shrinks the step used here so that time-discretization
    error stays below the perturbation scale being measured (the splitting
    error of the stiff coupling grows like dt^2/epsilon).
    """
    epsilons = sorted(float(e) for e in epsilons)[::-1]
    if len(epsilons) < 3:
        raise ValidationError("the ladder needs at least three epsilon values")
    grid = pipeline.state0.grid
    base_delta = seeded_perturbation(grid, ntheta, lat.d, seed)
    report = ConvergenceReport(epsilons=list(epsilons), residual_norms=[], error_norms=[])
    t_samp = np.linspace(0.0, t_star, residual_samples)
    for eps in epsilons:
        t0 = _time.perf_counter()
        if with_residual:
            rows = residual_norms(sys, lat, pipeline, eps, t_samp, ntheta)
            report.residual_norms.append(max(r["sup"] for r in rows))
        amp = (delta_amplitude(eps) if callable(delta_amplitude)
               else (delta_amplitude if delta_amplitude is not None else 0.5))
        scale = amp * eps ** delta_exponent
        delta = {k: scale * v for k, v in base_delta.items()}
        profiles0 = pipeline.profiles_at(0.0)
        state = initialize(sys, lat, profiles0, eps, ntheta, delta=delta, c_cfl=c_cfl)
        solver: TmStiffSolver = state._solver
        dt = dt_safety * dt_max(eps, grid, 1.0)
        n_steps = int(np.ceil(t_star / dt))
        dt = t_star / n_steps

        worst = error_norm(state, pipeline.assemble(eps, 0.0, ntheta))

        def compare(st):
            return {"t": st.time,
                    "err": error_norm(st, pipeline.assemble(eps, st.time, ntheta))}

        try:
            _, series = solver.run(state, t_star, dt, observer_stride, observers=compare)
            worst = max(worst, float(np.max(series["err"])))
            report.error_norms.append(worst)
            report.diverged.append(False)
        except SolverDivergedError:
            report.error_norms.append(np.nan)
            report.diverged.append(True)
        report.runtimes.append(_time.perf_counter() - t0)
    good = [i for i, d in enumerate(report.diverged) if not d]
    if len(good) < 3:
        raise ModelError("fewer than three usable ladder points")
    eps_fit = [report.epsilons[i] for i in good]
    err_fit = [report.error_norms[i] for i in good]
    report.error_slope, report.error_slope_halfwidth = loglog_slope(eps_fit, err_fit)
    if with_residual:
        report.residual_slope, report.residual_slope_halfwidth = loglog_slope(
            report.epsilons, report.residual_norms)
    return report


# ---------------------------------------------------------------------------
# coherence decay
# ---------------------------------------------------------------------------

def decay_fit(times, coh_norms, sys: LevelSystem, epsilon: float,
              window_efolds: float = 5.0) -> float:
    """Fit the exponential decay rate of the coherence norm.

    Uses the initial-layer window t <= window_efolds * epsilon / gamma and
    returns the fitted d/dt log ||C||.  Fails when fewer than three samples
    carry signal or when the series does not actually decay (prepared data).
    """
    times = np.asarray(times, dtype=float)
    norms = np.asarray(coh_norms, dtype=float)
    if sys.gamma <= 0:
        raise ValidationError("decay fit requires gamma > 0")
    window = window_efolds * epsilon / sys.gamma
    mask = (times <= window * (1 + 1e-9)) & (norms > 1e-280)
    if int(mask.sum()) < 3:
        raise ModelError("fewer than three usable samples in the decay window")
    t_fit, n_fit = times[mask], norms[mask]
    if n_fit[-1] > n_fit[0] * np.exp(-1.0):
        raise ModelError("no initial-layer decay signal in the window")
    slope, _ = np.polyfit(t_fit, np.log(n_fit), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# averaging diagnostics
# ---------------------------------------------------------------------------

def sublinearity_diagnostic(u: np.ndarray, k_class, dt: float, S_values,
                            ly: float = 2 * np.pi, lz: float = 2 * np.pi):
    """Norms of the finite-window bicharacteristic averages for growing windows.

    ``u`` holds uniform samples (nT, ny, nz, ...).  For each window length S
    (a multiple of dt within the sampled span) the L2 norm of the window
    average is reported; decay certifies that the source admits sublinear
    correctors.
    """
    u = np.asarray(u)
    rows = []
    for S in S_values:
        n_keep = int(round(S / dt)) + 1
        if n_keep > u.shape[0]:
            raise ValidationError(f"window S={S} exceeds the sampled span")
        avg = birkhoff_average(k_class, u[:n_keep], S, dt, ly=ly, lz=lz)
        rows.append((float(S), float(np.sqrt(np.mean(np.abs(avg) ** 2)))))
    return rows
