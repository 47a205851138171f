"""Periodic grids, spectral calculus helpers, and the singular-profile state.

All solvers in this package work on uniform periodic grids whose sizes are
powers of two, so every derivative is a diagonal operation in FFT space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ValidationError

TWO_PI = 2.0 * np.pi


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid over (x, y[, z]).

    The transverse ``z`` axis collapses to a single point (``nz=1``) in the
    two-dimensional transverse-magnetic setting.
    """

    nx: int
    ny: int
    nz: int = 1
    lx: float = TWO_PI
    ly: float = TWO_PI
    lz: float = TWO_PI

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if not _is_pow2(n):
                raise ValidationError(f"grid size {name}={n} must be a power of two")
        for name in ("lx", "ly", "lz"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"grid length {name} must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def cell_volume(self) -> float:
        vol = (self.lx / self.nx) * (self.ly / self.ny)
        if self.nz > 1:
            vol *= self.lz / self.nz
        return vol

    def coords(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        length = (self.lx, self.ly, self.lz)[axis]
        return np.arange(n) * (length / n)

    def spacing(self, axis: int) -> float:
        n = self.shape[axis]
        return (self.lx, self.ly, self.lz)[axis] / n

    def wavenumbers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        length = (self.lx, self.ly, self.lz)[axis]
        return TWO_PI * np.fft.fftfreq(n, d=length / n)

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.coords(0), self.coords(1), self.coords(2), indexing="ij")

    def deriv(self, f: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
        """Spectral derivative along a grid axis; preserves real inputs."""
        k = self.wavenumbers(axis)
        shape = [1] * f.ndim
        shape[axis] = k.size
        fac = (1j * k.reshape(shape)) ** order
        out = np.fft.ifft(np.fft.fft(f, axis=axis) * fac, axis=axis)
        if not np.iscomplexobj(f):
            return out.real
        return out

    def invert_deriv(self, f: np.ndarray, axis: int) -> np.ndarray:
        """Spectral antiderivative along an axis, zero on the constant mode.

        The caller is responsible for checking that the constant mode of
        ``f`` vanishes; this routine simply discards it.
        """
        k = self.wavenumbers(axis)
        shape = [1] * f.ndim
        shape[axis] = k.size
        kk = k.reshape(shape)
        spec = np.fft.fft(f, axis=axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            spec = np.where(kk != 0, spec / (1j * kk), 0.0)
        out = np.fft.ifft(spec, axis=axis)
        if not np.iscomplexobj(f):
            return out.real
        return out


def l2_norm(f: np.ndarray, cell_volume: float = 1.0) -> float:
    """Discrete L2 norm with the given cell volume weight."""
    return float(np.sqrt(np.sum(np.abs(f) ** 2) * cell_volume))


def sup_norm(f: np.ndarray) -> float:
    return float(np.max(np.abs(f))) if f.size else 0.0


@dataclass
class SingularState:
    """Two-scale state (x, y, theta0) of the transverse-magnetic system.

    Fields ``bx``, ``by``, ``e`` are real arrays of shape
    ``(nx, ny) + (ntheta,) * d``; ``rho`` is the complex density-matrix field
    of shape ``(nx, ny) + (ntheta,) * d + (N, N)``.  The periodic ``theta0``
    coordinate carries the fast spatial oscillation, so the small parameter
    ``epsilon`` enters only through coefficients of the evolution.
    """

    bx: np.ndarray
    by: np.ndarray
    e: np.ndarray
    rho: np.ndarray
    epsilon: float
    time: float
    sys: Any
    lat: Any
    grid: Grid
    ntheta: int

    def copy(self) -> "SingularState":
        return SingularState(
            bx=self.bx.copy(), by=self.by.copy(), e=self.e.copy(), rho=self.rho.copy(),
            epsilon=self.epsilon, time=self.time,
            sys=self.sys, lat=self.lat, grid=self.grid, ntheta=self.ntheta,
        )

    @property
    def rho_diag(self) -> np.ndarray:
        n = self.rho.shape[-1]
        return self.rho[..., np.arange(n), np.arange(n)]

    @property
    def rho_offdiag(self) -> np.ndarray:
        n = self.rho.shape[-1]
        od = self.rho.copy()
        od[..., np.arange(n), np.arange(n)] = 0.0
        return od

    def hermiticity_defect(self) -> float:
        return sup_norm(self.rho - np.conj(np.swapaxes(self.rho, -1, -2)))
