"""Command-line pipelines: simulate, profile, residual, converge, spectral-info.

All pipelines are driven by one JSON configuration file and write
deterministic CSV/JSON outputs plus a manifest (configuration hash, code
version, grid hashes, seed).  Wall-clock timings go to a separate
``timings.json`` because they are the one output that cannot be
byte-reproducible.

Exit codes: 0 success, 1 pipeline error, 2 acceptance-threshold violation
(converge only), 64 unknown subcommand.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys as _sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import harness as hz
from . import profile_builder as pb
from . import reduced_model as rm
from . import stiff_solver as ss
from .config import RunConfig, parse_config
from .errors import ConfigError, ModelError
from .quantum import LevelSystem
from .spectral import (
    ModeClass,
    classify_mode,
    diffraction_coeff,
    group_velocity,
    resonant_set,
)

log = logging.getLogger("maxbloch")

COMMANDS = ("simulate", "profile", "residual", "converge", "spectral-info")
USAGE = ("usage: maxbloch {simulate|profile|residual|converge|spectral-info}"
         " --config PATH [--out DIR] [--threads N] [-v]")


def _fmt(x) -> str:
    return repr(float(x))


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_array(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    return _sha256_bytes(str(arr.dtype).encode() + str(arr.shape).encode() + arr.tobytes())


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _eps_tag(eps: float) -> str:
    return f"eps_{eps:.6e}".replace("+", "").replace("-", "m").replace(".", "p")


def _mode_str(part) -> str:
    return " ".join(str(int(a)) for a in part)


class _Out:
    """Output directory plus the growing manifest."""

    def __init__(self, cfg: RunConfig, out_dir: str | None, command: str, threads: int):
        self.dir = Path(out_dir or cfg.output_dir)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            probe = self.dir / ".write_probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ModelError(f"output directory {self.dir} is not writable: {exc}")
        grid = cfg.grid()
        self.manifest = {
            "command": command,
            "code_version": __version__,
            "config_sha256": _sha256_bytes(
                json.dumps(cfg.raw, sort_keys=True).encode()),
            "grid_hashes": {
                "x": _sha256_array(grid.coords(0)),
                "y": _sha256_array(grid.coords(1)),
                "theta": _sha256_array(
                    2 * np.pi * np.arange(cfg.raw["grids"]["ntheta"])
                    / cfg.raw["grids"]["ntheta"]),
            },
            "seed": cfg.seed,
            "threads": threads,
            "outputs": [],
        }

    def record(self, relpath: str):
        self.manifest["outputs"].append(relpath)

    def finish(self, timings: dict | None = None):
        self.manifest["outputs"] = sorted(self.manifest["outputs"])
        _write_json(self.dir / "manifest.json", self.manifest)
        if timings:
            _write_json(self.dir / "timings.json", timings)


def _build_pipeline(cfg: RunConfig) -> pb.TmProfilePipeline:
    profiles = cfg.initial_profiles()
    state0 = pb.reduced_state_from_leading(profiles)
    return pb.TmProfilePipeline(state0, dt_slow=cfg.solver_opt("dt_reduced", 2e-3))


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _cmd_spectral_info(cfg: RunConfig, out: _Out, threads: int) -> int:
    sys_ = cfg.level_system()
    lat = cfg.lattice()
    resonances = sorted(resonant_set(sys_, lat))
    rows = []
    for mode in sorted(lat.modes()):
        cls = classify_mode(lat, mode)
        try:
            v = group_velocity(lat, mode)
        except ModelError:
            v = float("nan")
        try:
            a_coeff = diffraction_coeff(lat, mode)
        except ModelError:
            a_coeff = float("nan")
        pairs = ";".join(f"{m}:{n}" for (m, n, a1) in resonances if tuple(a1) == mode[1])
        rows.append((_mode_str(mode[0]), _mode_str(mode[1]), cls.value,
                     _fmt(v), _fmt(a_coeff), pairs))
    _write_csv(out.dir / "modes.csv",
               ["alpha0", "alpha1", "class", "v", "a_coeff", "resonant_pairs"], rows)
    out.record("modes.csv")
    res_rows = [(m, n, _mode_str(a1)) for (m, n, a1) in resonances]
    _write_csv(out.dir / "resonances.csv", ["m", "n", "alpha1"], res_rows)
    out.record("resonances.csv")
    out.finish()
    return 0


def _observer_series_rows(series: dict):
    cols = ["t", "sup_norm_E", "l2_energy", "trace_rho", "herm_defect",
            "coh_norm", "div_defect"]
    rows = [tuple(_fmt(series[c][i]) for c in cols) for i in range(len(series["t"]))]
    return cols, rows


def _cmd_simulate(cfg: RunConfig, out: _Out, threads: int) -> int:
    if cfg.mode == "reduced3d":
        return _simulate_reduced(cfg, out)
    sys_ = cfg.level_system()
    lat = cfg.lattice()
    grid = cfg.grid()
    ntheta = cfg.raw["grids"]["ntheta"]
    t_star = cfg.solver_opt("t_star", 0.5)
    stride = cfg.solver_opt("observer_stride", 5)
    c_cfl = cfg.solver_opt("dt_cfl", 0.5)
    prepared = cfg.mode == "tm_prepared"
    profiles = cfg.initial_profiles()
    if prepared:
        pipeline = _build_pipeline(cfg)
        init_profiles = pipeline.profiles_at(0.0)
    else:
        init_profiles = profiles

    def run_one(eps: float):
        state = ss.initialize(sys_, lat, init_profiles, eps, ntheta,
                              prepared=prepared, c_cfl=c_cfl)
        dt = ss.dt_max(eps, grid, c_cfl)
        n = max(1, int(np.ceil(t_star / dt)))
        _, series = ss.run(state, t_star, t_star / n, observer_stride=stride)
        return eps, series

    timings = {}
    results = []
    import time as _time
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, cfg.epsilons))
    else:
        for eps in cfg.epsilons:
            t0 = _time.perf_counter()
            results.append(run_one(eps))
            timings[_eps_tag(eps)] = _time.perf_counter() - t0
    summary = {}
    for eps, series in results:
        tag = _eps_tag(eps)
        cols, rows = _observer_series_rows(series)
        name = f"observers_{tag}.csv"
        _write_csv(out.dir / name, cols, rows)
        out.record(name)
        entry = {"epsilon": eps, "steps": int(len(series["t"]))}
        if cfg.mode == "tm_unprepared":
            try:
                rate = hz.decay_fit(series["t"], series["coh_norm"], sys_, eps)
                target = -sys_.gamma / eps
                entry["decay_rate"] = rate
                entry["decay_target"] = target
                entry["decay_rel_err"] = abs(rate - target) / abs(target)
            except ModelError as exc:
                entry["decay_error"] = str(exc)
        summary[tag] = entry
    _write_json(out.dir / "summary.json", summary)
    out.record("summary.json")
    out.finish(timings)
    return 0


def _simulate_reduced(cfg: RunConfig, out: _Out) -> int:
    """Slow-envelope run without a stiff solve; exports mode snapshots."""
    sys_ = cfg.level_system()
    profiles = cfg.initial_profiles()
    state = pb.reduced_state_from_leading(profiles, tm=(cfg.grid().nz == 1))
    eps = cfg.epsilons[0]
    t_star = cfg.solver_opt("t_star", 0.5)
    dt = cfg.solver_opt("dt_reduced", 2e-3)
    n_save = 5
    save_times = [t_star * i / n_save for i in range(n_save + 1)]
    meta = {"epsilon": eps, "times": save_times, "files": {}}
    for t_save in save_times:
        while state.t < t_save - 1e-12:
            step = min(dt, t_save - state.t)
            state = rm.advance(state, step, with_intermediate=True,
                               dT=step / np.sqrt(eps))
        tag = f"t_{t_save:.6f}"
        groups = {"e": {}, "by0": {}, "bx": {}}
        for mode, val in state.u_modes.items():
            groups["e"][mode] = val[..., 5]
        zero = tuple(0 for _ in range(state.lat.d))
        if np.any(state.mean_field):
            groups["by0"][(zero, zero)] = state.mean_field[..., 1]
        for mode, val in state.space_modes.items():
            groups["bx"][mode] = val[..., 0]
        for lvl in range(sys_.n_levels):
            groups[f"n{lvl + 1}"] = {m: v[..., lvl] for m, v in state.pop_modes.items()}
        for gname, modes in groups.items():
            rows = []
            for mode in sorted(modes):
                spec = np.fft.fft2(modes[mode][..., 0], axes=(0, 1))
                kx = np.rint(np.fft.fftfreq(spec.shape[0]) * spec.shape[0]).astype(int)
                ky = np.rint(np.fft.fftfreq(spec.shape[1]) * spec.shape[1]).astype(int)
                for ix in range(spec.shape[0]):
                    for iy in range(spec.shape[1]):
                        val = spec[ix, iy]
                        if abs(val) < 1e-14:
                            continue
                        rows.append((_mode_str(mode[0]), _mode_str(mode[1]),
                                     int(kx[ix]), int(ky[iy]), _fmt(val.real),
                                     _fmt(val.imag)))
            name = f"snapshot_{tag}_{gname}.csv"
            _write_csv(out.dir / name,
                       ["alpha0", "alpha1", "kx_index", "ky_index", "re", "im"], rows)
            out.record(name)
            meta["files"][f"{tag}/{gname}"] = name
    _write_json(out.dir / "snapshots.json", meta)
    out.record("snapshots.json")
    out.finish()
    return 0


_COMP_NAMES = {0: "bx", 1: "by", 2: "bz", 3: "ex", 4: "ey", 5: "ez"}


def _profile_rows(ps: pb.ProfileSet):
    field_rows, pop_rows, coh_rows, prov_rows = [], [], [], []
    for (j, kappa, mode), val in sorted(ps.field.items()):
        for comp in range(6):
            block = val[..., 0, comp]
            if not np.any(np.abs(block) > 0):
                continue
            for ix in range(block.shape[0]):
                for iy in range(block.shape[1]):
                    z = block[ix, iy]
                    field_rows.append((j, kappa, _mode_str(mode[0]), _mode_str(mode[1]),
                                       _COMP_NAMES[comp], ix, iy, _fmt(z.real), _fmt(z.imag)))
    for (j, kappa, mode), val in sorted(ps.pop.items()):
        for lvl in range(val.shape[-1]):
            block = val[..., 0, lvl]
            if not np.any(np.abs(block) > 0):
                continue
            for ix in range(block.shape[0]):
                for iy in range(block.shape[1]):
                    z = block[ix, iy]
                    pop_rows.append((j, kappa, _mode_str(mode[0]), _mode_str(mode[1]),
                                     f"n{lvl + 1}", ix, iy, _fmt(z.real), _fmt(z.imag)))
    for (j, kappa, mode), val in sorted(ps.coh.items()):
        nl = val.shape[-1]
        for m_ in range(nl):
            for n_ in range(nl):
                block = val[..., 0, m_, n_]
                if not np.any(np.abs(block) > 0):
                    continue
                for ix in range(block.shape[0]):
                    for iy in range(block.shape[1]):
                        z = block[ix, iy]
                        coh_rows.append((j, kappa, _mode_str(mode[0]), _mode_str(mode[1]),
                                         f"c{m_ + 1}{n_ + 1}", ix, iy,
                                         _fmt(z.real), _fmt(z.imag)))
    for key, origin in sorted(ps.provenance.items(), key=lambda kv: str(kv[0])):
        kind, j, kappa, mode = key
        prov_rows.append((kind, j, kappa, _mode_str(mode[0]), _mode_str(mode[1]), origin))
    return field_rows, pop_rows, coh_rows, prov_rows


def _cmd_profile(cfg: RunConfig, out: _Out, threads: int) -> int:
    if cfg.mode != "tm_prepared":
        raise ModelError("the profile pipeline requires mode tm_prepared")
    pipeline = _build_pipeline(cfg)
    t_star = cfg.solver_opt("t_star", 0.5)
    header = ["j", "kappa", "alpha0", "alpha1", "comp", "ix", "iy", "re", "im"]
    lat = cfg.lattice()
    for t_save in (0.0, t_star):
        ps = pipeline.profiles_at(t_save)
        tag = f"t_{t_save:.6f}"
        sub = out.dir / tag
        sub.mkdir(exist_ok=True)
        field_rows, pop_rows, coh_rows, prov_rows = _profile_rows(ps)
        for name, rows in (("field.csv", field_rows), ("populations.csv", pop_rows),
                           ("coherences.csv", coh_rows)):
            _write_csv(sub / name, header, rows)
            out.record(f"{tag}/{name}")
        _write_csv(sub / "provenance.csv",
                   ["kind", "j", "kappa", "alpha0", "alpha1", "origin"], prov_rows)
        out.record(f"{tag}/provenance.csv")
        _write_json(sub / "profile_manifest.json", {
            "t": t_save,
            "lattice": {"k": list(map(float, lat.k)), "a": lat.a,
                        "c_dioph": lat.c_dioph, "a_max": lat.a_max},
            "truncation_tail_mass": pipeline.tail_mass,
            "slots": {"field": len(ps.field), "pop": len(ps.pop), "coh": len(ps.coh)},
        })
        out.record(f"{tag}/profile_manifest.json")
    out.finish()
    return 0


def _cmd_residual(cfg: RunConfig, out: _Out, threads: int) -> int:
    if cfg.mode != "tm_prepared":
        raise ModelError("the residual pipeline requires mode tm_prepared")
    sys_ = cfg.level_system()
    lat = cfg.lattice()
    ntheta = cfg.raw["grids"]["ntheta"]
    t_star = cfg.solver_opt("t_star", 0.5)
    n_samp = cfg.solver_opt("residual_samples", 6)
    pipeline = _build_pipeline(cfg)
    t_samples = np.linspace(0.0, t_star, n_samp)
    rows = []
    sups = []
    for eps in sorted(cfg.epsilons, reverse=True):
        per_t = hz.residual_norms(sys_, lat, pipeline, eps, t_samples, ntheta)
        sups.append(max(r["sup"] for r in per_t))
        for r in per_t:
            rows.append((_fmt(eps), _fmt(r["t"]), _fmt(r["sup"]), _fmt(r["l2"])))
    _write_csv(out.dir / "residuals.csv", ["epsilon", "t", "sup", "l2"], rows)
    out.record("residuals.csv")
    summary = {"epsilons": sorted(cfg.epsilons, reverse=True), "sup_residuals": sups}
    if len(cfg.epsilons) >= 3:
        slope, half = hz.loglog_slope(sorted(cfg.epsilons, reverse=True), sups)
        summary["slope"] = slope
        summary["slope_halfwidth"] = half
    _write_json(out.dir / "residual_summary.json", summary)
    out.record("residual_summary.json")
    out.finish()
    return 0


def _cmd_converge(cfg: RunConfig, out: _Out, threads: int) -> int:
    if cfg.mode != "tm_prepared":
        raise ModelError("the convergence pipeline requires mode tm_prepared")
    sys_ = cfg.level_system()
    lat = cfg.lattice()
    ntheta = cfg.raw["grids"]["ntheta"]
    pipeline = _build_pipeline(cfg)
    report = hz.convergence_study(
        sys_, lat, pipeline, cfg.epsilons,
        cfg.solver_opt("t_star", 0.5), ntheta,
        seed=cfg.seed,
        delta_amplitude=cfg.delta_opt("amplitude", 0.5),
        delta_exponent=cfg.delta_opt("exponent", 0.5),
        observer_stride=cfg.solver_opt("observer_stride", 5),
        c_cfl=cfg.solver_opt("dt_cfl", 0.5),
        dt_safety=cfg.solver_opt("dt_safety", 0.06),
        residual_samples=cfg.solver_opt("residual_samples", 6),
    )
    rows = [(_fmt(e), _fmt(r), _fmt(err), str(flag).lower())
            for e, r, err, flag in zip(report.epsilons, report.residual_norms,
                                       report.error_norms, report.diverged)]
    _write_csv(out.dir / "convergence.csv",
               ["epsilon", "residual_sup", "error_sup", "diverged"], rows)
    out.record("convergence.csv")
    doc = {
        "epsilons": report.epsilons,
        "residual_norms": report.residual_norms,
        "error_norms": [None if np.isnan(e) else e for e in report.error_norms],
        "residual_slope": report.residual_slope,
        "residual_slope_halfwidth": report.residual_slope_halfwidth,
        "error_slope": report.error_slope,
        "error_slope_halfwidth": report.error_slope_halfwidth,
        "diverged": report.diverged,
    }
    _write_json(out.dir / "report.json", doc)
    out.record("report.json")
    out.finish({"per_epsilon_seconds": report.runtimes})
    res_band = cfg.acceptance_band("residual_slope", (0.4, 0.6))
    err_band = cfg.acceptance_band("error_slope", (0.4, 0.7))
    ok = (res_band[0] <= report.residual_slope <= res_band[1]
          and err_band[0] <= report.error_slope <= err_band[1])
    if not ok:
        log.error("acceptance violation: residual slope %.3f (band %s),"
                  " error slope %.3f (band %s)",
                  report.residual_slope, res_band, report.error_slope, err_band)
        return 2
    log.info("slopes within acceptance bands: residual %.3f, error %.3f",
             report.residual_slope, report.error_slope)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "simulate": _cmd_simulate,
    "profile": _cmd_profile,
    "residual": _cmd_residual,
    "converge": _cmd_converge,
    "spectral-info": _cmd_spectral_info,
}


def main(argv=None) -> int:
    argv = list(_sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        print(USAGE, file=_sys.stderr)
        print(f"maxbloch: unknown subcommand {command!r}", file=_sys.stderr)
        return 64
    parser = argparse.ArgumentParser(prog=f"maxbloch {command}")
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--out", default=None, help="output directory (default: from config)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent ladder runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(rest)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for line in exc.violations:
            print(f"config error: {line}", file=_sys.stderr)
        return 1
    try:
        out = _Out(cfg, args.out, command, args.threads)
        return _HANDLERS[command](cfg, out, args.threads)
    except ModelError as exc:
        print(f"maxbloch {command}: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
