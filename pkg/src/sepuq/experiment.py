"""Synthetic-data experiments: surrogate accuracy and VB / MCMC inversions.

:class:`Pipeline` runs each stage on demand and persists its artifacts in an
output directory.  Every artifact records the hash of the configuration it
was produced under; stale artifacts (different hash) are rebuilt.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .errors import ValidationError
from .gp import GPBank
from .kle import KLBasis, build_kl_basis, kappa
from .mcmc import ChainResult, run_chain
from .mesh import GridMesh, build_mesh, energy_norm, fem_solve, l2_norm, sample_at_points
from .pgd import SeparableSolution, TermDiagnostics, enrich, evaluate_surrogate_field
from .vb import ObservationSet, VBState, posterior_log_kappa, run_vb

log = logging.getLogger(__name__)


def generate_reference(config: ExperimentConfig, basis: KLBasis, rng: np.random.Generator):
    """theta_ref ~ N(0, I) truncated to the theta-grid range, and kappa_ref."""
    lo, hi = config.theta_grid.theta_min, config.theta_grid.theta_max
    theta = rng.standard_normal(basis.n_terms)
    bad = (theta < lo) | (theta > hi)
    while bad.any():
        theta[bad] = rng.standard_normal(int(bad.sum()))
        bad = (theta < lo) | (theta > hi)
    return theta, kappa(basis, theta)


def observation_points(per_axis: int) -> np.ndarray:
    """Interior lattice {i/(k+1)}^2, x varying fastest."""
    if per_axis < 1:
        raise ValidationError("need at least one observation per axis")
    t = np.arange(1, per_axis + 1) / (per_axis + 1)
    xx, yy = np.meshgrid(t, t)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    if (pts <= 0).any() or (pts >= 1).any():
        raise ValidationError("observation lattice touches the boundary")
    return pts


def generate_observations(config: ExperimentConfig, mesh: GridMesh, kappa_ref,
                          rng: np.random.Generator, count: int | None = None):
    """FEM data at the lattice with sigma_y = noise_percent of the mean |clean value|.

    Returns (locations, noisy values, sigma_y, clean values, u_ref).
    """
    count = config.observations.count if count is None else count
    k = int(round(np.sqrt(count)))
    if k * k != count:
        raise ValidationError(f"observation count {count} is not a perfect square")
    u_ref = fem_solve(mesh, kappa_ref, 1.0)
    pts = observation_points(k)
    clean = sample_at_points(mesh, u_ref, pts)
    sigma_y = 0.01 * config.observations.noise_percent * float(np.mean(np.abs(clean)))
    if not sigma_y > 0:
        raise ValidationError("clean observations vanish; cannot set the noise level")
    return pts, clean + sigma_y * rng.standard_normal(count), sigma_y, clean, u_ref


def benchmark_thetas(config: ExperimentConfig, n_kl: int, rng: np.random.Generator) -> np.ndarray:
    """Prior draws snapped to the theta grid."""
    return config.theta_grid.snap(rng.standard_normal((config.benchmark.samples, n_kl)))


def forward_benchmark(mesh: GridMesh, basis: KLBasis, sol: SeparableSolution, thetas):
    """Relative L2 and energy errors of the surrogate against FEM, one row per sample."""
    rows = []
    for theta in np.atleast_2d(thetas):
        kap = kappa(basis, theta)
        u = fem_solve(mesh, kap, sol.f)
        diff = evaluate_surrogate_field(sol, theta) - u
        rows.append((l2_norm(mesh, diff) / l2_norm(mesh, u),
                     energy_norm(mesh, kap, diff) / energy_norm(mesh, kap, u)))
    return np.array(rows).reshape(-1, 2)


def summarize_errors(errors: np.ndarray) -> dict:
    return {"mean_l2": float(errors[:, 0].mean()), "max_l2": float(errors[:, 0].max()),
            "mean_energy": float(errors[:, 1].mean()), "max_energy": float(errors[:, 1].max())}


def relative_field_error(mesh: GridMesh, estimate, reference) -> float:
    return l2_norm(mesh, np.asarray(estimate) - reference) / l2_norm(mesh, reference)


def chain_trace_rows(result: ChainResult, burn_in: int, thin: int):
    """Rows (sweep, delta of running mean, running mean...) in the VB trace schema."""
    run = result.running_mean
    prev = np.vstack([np.zeros((1, run.shape[1])), run[:-1]])
    delta = np.linalg.norm(run - prev, axis=1)
    sweeps = burn_in + thin * np.arange(1, run.shape[0] + 1)
    return [(int(s), float(d), *map(float, r)) for s, d, r in zip(sweeps, delta, run)]


class Pipeline:
    """Stages of one experiment, cached in memory and in ``out``."""

    def __init__(self, config: ExperimentConfig, out: str | Path):
        self.config = config
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._cache: dict = {}
        self.timings: dict = {}

    # -- persistence helpers ------------------------------------------
    def path(self, name: str) -> Path:
        return self.out / name

    def _meta(self, **extra) -> dict:
        return {"config_hash": self.config.hash, **extra}

    def _load(self, name: str):
        path = self.path(name)
        if not path.exists():
            return None
        arrays, meta = io.read_arrays(path)
        if meta.get("config_hash") != self.config.hash:
            log.info("%s was produced under a different configuration; rebuilding", name)
            return None
        return arrays, meta

    # -- stages -------------------------------------------------------
    @property
    def mesh(self) -> GridMesh:
        if "mesh" not in self._cache:
            self._cache["mesh"] = build_mesh(self.config.mesh.nx, self.config.mesh.ny)
        return self._cache["mesh"]

    def basis(self) -> KLBasis:
        if "basis" in self._cache:
            return self._cache["basis"]
        hit = self._load("kle.sepuq")
        if hit:
            arr, meta = hit
            basis = KLBasis(arr["eigenvalues"], arr["eigenfields"], arr["weights"],
                            meta["trace"], arr["spectrum"])
        else:
            t = time.perf_counter()
            basis = build_kl_basis(self.mesh, self.config.covariance, self.config.surrogate.n_kl)
            self.timings["kle_build"] = time.perf_counter() - t
            io.write_arrays(self.path("kle.sepuq"),
                            {"eigenvalues": basis.eigenvalues, "eigenfields": basis.eigenfields,
                             "weights": basis.weights, "spectrum": basis.spectrum},
                            self._meta(trace=basis.trace))
        self._cache["basis"] = basis
        return basis

    def surrogate(self) -> SeparableSolution:
        if "sol" in self._cache:
            return self._cache["sol"]
        basis = self.basis()
        hit = self._load("pgd.sepuq")
        if hit:
            arr, meta = hit
            diags = [TermDiagnostics(*row[:4], int(row[4]), bool(row[5]))
                     for row in arr["diagnostics"]]
            sol = SeparableSolution(self.mesh, basis, self.config.theta_grid, arr["f"],
                                    arr["v"], arr["a"], diags, meta["initial_residual"])
        else:
            t = time.perf_counter()
            sol = enrich(self.mesh, basis, self.config.theta_grid, 1.0,
                         self.config.surrogate.n_terms, self.config.pgd)
            self.timings["pgd_build"] = time.perf_counter() - t
            diag = np.array([[d.energy, d.norm_sq, d.projection, d.residual, d.sweeps,
                              d.converged] for d in sol.diagnostics], dtype=float).reshape(-1, 6)
            io.write_arrays(self.path("pgd.sepuq"),
                            {"v": sol.v, "a": sol.a, "f": sol.f, "diagnostics": diag},
                            self._meta(initial_residual=sol.initial_residual,
                                       theta_grid=dataclasses.asdict(self.config.theta_grid)))
            io.write_csv(self.path("pgd_terms.csv"),
                         ["term", "energy", "norm_sq", "projection", "residual", "sweeps",
                          "converged"],
                         [(n + 1, *row[:4], int(row[4]), int(row[5])) for n, row in enumerate(diag)])
        self._cache["sol"] = sol
        return sol

    def gps(self) -> GPBank:
        if "gps" not in self._cache:
            sol = self.surrogate()
            self._cache["gps"] = GPBank.fit(self.config.theta_grid.points, sol.a, self.config.gp)
        return self._cache["gps"]

    def forward_bench(self) -> dict:
        sol = self.surrogate()
        thetas = benchmark_thetas(self.config, sol.n_params, self.config.rng("benchmark"))
        t = time.perf_counter()
        errors = forward_benchmark(self.mesh, self.basis(), sol, thetas)
        self.timings["forward_bench"] = time.perf_counter() - t
        summary = summarize_errors(errors)
        io.write_csv(self.path("bench.csv"), ["sample", "rel_l2", "rel_energy"],
                     [(i, *row) for i, row in enumerate(errors)])
        io.write_csv(self.path("bench_summary.csv"), ["metric", "value", "config_hash"],
                     [(k, v, self.config.hash) for k, v in summary.items()])
        return summary

    def data(self) -> dict:
        if "data" in self._cache:
            return self._cache["data"]
        hit = self._load("data.sepuq")
        if hit:
            arr, meta = hit
            data = {**arr, "sigma_y": meta["sigma_y"]}
        else:
            # depends only on the mesh and the KL basis, never on the surrogate
            basis = self.basis()
            theta_ref, kap = generate_reference(self.config, basis, self.config.rng("reference"))
            pts, y, sigma_y, clean, u_ref = generate_observations(
                self.config, self.mesh, kap, self.config.rng("noise"))
            data = {"theta_ref": theta_ref, "log_kappa_ref": np.log(kap), "u_ref": u_ref,
                    "locations": pts, "y": y, "y_clean": clean, "sigma_y": sigma_y}
            io.write_arrays(self.path("data.sepuq"),
                            {k: v for k, v in data.items() if k != "sigma_y"},
                            self._meta(sigma_y=sigma_y))
        self._cache["data"] = data
        return data

    def observations(self) -> ObservationSet:
        d = self.data()
        return ObservationSet.from_modes(self.mesh, self.surrogate().v, d["locations"], d["y"],
                                         d["sigma_y"])

    def forward_misfit(self, theta) -> float:
        """||y - u(kappa(theta)) at the observation points||_2 / sqrt(M), via FEM."""
        d = self.data()
        u = fem_solve(self.mesh, kappa(self.basis(), theta), 1.0)
        return self.observations().misfit(sample_at_points(self.mesh, u, d["locations"]))

    def fem_solve_seconds(self, repeats: int = 3) -> float:
        kap = kappa(self.basis(), self.data()["theta_ref"])
        best = np.inf
        for _ in range(repeats):
            t = time.perf_counter()
            fem_solve(self.mesh, kap, 1.0)
            best = min(best, time.perf_counter() - t)
        return best

    def invert_vb(self) -> dict:
        obs, gps, basis = self.observations(), self.gps(), self.basis()
        t = time.perf_counter()
        state, hist = run_vb(gps, obs, self.config.vb, self.config.prior)
        seconds = time.perf_counter() - t
        mean, var = posterior_log_kappa(state, basis)
        res = self._summary("vb", state.theta_mean, mean, seconds, hist.n_iters)
        res.update(state=state, history=hist, log_kappa_var=var, converged=hist.converged)
        n2 = basis.n_terms
        nodes = np.array([state.q_nodes[k][0] for k in range(n2)]).reshape(n2, -1)
        dens = np.array([state.q_nodes[k][1] for k in range(n2)]).reshape(n2, -1)
        io.write_arrays(self.path("vb.sepuq"),
                        {"theta_mean": state.theta_mean, "theta_var": state.theta_var,
                         "a_mean": state.a_mean, "a_var": state.a_var,
                         "log_kappa_mean": mean, "log_kappa_var": var,
                         "delta_mu": np.array(hist.delta_mu), "q_nodes": nodes, "q_density": dens},
                        self._meta(converged=hist.converged, seconds=seconds,
                                   misfit=res["misfit"]))
        io.write_csv(self.path("vb_trace.csv"),
                     ["iteration", "delta_mu", *[f"E_theta_{j + 1}" for j in range(n2)]],
                     [(it + 1, dm, *th) for it, (dm, th) in
                      enumerate(zip(hist.delta_mu, hist.theta_mean))])
        io.write_csv(self.path("vb_q_theta.csv"), ["k", "theta", "density"],
                     [(k + 1, x, q) for k in range(n2) for x, q in zip(nodes[k], dens[k])])
        self._write_timing("vb", seconds, hist.n_iters)
        return res

    def invert_mcmc(self) -> dict:
        obs, gps, basis = self.observations(), self.gps(), self.basis()
        cfg = self.config.mcmc
        chain_seed = int(self.config.rng(f"mcmc-{cfg.seed}").integers(2**31))
        result = run_chain(gps, obs, dataclasses.replace(cfg, seed=chain_seed), self.config.prior)
        mean, std = result.log_kappa_moments(basis)
        res = self._summary("mcmc", result.theta_mean, mean, result.seconds, result.sweeps)
        res.update(result=result, log_kappa_std=std, warnings=result.warnings)
        io.write_arrays(self.path("mcmc.sepuq"),
                        {"samples": result.samples, "theta_mean": result.theta_mean,
                         "theta_std": result.theta_std, "log_kappa_mean": mean,
                         "log_kappa_std": std, "accept_theta": result.accept_theta,
                         "accept_a": result.accept_a},
                        self._meta(seconds=result.seconds, misfit=res["misfit"],
                                   warnings=result.warnings, chain_seed=chain_seed))
        io.write_csv(self.path("mcmc_trace.csv"),
                     ["iteration", "delta_mu", *[f"E_theta_{j + 1}" for j in range(basis.n_terms)]],
                     chain_trace_rows(result, cfg.burn_in, cfg.thin))
        self._write_timing("mcmc", result.seconds, result.sweeps)
        return res

    def _summary(self, method, theta_mean, log_kappa_mean, seconds, iters) -> dict:
        d = self.data()
        misfit = self.forward_misfit(theta_mean)
        err = relative_field_error(self.mesh, log_kappa_mean, d["log_kappa_ref"])
        log.info("%s: misfit %.3e (sigma_y %.3e), log-kappa error %.3f, %.2fs",
                 method, misfit, d["sigma_y"], err, seconds)
        return {"method": method, "theta_mean": theta_mean, "log_kappa_mean": log_kappa_mean,
                "misfit": misfit, "sigma_y": d["sigma_y"], "field_error": err,
                "seconds": seconds, "iterations": iters, "config_hash": self.config.hash}

    def _write_timing(self, method: str, seconds: float, iters: int):
        path = self.path("timing.csv")
        rows = {}
        if path.exists():
            _, old = io.read_csv(path)
            rows = {r[0]: r for r in old}
        fem = self.fem_solve_seconds()
        rows[method] = [method, repr(seconds), str(iters), repr(seconds / max(iters, 1)),
                        repr(fem), self.config.hash]
        io.write_csv(path, ["method", "seconds", "iterations", "seconds_per_iteration",
                            "fem_solve_seconds", "config_hash"],
                     [rows[k] for k in sorted(rows)])


def report(out: str | Path, bins: int = 40) -> str:
    """Summarize whatever inversions exist in ``out`` and write plot data."""
    out = Path(out)
    if not (out / "data.sepuq").exists():
        raise ValidationError(f"no data in {out}; run gen-data (and invert-vb / invert-mcmc)")
    found = {m: out / f"{m}.sepuq" for m in ("vb", "mcmc") if (out / f"{m}.sepuq").exists()}
    if not found:
        raise ValidationError(f"no inversion results in {out}; run invert-vb and/or invert-mcmc")
    data, dmeta = io.read_arrays(out / "data.sepuq")
    shape_hint = None
    if (out / "kle.sepuq").exists():
        kle, _ = io.read_arrays(out / "kle.sepuq")
        n = kle["weights"].size
        side = int(round(np.sqrt(n)))
        shape_hint = (side, side) if side * side == n else None

    def grid(field):
        return field.reshape(shape_hint) if shape_hint else field

    fields = {"log_kappa_ref": grid(data["log_kappa_ref"])}
    lines = [f"config hash: {dmeta['config_hash']}",
             f"observations: {data['y'].size}, sigma_y = {dmeta['sigma_y']:.4e}",
             f"theta_ref: {np.array2string(data['theta_ref'], precision=3)}"]
    for method in ("vb", "mcmc"):
        if method not in found:
            lines.append(f"{method}: no result (run invert-{method})")
            continue
        arr, meta = io.read_arrays(found[method])
        if meta["config_hash"] != dmeta["config_hash"]:
            lines.append(f"{method}: WARNING produced under config {meta['config_hash']}")
        fields[f"{method}_log_kappa_mean"] = grid(arr["log_kappa_mean"])
        spread = arr["log_kappa_var"] if method == "vb" else arr["log_kappa_std"] ** 2
        fields[f"{method}_log_kappa_var"] = grid(spread)
        ref = data["log_kappa_ref"]
        err = np.linalg.norm(arr["log_kappa_mean"] - ref) / np.linalg.norm(ref)
        lines.append(f"{method}: misfit {meta['misfit']:.4e} ({meta['misfit'] / dmeta['sigma_y']:.2f}"
                     f" sigma_y), nodal log-kappa error {err:.3f}, {meta['seconds']:.2f}s")
        lines.append(f"  E theta: {np.array2string(arr['theta_mean'], precision=3)}")
        if method == "mcmc":
            rows = []
            for k in range(arr["samples"].shape[1]):
                hist, edges = np.histogram(arr["samples"][:, k], bins=bins, density=True)
                rows += [(k + 1, lo, hi, h) for lo, hi, h in zip(edges[:-1], edges[1:], hist)]
            io.write_csv(out / "mcmc_hist.csv", ["k", "bin_left", "bin_right", "density"], rows)
            for w in meta.get("warnings", []):
                lines.append(f"  warning: {w}")
        else:
            lines.append(f"  converged: {meta['converged']}, iterations: {arr['delta_mu'].size}")
    io.write_arrays(out / "fields.sepuq", fields, {"config_hash": dmeta["config_hash"]})
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    return text
