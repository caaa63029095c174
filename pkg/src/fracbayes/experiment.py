"""Experiment configuration and stage pipelines (synthetic data through diagnostics).

A config is one YAML (or JSON) mapping; see ``configs/`` for complete
examples.  Each stage reads the artifacts of earlier stages from the output
directory and records what it wrote, with content hashes, in
``manifest.json``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics as dg
from .fields import (
    CovarianceSpec,
    KLBasis,
    PriorSpec,
    bounded_transform,
    field_from_coeffs,
    inverse_bounded_transform,
    kl_decompose,
    misfit,
    penalty,
)
from .gmsfem import OfflineBasis, build_coarse_grid, build_offline_basis, load_basis, save_basis
from .mapest import MapResult, augmented_tikhonov, irls, irls_weights, sensitivity
from .mesh import RectGrid, build_rect_grid, read_cell_field, write_cell_field
from .model import Affine, ForwardModel, boundary_probes, gaussian_field
from .sampling import (
    SampleEnsemble,
    hessian_gaussian,
    hessian_laplace,
    implicit_sampling,
    lmap_samples,
    make_surrogate,
    pcn_mcmc,
    select_theta,
    tempered_weights,
)

__all__ = ["StageError", "Experiment", "load_config", "config_hash", "PIPELINES", "run"]

log = logging.getLogger(__name__)

PIPELINES = ("synth", "forward", "map", "implicit", "lmap", "mcmc", "diagnose")

DEFAULTS = {
    "seed": 0,
    "grid": {"fine": [40, 40], "coarse": [4, 4]},
    "time": {"dt": 0.02, "T": 1.0},
    "model": {"gammas": [1.0, 1.0], "f": 0.0, "g": 0.0, "k": 1.0, "q": 0.0},
    "truth": {},
    "unknowns": {"alpha": False},
    "observations": {"sides": ["left", "right", "bottom", "top"], "times": [1.0]},
    "noise": {"sigma": 0.01},
    "solver": {"kind": "fine", "L_b": 6, "merge": "union", "training": {"count": 1}},
    "prior": {"family": "gaussian", "a": 1.0, "b": 1e-4},
    "map": {"max_iter": 20, "eps": 1e-3, "step": 0.5, "central": False, "irls_eps": 1e-6, "tol": 0.0},
    "sampling": {"n": 1000, "scale": 1.0, "max_scale_iter": 100, "resample": True},
    "mcmc": {"beta": 0.05, "steps": 5000},
    "diagnostics": {"realizations": 200, "max_lag": 50},
}


class StageError(RuntimeError):
    """A pipeline stage cannot run; the message names the missing stage."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True, default=str).encode()).hexdigest()


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def named_seed(cfg: dict, section: str, sec: dict | None = None) -> int:
    """Seed for ``section``: explicit ``seed`` in its mapping or derived from the master seed."""
    sec = cfg.get(section) if sec is None else sec
    if isinstance(sec, dict) and sec.get("seed") is not None:
        return int(sec["seed"])
    digest = hashlib.sha256(f"{cfg['seed']}:{section}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class _Unknown:
    basis: KLBasis
    spec: dict


class Experiment:
    """Everything derived from one config: grids, fields, forward maps and data."""

    def __init__(self, cfg: dict, out: str | os.PathLike, threads: int = 1):
        self.cfg = cfg
        self.out = Path(out)
        self.threads = max(1, int(threads))
        g = cfg["grid"]
        self.fine: RectGrid = build_rect_grid(*g["fine"])
        t = cfg["time"]
        self.dt = float(t["dt"])
        self.steps = int(round(float(t["T"]) / self.dt))
        if not np.isclose(self.steps * self.dt, float(t["T"])):
            raise ValueError("T must be a multiple of dt")
        m = cfg["model"]
        self.gammas = tuple(float(x) for x in m["gammas"])
        self.f = Affine.parse(m["f"])
        self.g = Affine.parse(m["g"])
        u = cfg["unknowns"]
        self.alpha_unknown = bool(u.get("alpha", False))
        self.unknown_k = self._unknown(u.get("k"), "k")
        self.unknown_q = self._unknown(u.get("q"), "q")
        obs = cfg["observations"]
        if "probes" in obs:
            self.probes = np.asarray(obs["probes"], dtype=int).reshape(-1, 2)
        else:
            self.probes = boundary_probes(self.fine, obs["sides"], obs["times"], self.dt)
        self.sigma = float(cfg["noise"]["sigma"])
        p = cfg["prior"]
        self.prior_family = p["family"]
        if self.prior_family not in ("gaussian", "laplace"):
            raise ValueError(f"unknown prior family {self.prior_family!r}")
        self._basis: OfflineBasis | None = None

    # ---- fields -------------------------------------------------------
    def field(self, spec, name: str) -> np.ndarray:
        """Cell field from a number, ``{file}``, ``{lognormal}`` or ``{normal}`` spec."""
        if isinstance(spec, (int, float)):
            return np.full(self.fine.n_cells, float(spec))
        if not isinstance(spec, dict):
            raise ValueError(f"{name}: unsupported field spec {spec!r}")
        if "file" in spec:
            path = Path(self.cfg["_base"]) / spec["file"]
            if not path.exists():
                raise FileNotFoundError(f"{name}: field file {path} does not exist")
            return read_cell_field(path, self.fine)
        for kind in ("lognormal", "normal"):
            if kind in spec:
                s = spec[kind]
                z = gaussian_field(self.fine, float(s["rho"]), float(s["l1"]), float(s["l2"]),
                                   int(s["seed"]), float(s.get("mean", 0.0)))
                return np.exp(z) if kind == "lognormal" else z
        raise ValueError(f"{name}: unsupported field spec {spec!r}")

    def _unknown(self, spec, name: str) -> _Unknown | None:
        if not spec:
            return None
        cov = CovarianceSpec(float(spec["rho"]), float(spec["l1"]), float(spec["l2"]))
        mean = spec.get("mean", 0.0)
        kappa = self.field(mean, f"{name} mean") if not isinstance(mean, (int, float)) else float(mean)
        return _Unknown(kl_decompose(cov, self.fine, int(spec["terms"]), kappa), spec)

    @property
    def n_params(self) -> int:
        n = 2 if self.alpha_unknown else 0
        n += self.unknown_k.basis.size if self.unknown_k else 0
        n += self.unknown_q.basis.size if self.unknown_q else 0
        return n

    def param_names(self) -> list[str]:
        names = ["x_alpha1", "x_alpha2"] if self.alpha_unknown else []
        if self.unknown_k:
            names += [f"k_{j + 1}" for j in range(self.unknown_k.basis.size)]
        if self.unknown_q:
            names += [f"q_{j + 1}" for j in range(self.unknown_q.basis.size)]
        return names

    def _coeffs(self, spec, basis: KLBasis, name: str) -> np.ndarray:
        if spec is None:
            raise StageError(f"synth: truth for {name} is missing")
        if isinstance(spec, dict):
            rng = np.random.default_rng(int(spec["seed"]))
            v = rng.standard_normal(basis.size)
            if "sparse" in spec:
                keep = rng.choice(basis.size, int(spec["sparse"]), replace=False)
                mask = np.zeros(basis.size, bool)
                mask[keep] = True
                v = np.where(mask, v * float(spec.get("scale", 1.0)), 0.0)
            return v
        v = np.asarray(spec, dtype=float)
        if v.shape != (basis.size,):
            raise ValueError(f"{name}: expected {basis.size} truth coefficients")
        return v

    def truth(self) -> np.ndarray:
        t = self.cfg["truth"]
        parts = []
        if self.alpha_unknown:
            if "alpha" not in t:
                raise StageError("synth: truth.alpha is missing")
            parts.append(inverse_bounded_transform(np.asarray(t["alpha"], dtype=float)))
        if self.unknown_k:
            parts.append(self._coeffs(t.get("k_coeffs"), self.unknown_k.basis, "k"))
        if self.unknown_q:
            parts.append(self._coeffs(t.get("q_coeffs"), self.unknown_q.basis, "q"))
        return np.concatenate(parts) if parts else np.zeros(0)

    def _known(self, name: str):
        unk = self.unknown_k if name == "k" else self.unknown_q
        if unk is not None:
            return unk.basis
        return self.field(self.cfg["model"][name], name)

    def _alpha(self):
        if self.alpha_unknown:
            return None
        a = self.cfg["truth"].get("alpha", self.cfg["model"].get("alpha"))
        if a is None:
            raise ValueError("fixed fractional orders need model.alpha or truth.alpha")
        return tuple(float(x) for x in a)

    # ---- forward maps --------------------------------------------------
    def forward(self, solver: str | None = None) -> ForwardModel:
        solver = solver or self.cfg["solver"]["kind"]
        basis = self.offline_basis() if solver == "gmsfem" else None
        return ForwardModel(self.fine, self.dt, self.steps, self.gammas, self.f, self.g, self.probes,
                            self._known("k"), self._known("q"), self._alpha(), solver, basis)

    def training_fields(self) -> np.ndarray:
        tr = self.cfg["solver"].get("training", {})
        if self.unknown_k is None:
            return self.field(self.cfg["model"]["k"], "k")[None, :]
        rng = np.random.default_rng(named_seed(self.cfg, "training", tr))
        basis = self.unknown_k.basis
        return np.stack([field_from_coeffs(basis, rng.standard_normal(basis.size))
                         for _ in range(int(tr.get("count", 1)))])

    def offline_basis(self) -> OfflineBasis:
        if self._basis is not None:
            return self._basis
        s = self.cfg["solver"]
        key = hashlib.sha256(json.dumps(
            [self.cfg["grid"], s, self.cfg["model"]["k"], self.cfg["unknowns"].get("k"), self.cfg["seed"]],
            sort_keys=True, default=str).encode()).hexdigest()[:16]
        path = self.out / f"basis_{key}.npz"
        if path.exists():
            self._basis = load_basis(path)
        else:
            cg = build_coarse_grid(self.fine, *s.get("coarse", self.cfg["grid"]["coarse"]))
            self._basis = build_offline_basis(cg, self.training_fields(), int(s["L_b"]), s.get("merge", "union"))
            self.out.mkdir(parents=True, exist_ok=True)
            save_basis(path, self._basis)
        return self._basis

    # ---- posterior pieces ----------------------------------------------
    def prior(self, lam: float) -> PriorSpec:
        p = self.cfg["prior"]
        return PriorSpec(self.prior_family, self.sigma, lam, float(p.get("a", 1.0)), float(p.get("b", 1e-4)))

    def objective(self, H: ForwardModel, d: np.ndarray, lam: float):
        prior = self.prior(lam)

        def F(v):
            return misfit(H(v), d, self.sigma) + penalty(v, prior)

        return F


# ---- artifacts ----------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    dg.write_table(path, header, rows)


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


class _Run:
    def __init__(self, exp: Experiment, stage: str):
        self.exp, self.stage = exp, stage
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.exp.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def need(self, name: str, stage: str) -> Path:
        p = self.exp.out / name
        if not p.exists():
            raise StageError(f"{self.stage}: missing {name}; run the '{stage}' stage first")
        return p


def _update_manifest(exp: Experiment, run: _Run, seeds: dict) -> None:
    path = exp.out / "manifest.json"
    man = json.loads(path.read_text()) if path.exists() else {}
    h = config_hash(exp.cfg)
    if man.get("config_hash") not in (None, h):
        log.warning("output directory was produced by a different config; stages are being mixed")
    man["config_hash"] = h
    man["config"] = {k: v for k, v in exp.cfg.items() if not k.startswith("_")}
    man.setdefault("stages", {})[run.stage] = {"seeds": seeds}
    files = man.setdefault("files", {})
    for p in run.files:
        files[str(p.relative_to(exp.out))] = {"sha256": _file_hash(p), "stage": run.stage}
    for p in exp.out.glob("basis_*.npz"):
        files[p.name] = {"sha256": _file_hash(p), "stage": "basis"}
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=str))


def _load_data(run: _Run):
    _, data = _read_csv(run.need("data.csv", "synth"))
    return data[:, -1]


def _load_map(run: _Run):
    p = run.need("map.json", "map")
    return json.loads(p.read_text())


def stage_synth(exp: Experiment, run: _Run) -> dict:
    theta = exp.truth()
    H = exp.forward("fine")
    clean = H(theta)
    seed = named_seed(exp.cfg, "noise")
    d = clean + exp.sigma * np.random.default_rng(seed).standard_normal(clean.size)
    mid = exp.fine.edge_midpoints[exp.probes[:, 0]]
    rows = [(i, int(e), int(n), n * exp.dt, mid[i, 0], mid[i, 1], clean[i], d[i])
            for i, (e, n) in enumerate(exp.probes)]
    _write_csv(run.path("data.csv"), ["obs_id", "edge", "step", "t", "x", "y", "clean", "value"], rows)
    _write_csv(run.path("truth.csv"), ["param", "value"], zip(exp.param_names(), theta))
    orders, k, q = H.split(theta)
    write_cell_field(run.path("truth_k.csv"), exp.fine, k)
    write_cell_field(run.path("truth_q.csv"), exp.fine, q)
    return {"noise": seed}


def stage_forward(exp: Experiment, run: _Run) -> dict:
    theta = exp.truth()
    H = exp.forward()
    sigma, beta = H.trajectory(theta)
    grid = exp.fine
    for n in range(1, exp.steps + 1):
        write_cell_field(run.path(f"trajectory/pressure_{n:04d}.csv"), grid, beta[n])
    flux = sigma[exp.probes[:, 1], exp.probes[:, 0]]
    mid = grid.edge_midpoints[exp.probes[:, 0]]
    rows = [(i, int(e), int(n), n * exp.dt, mid[i, 0], mid[i, 1], flux[i]) for i, (e, n) in enumerate(exp.probes)]
    _write_csv(run.path("flux.csv"), ["obs_id", "edge", "step", "t", "x", "y", "value"], rows)
    return {}


def stage_map(exp: Experiment, run: _Run) -> dict:
    d = _load_data(run)
    H = exp.forward()
    m = exp.cfg["map"]
    v0 = np.asarray(m.get("initial", np.zeros(exp.n_params)), dtype=float)
    if v0.shape != (exp.n_params,):
        raise ValueError(f"map.initial must have {exp.n_params} entries")
    common = dict(step=float(m["step"]), central=bool(m["central"]), workers=exp.threads)
    p = exp.cfg["prior"]
    if exp.prior_family == "gaussian":
        a, b = float(p.get("a", 1.0)), float(p.get("b", 1e-4))
        mu0 = float(m.get("mu0", a / b * exp.sigma**2))
        res: MapResult = augmented_tikhonov(H, d, exp.prior(1.0), v0, mu0, int(m["max_iter"]), float(m["eps"]), **common)
        lam = res.lam
    else:
        mu = float(m["mu"])
        res = irls(H, d, mu, float(m["irls_eps"]), v0, int(m["max_iter"]), sigma=exp.sigma, tol=float(m["tol"]), **common)
        lam = mu / (2 * exp.sigma**2)
    res.write_trace(run.path("map_trace.csv"))
    _write_csv(run.path("map.csv"), ["param", "value"], zip(exp.param_names(), res.v))
    S = sensitivity(H, res.v, float(m["step"]), central=bool(m["central"]), workers=exp.threads)
    np.savetxt(run.path("sensitivity.csv"), S.matrix, delimiter=",", fmt="%.17g")
    info = {"v": res.v.tolist(), "lam": lam, "converged": res.converged, "iterations": res.iterations,
            "misfit": res.misfit[-1], "n_obs": int(d.size), "n_sigma2": d.size * exp.sigma**2}
    if exp.alpha_unknown:
        info["alpha"] = bounded_transform(res.v[:2]).tolist()
    run.path("map.json").write_text(json.dumps(info, indent=2))
    return {}


def _surrogate(exp: Experiment, run: _Run, H, d):
    info = _load_map(run)
    v = np.asarray(info["v"], dtype=float)
    lam = float(info["lam"])
    S = np.loadtxt(run.need("sensitivity.csv", "map"), delimiter=",", ndmin=2)
    gamma = exp.sigma**2 * np.eye(S.shape[0])
    if exp.prior_family == "gaussian":
        hinv, L = hessian_gaussian(S, np.eye(v.size) / lam, gamma)
        F = exp.objective(H, d, lam)
        return make_surrogate(v, F(v), hinv=hinv, L=L), F, lam
    w = irls_weights(v, float(exp.cfg["map"]["irls_eps"]))
    hess, L = hessian_laplace(S, gamma, lam, w)
    F = exp.objective(H, d, lam)
    return make_surrogate(v, F(v), L=L, hess=hess), F, lam


def _write_ensemble(run: _Run, name: str, ens: SampleEnsemble) -> None:
    ens.write_csv(run.path(name))


def stage_implicit(exp: Experiment, run: _Run) -> dict:
    d = _load_data(run)
    H = exp.forward()
    sur, F, lam = _surrogate(exp, run, H, d)
    s = exp.cfg["sampling"]
    seed = named_seed(exp.cfg, "sampling")
    target = s.get("target_ess")
    ens = implicit_sampling(sur, F, int(s["n"]), seed=seed, scale=float(s.get("scale", 1.0)),
                            target_ess=None if target is None else float(target),
                            max_scale_iter=int(s["max_scale_iter"]), resample=bool(s["resample"]),
                            workers=exp.threads)
    _write_ensemble(run, "ensemble.csv", ens)
    if ens.resampled is not None:
        _write_csv(run.path("resampled.csv"), ["draw", "sample_id"], enumerate(ens.resampled.tolist()))
    summary = {"scale": ens.scale, "ess": ens.ess, "n": ens.size, "invalid": int(ens.invalid.sum()), "lam": lam}
    if target is not None:
        ts = select_theta(ens.Fhat, ens.F, float(target), int(s["max_scale_iter"]))
        summary["target_reached"] = ts.reached
    run.path("implicit.json").write_text(json.dumps(summary, indent=2))
    return {"sampling": seed}


def stage_lmap(exp: Experiment, run: _Run) -> dict:
    d = _load_data(run)
    H = exp.forward()
    sur, _, _ = _surrogate(exp, run, H, d)
    seed = named_seed(exp.cfg, "sampling")
    ens = lmap_samples(sur, int(exp.cfg["sampling"]["n"]), seed=seed)
    _write_ensemble(run, "lmap.csv", ens)
    return {"sampling": seed}


def stage_mcmc(exp: Experiment, run: _Run) -> dict:
    if exp.prior_family != "gaussian":
        raise StageError("mcmc: pCN needs a Gaussian prior")
    d = _load_data(run)
    info = _load_map(run)
    H = exp.forward()
    lam = float(info["lam"])
    c = exp.cfg["mcmc"]
    seed = named_seed(exp.cfg, "mcmc")
    scale = 1.0 / np.sqrt(lam)
    n = exp.n_params

    def phi(v):
        try:
            return misfit(H(v), d, exp.sigma)
        except Exception as exc:  # treat failed solves as rejected proposals
            log.warning("forward solve failed in pCN: %s", exc)
            return np.inf

    chain = pcn_mcmc(phi, lambda rng: scale * rng.standard_normal(n), float(c["beta"]), int(c["steps"]),
                     seed=seed, v0=np.asarray(info["v"], dtype=float))
    chain.write_csv(run.path("chain.csv"))
    run.path("mcmc.json").write_text(json.dumps({"acceptance_rate": chain.acceptance_rate, "lam": lam}, indent=2))
    return {"mcmc": seed}


def _ensemble_from_csv(path: Path):
    header, data = _read_csv(path)
    return data[:, 1], data[:, 2], data[:, 3], data[:, 4:]


def _physical(exp: Experiment, samples: np.ndarray) -> np.ndarray:
    out = samples.copy()
    if exp.alpha_unknown:
        out[:, :2] = bounded_transform(out[:, :2])
    return out


def stage_diagnose(exp: Experiment, run: _Run) -> dict:
    names = exp.param_names()
    if exp.alpha_unknown:
        names = ["alpha1", "alpha2"] + names[2:]
    done = False
    seed = named_seed(exp.cfg, "diagnostics")
    ens_path = exp.out / "ensemble.csv"
    if ens_path.exists():
        done = True
        w, F, Fh, X = _ensemble_from_csv(ens_path)
        P = _physical(exp, X)
        mo = dg.moments(P, w)
        _write_csv(run.path("moments_implicit.csv"), ["param", "mean", "std", "skewness", "kurtosis"],
                   zip(names, mo.mean, mo.std, mo.skewness, mo.kurtosis))
        conv = tempered_weights(Fh, F, 1.0)
        rows = zip(dg.BUCKET_LABELS, dg.weight_histogram(w), dg.weight_histogram(conv))
        _write_csv(run.path("weights_histogram.csv"), ["bucket", "improved", "conventional"], rows)
        # model realizations at the probes for the interval bands
        nreal = min(int(exp.cfg["diagnostics"]["realizations"]), w.size)
        rng = np.random.default_rng(seed)
        idx = rng.choice(w.size, nreal, replace=True, p=w)
        H = exp.forward()
        Y = np.array([H(X[i]) for i in idx])
        if nreal >= 100:
            band = dg.intervals(Y, exp.sigma, seed=rng)
            rows = zip(range(exp.probes.shape[0]), exp.probes[:, 0], exp.probes[:, 1], band.credible_lower,
                       band.credible_upper, band.prediction_lower, band.prediction_upper)
            _write_csv(run.path("intervals.csv"), ["obs_id", "edge", "step", "credible_lower", "credible_upper",
                                                   "prediction_lower", "prediction_upper"], rows)
        lmap_path = exp.out / "lmap.csv"
        if lmap_path.exists():
            _, _, _, XL = _ensemble_from_csv(lmap_path)
            PL = _physical(exp, XL)
            ml = dg.moments(PL)
            _write_csv(run.path("moments_lmap.csv"), ["param", "mean", "std", "skewness", "kurtosis"],
                       zip(names, ml.mean, ml.std, ml.skewness, ml.kurtosis))
            kl = dg.gaussian_kl(P, PL, weights_a=w)
            _write_csv(run.path("kl.csv"), ["pair", "kl", "regularized"], [("implicit||lmap", kl.value, int(kl.regularized))])
    chain_path = exp.out / "chain.csv"
    if chain_path.exists():
        done = True
        _, data = _read_csv(chain_path)
        X = _physical(exp, data[:, 2:])
        lag = min(int(exp.cfg["diagnostics"]["max_lag"]), X.shape[0] - 1)
        rho = dg.acf(X, lag)
        _write_csv(run.path("acf.csv"), ["lag", "acf"], enumerate(rho))
        tau, ess = dg.iact_ess(X, lag)
        _write_csv(run.path("iact.csv"), ["iact", "ess", "n"], [(tau, ess, X.shape[0])])
        mo = dg.moments(X)
        _write_csv(run.path("moments_mcmc.csv"), ["param", "mean", "std", "skewness", "kurtosis"],
                   zip(names, mo.mean, mo.std, mo.skewness, mo.kurtosis))
    if not done:
        raise StageError("diagnose: nothing to diagnose; run 'implicit', 'lmap' or 'mcmc' first")
    return {"diagnostics": seed}


STAGES = {
    "synth": stage_synth,
    "forward": stage_forward,
    "map": stage_map,
    "implicit": stage_implicit,
    "lmap": stage_lmap,
    "mcmc": stage_mcmc,
    "diagnose": stage_diagnose,
}


def run(cfg: dict, pipeline: str, out, threads: int = 1) -> list[Path]:
    """Run one stage; returns the files it wrote."""
    if pipeline not in STAGES:
        raise ValueError(f"unknown pipeline {pipeline!r}; choose from {', '.join(PIPELINES)}")
    exp = Experiment(cfg, out, threads)
    exp.out.mkdir(parents=True, exist_ok=True)
    r = _Run(exp, pipeline)
    seeds = STAGES[pipeline](exp, r)
    _update_manifest(exp, r, seeds)
    return r.files
