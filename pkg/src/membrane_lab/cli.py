"""Command-line experiment runner.

Usage::

    membrane-lab <subcommand> --config <path> [--seed N] [--out DIR]

Each run reads a JSON config, validates it completely before computing
anything, and writes a CSV report plus ``manifest.json`` into the output
directory. Outputs are written only after the computation has finished, so
a failing run leaves no partial files behind.

Exit status is 0 on success, 2 when the run completed but some statistical
estimate was flagged as unreliable, and 1 on any error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import contextlib
import datetime
import json
import logging
import math
import os
import platform
import sys
import tempfile
import time
from importlib import metadata
from typing import Literal

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bergman import (TEST_FUNCTIONS, bergman_split, continuum_comparison, layer_constant,
                      special_profile)
from .errors import ConfigError, MembraneLabError
from .gibbs import GaussianOracle, ModelSpec, gaussian_cgf
from .io import REPORT_COLUMNS, csv_text
from .lattice import Domain, build_geometry
from .limits import (CheckReport, cgf_thermo, gaussian_approx_check, infinite_volume_check,
                     marginal_check, scaling_limit_check, sub_seed)
from .operators import GreenCache, alpha_z, dirichlet_solve, laplacian
from .potential import builtin_potentials
from .sampler import SamplerConfig, diagnostics, sample_Q, save_batch

logger = logging.getLogger("membrane_lab")

SUBCOMMANDS = ("greens", "bergman", "profile", "continuum", "sample", "cgf",
               "infinite-volume", "gaussian-approx", "scaling-limit", "marginal")

EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2


# -- configuration schema ------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class PotentialConfig(_Strict):
    name: Literal["quadratic", "logcosh"] = "quadratic"
    params: dict[str, float] = Field(default_factory=dict)


class SamplerSection(_Strict):
    step_size: float = 0.5
    n_chains: int = Field(4, ge=1)
    burn_in: int = Field(500, ge=0)
    thin: int = Field(1, ge=1)
    n_keep: int = Field(4000, ge=1)
    adapt_window: int | None = None
    target_accept: float = Field(0.574, gt=0, lt=1)
    preconditioner: Literal["auto", "bilaplacian", "laplacian2", "none"] = "auto"
    min_ess: float = 100.0

    def build(self, seed: int) -> SamplerConfig:
        return SamplerConfig(seed=seed, **self.model_dump())


class SiteValue(_Strict):
    site: list[int]
    value: float


class ExperimentConfig(_Strict):
    """Schema of a run configuration (unknown keys are rejected).

    ``L`` is a single box size, ``Ls`` a sweep; subcommands that sweep use
    ``Ls`` (falling back to ``[L]``), the others need ``L``.
    """

    subcommand: Literal[SUBCOMMANDS] | None = None
    d: int = Field(ge=1)
    L: int | None = Field(None, ge=1)
    Ls: list[int] | None = None
    potential: PotentialConfig = Field(default_factory=PotentialConfig)
    seed: int = Field(0, ge=0)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    out: str | None = None
    workers: int = Field(1, ge=1)
    n_nodes: int = Field(8, ge=1)
    # check-specific parameters
    x0: list[int] | None = None
    x0s: list[list[int]] | None = None
    direction: Literal["random", "point", "constant"] = "random"
    amplitude: float = 1.0
    a_prime: list[SiteValue] | None = None
    test_function: str = "bump"
    ells: list[int] | None = None
    points: list[list[float]] | None = None
    coefs: list[float] | None = None
    gaussian_mcmc: bool = True
    with_cgf: bool = True
    reference: Literal["nu", "oracle"] = "nu"
    conditional: bool = False
    tilt: list[SiteValue] | None = None
    save_samples: bool = True

    @model_validator(mode="after")
    def _consistent(self):
        if self.L is None and not self.Ls:
            raise ValueError("one of 'L' or 'Ls' is required")
        if self.Ls is not None and any(v < 1 for v in self.Ls):
            raise ValueError("every entry of 'Ls' must be positive")
        if self.test_function not in TEST_FUNCTIONS:
            raise ValueError(f"unknown test function {self.test_function!r}")
        for name in ("x0", "x0s", "points"):
            val = getattr(self, name)
            pts = [val] if name == "x0" and val is not None else (val or [])
            if any(len(p) != self.d for p in pts):
                raise ValueError(f"points in '{name}' must have d = {self.d} coordinates")
        return self

    @property
    def sweep(self) -> list[int]:
        return list(self.Ls) if self.Ls else [self.L]

    @property
    def size(self) -> int:
        return self.L if self.L is not None else self.Ls[-1]


def _line_of(text: str, loc) -> int | None:
    """Best-effort line number of the JSON value at path ``loc``."""
    lines = text.splitlines()
    line = 0
    found = None
    for key in loc:
        if not isinstance(key, str):
            continue
        needle = json.dumps(key) + ":"
        for k in range(line, len(lines)):
            if needle in lines[k].replace('" :', '":'):
                found = line = k
                break
    return None if found is None else found + 1


def load_config(path: str, subcommand: str) -> tuple[ExperimentConfig, dict]:
    """Parse and validate a config file.

    Raises
    ------
    ConfigError
        With ``path:line:`` prefixed messages for syntax and schema errors.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    try:
        cfg = ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            where = ".".join(str(p) for p in loc) or "<root>"
            line = _line_of(text, loc)
            prefix = f"{path}:{line}" if line else path
            msgs.append(f"{prefix}: {where}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None
    if cfg.subcommand is not None and cfg.subcommand != subcommand:
        line = _line_of(text, ("subcommand",))
        raise ConfigError(f"{path}:{line}: config is for '{cfg.subcommand}', not '{subcommand}'")
    return cfg, raw


# -- runners -------------------------------------------------------------------


class RunResult:
    """In-memory outputs of one run: files to write and a summary."""

    def __init__(self):
        self.files: dict[str, str | bytes] = {}
        self.binary: dict[str, object] = {}
        self.summary: dict = {}
        self.flagged = False

    def report(self, rep: CheckReport, name: str = "report.csv"):
        self.files[name] = csv_text(rep.rows, REPORT_COLUMNS)
        self.summary.update(rep.summary)
        self.flagged = self.flagged or rep.flagged


def _potential(cfg: ExperimentConfig):
    return builtin_potentials(cfg.potential.name, dict(cfg.potential.params))


def _field_from_sites(geom, items) -> np.ndarray:
    out = np.zeros(geom.n_box)
    for item in items or []:
        out[geom.index(tuple(item.site), Domain.BOX)] += item.value
    return out


def _run_greens(cfg, seed, pool_map):
    geom = build_geometry(cfg.d, cfg.size)
    cache = GreenCache(geom)
    rng = np.random.default_rng(sub_seed(seed, 11))
    eta = rng.standard_normal(geom.n_box)
    phi = np.asarray(dirichlet_solve(geom, eta))
    rep = CheckReport("greens")
    rep.add("laplacian_of_inverse", geom.d, geom.L,
            float(np.max(np.abs(laplacian(geom, phi) - eta))), 0.0, 0.0)
    P = cache.P
    rep.add("poisson_row_sum", geom.d, geom.L, float(np.max(np.abs(P.sum(axis=0) - 1.0))), 0.0, 0.0)
    alpha_P = -P @ eta
    tilde = geom.interior_neighbor()
    rep.add("alpha_crosscheck", geom.d, geom.L,
            float(np.max(np.abs(alpha_P - phi[tilde]))), 0.0, 0.0)
    G = cache.green_matrix()
    rep.add("green_symmetry", geom.d, geom.L, float(np.max(np.abs(G - G.T))), 0.0, 0.0)
    res = RunResult()
    res.report(rep)
    return res


def _run_bergman(cfg, seed, pool_map):
    geom = build_geometry(cfg.d, cfg.size)
    cache = GreenCache(geom)
    rng = np.random.default_rng(sub_seed(seed, 12))
    a = rng.standard_normal(geom.n_cl1)
    b = rng.standard_normal(geom.n_cl1)
    sa, sb = bergman_split(geom, a, cache), bergman_split(geom, b, cache)
    again = bergman_split(geom, sa.Kperp_a, cache)
    rep = CheckReport("bergman")
    scale = float(np.dot(a, a))
    rep.add("harmonic_residual", geom.d, geom.L,
            float(np.max(np.abs(laplacian(geom, sa.Ka)))), 0.0, 0.0)
    rep.add("idempotence", geom.d, geom.L, float(np.max(np.abs(again.Kperp_a - sa.Kperp_a))), 0.0, 0.0)
    rep.add("self_adjointness", geom.d, geom.L,
            abs(float(np.dot(sa.Kperp_a, b) - np.dot(a, sb.Kperp_a))) / scale, 0.0, 0.0)
    rep.add("pythagoras", geom.d, geom.L,
            abs(float(np.dot(sa.Ka, sa.Ka) + np.dot(sa.Kperp_a, sa.Kperp_a)) - scale) / scale, 0.0, 0.0)
    res = RunResult()
    res.report(rep)
    return res


def _run_profile(cfg, seed, pool_map):
    geom = build_geometry(cfg.d, cfg.size)
    x0 = tuple(cfg.x0) if cfg.x0 is not None else (0,) * cfg.d
    prof = special_profile(geom, x0)
    v = prof.e[: geom.n_box].copy()
    v[geom.index(x0, Domain.BOX)] += 1.0
    resid = -np.asarray(alpha_z(geom, v))
    z = geom.sites(Domain.CL1)[geom.n_box:]
    rows = [{"z": tuple(int(c) for c in zz), "inner_product_residual": float(r)}
            for zz, r in zip(z, resid)]
    res = RunResult()
    res.files["profile.csv"] = csv_text(rows, ("z", "inner_product_residual"))
    res.summary.update(x0=list(x0), profile_norm=prof.norm, max_residual=float(np.max(np.abs(resid))))
    res.flagged = bool(np.max(np.abs(resid)) > 1e-9)
    return res


def _run_continuum(cfg, seed, pool_map):
    pair = TEST_FUNCTIONS[cfg.test_function](cfg.d)
    Ls = cfg.sweep
    rows = continuum_comparison(pair, Ls)
    rep = CheckReport("continuum")
    for r in rows:
        rep.add("continuum_norm", cfg.d, r.L, r.norm, 0.0, None)
    res = RunResult()
    res.summary["fitted_exponent"] = rows[0].fitted_exponent
    for L in Ls:
        geom = build_geometry(cfg.d, L)
        cache = GreenCache(geom)
        ells = cfg.ells or sorted({1, max(1, round(math.sqrt(L))), L})
        for ell in ells:
            rep.add(f"layer_constant[ell={ell}]", cfg.d, L, layer_constant(geom, pair, ell, cache),
                    0.0, None)
    res.report(rep)
    return res


def _spec(cfg, geom=None):
    geom = geom or build_geometry(cfg.d, cfg.size)
    b = _field_from_sites(geom, cfg.tilt)
    return ModelSpec(geom, _potential(cfg), b=b)


def _run_sample(cfg, seed, pool_map):
    spec = _spec(cfg)
    batch = sample_Q(spec, cfg.sampler.build(seed))
    diag = diagnostics(batch)
    rows = [{"observable": f"eta[{i}]", "iat": diag.iat[i], "ess": diag.ess[i], "rhat": diag.rhat[i]}
            for i in range(diag.iat.size)]
    res = RunResult()
    res.files["diagnostics.csv"] = csv_text(rows, ("observable", "iat", "ess", "rhat"))
    if cfg.save_samples:
        res.binary["samples.mlarray"] = batch
    res.summary.update(acceptance_rate=batch.acceptance_rate, step_size=batch.step_size,
                       warnings=batch.warnings + diag.flags)
    res.flagged = bool(batch.warnings) or bool(diag.flags)
    return res


def _direction(cfg, geom, seed):
    if cfg.direction == "random":
        a = np.random.default_rng(sub_seed(seed, 13)).standard_normal(geom.n_box)
        a /= np.linalg.norm(a)
    elif cfg.direction == "point":
        x0 = tuple(cfg.x0) if cfg.x0 is not None else (0,) * cfg.d
        a = np.zeros(geom.n_box)
        a[geom.index(x0, Domain.BOX)] = 1.0
    else:
        a = np.full(geom.n_box, 1.0 / math.sqrt(geom.n_box))
    return cfg.amplitude * a


def _run_cgf(cfg, seed, pool_map):
    spec = _spec(cfg)
    if np.any(spec.b):
        raise ConfigError("the cgf subcommand integrates from the untilted model; remove 'tilt'")
    a = _direction(cfg, spec.geom, seed)
    est = cgf_thermo(spec, a, cfg.sampler.build(seed), cfg.n_nodes, pool_map)
    ref = None
    if spec.pot.is_quadratic:
        ref = gaussian_cgf(GaussianOracle.from_potential(spec.geom, spec.pot, cache=spec.cache), a)
    rep = CheckReport("cgf")
    d, L = spec.geom.d, spec.geom.L
    for r, w, v in zip(est.nodes, est.weights, est.variances):
        rep.add(f"node_variance[r={r:.6f}]", d, L, v.value, v.se, None, flag=v.flag)
    rep.add("cgf", d, L, est.value, est.se, ref, flag=est.flag)
    res = RunResult()
    res.report(rep)
    if ref is not None:
        res.summary["within_3se"] = bool(abs(est.value - ref) <= 3 * est.se)
    return res


def _run_infinite_volume(cfg, seed, pool_map):
    if not cfg.a_prime:
        raise ConfigError("'a_prime' is required for infinite-volume")
    a_prime = {tuple(item.site): item.value for item in cfg.a_prime}
    rep = infinite_volume_check(_potential(cfg), a_prime, cfg.sweep, d=cfg.d,
                                config=cfg.sampler.build(seed), n_nodes=cfg.n_nodes, map_fn=pool_map)
    res = RunResult()
    res.report(rep)
    return res


def _run_gaussian_approx(cfg, seed, pool_map):
    pair = TEST_FUNCTIONS[cfg.test_function](cfg.d)
    rep = gaussian_approx_check(_potential(cfg), pair, cfg.sweep, amplitude=cfg.amplitude,
                                config=cfg.sampler.build(seed), n_nodes=cfg.n_nodes, map_fn=pool_map)
    res = RunResult()
    res.report(rep)
    return res


def _run_scaling_limit(cfg, seed, pool_map):
    if not cfg.points:
        raise ConfigError("'points' is required for scaling-limit")
    coefs = cfg.coefs if cfg.coefs is not None else [1.0] * len(cfg.points)
    rep = scaling_limit_check(_potential(cfg), [tuple(p) for p in cfg.points], coefs, cfg.d, cfg.sweep,
                              config=cfg.sampler.build(seed), n_nodes=cfg.n_nodes,
                              with_cgf=cfg.with_cgf, gaussian_mcmc=cfg.gaussian_mcmc, map_fn=pool_map)
    res = RunResult()
    res.report(rep)
    return res


def _run_marginal(cfg, seed, pool_map):
    x0s = cfg.x0s or ([cfg.x0] if cfg.x0 is not None else None)
    if not x0s:
        raise ConfigError("'x0s' (or 'x0') is required for marginal")
    rep = marginal_check(_spec(cfg), [tuple(p) for p in x0s], cfg.sampler.build(seed),
                         reference=cfg.reference, conditional=cfg.conditional)
    res = RunResult()
    res.report(rep)
    return res


RUNNERS = {
    "greens": _run_greens, "bergman": _run_bergman, "profile": _run_profile,
    "continuum": _run_continuum, "sample": _run_sample, "cgf": _run_cgf,
    "infinite-volume": _run_infinite_volume, "gaussian-approx": _run_gaussian_approx,
    "scaling-limit": _run_scaling_limit, "marginal": _run_marginal,
}


# -- output ---------------------------------------------------------------------


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"membrane_lab": pkg, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_outputs(out_dir: str, res: RunResult, manifest: dict) -> None:
    """Stage every file in a temporary directory, then move them in place."""
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out_dir, prefix=".staging-") as stage:
        names = []
        for name, content in res.files.items():
            mode = "wb" if isinstance(content, bytes) else "w"
            with open(os.path.join(stage, name), mode, **({} if mode == "wb" else {"newline": ""})) as fh:
                fh.write(content)
            names.append(name)
        for name, batch in res.binary.items():
            save_batch(os.path.join(stage, name), batch)
            names.append(name)
        manifest["outputs"] = sorted(names)
        with open(os.path.join(stage, "manifest.json"), "w") as fh:
            json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name in names + ["manifest.json"]:
            os.replace(os.path.join(stage, name), os.path.join(out_dir, name))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="membrane-lab",
                                description="Numerical experiments for the lattice membrane model.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


@contextlib.contextmanager
def _pool(workers: int):
    if workers <= 1:
        yield map
        return
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
        yield ex.map


def run(subcommand: str, config_path: str, seed: int | None = None, out: str | None = None) -> int:
    """Run one experiment and return the exit status."""
    t0 = time.perf_counter()
    try:
        cfg, raw = load_config(config_path, subcommand)
        seed = cfg.seed if seed is None else int(seed)
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        out_dir = out or cfg.out or os.path.join("membrane_lab_output", subcommand)
        with _pool(cfg.workers) as pool_map:
            res = RUNNERS[subcommand](cfg, seed, pool_map)
    except (MembraneLabError, ValueError) as exc:
        print(f"membrane-lab {subcommand}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # unexpected failure: still no partial outputs
        logger.debug("unexpected failure", exc_info=True)
        print(f"membrane-lab {subcommand}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    status = EXIT_FLAGGED if res.flagged else EXIT_OK
    manifest = {
        "subcommand": subcommand, "config": raw, "config_path": os.path.abspath(config_path),
        "seed": seed, "versions": _versions(), "summary": res.summary, "flagged": res.flagged,
        "exit_status": status, "wall_time_s": time.perf_counter() - t0,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    try:
        _write_outputs(out_dir, res, manifest)
    except OSError as exc:
        print(f"membrane-lab {subcommand}: error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.subcommand, args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
