"""Preconditioned Metropolis-adjusted Langevin sampling of the membrane model.

Chains run in phi coordinates, where the gradient is a local stencil. A
fixed symmetric positive definite mass matrix ``M`` preconditions the
Langevin proposal

    phi' = phi - h M grad H(phi) + sqrt(2h) M^{1/2} xi,

and the Metropolis correction uses the matching Gaussian proposal density,
so the chain is reversible for ``exp(-H)``. With ``M = I`` this is plain
MALA. The default mass matrix is the covariance of the Gaussian membrane
(``A^{-1}``) when it can be applied exactly, otherwise ``Delta_L^{-2}``; both
remove the ``L^4`` stiffness of the bi-Laplacian.

All chains advance in lock step as one ``(chains, N)`` array. Each chain has
its own counter-based random stream derived from ``(seed, chain index)``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import fft as sfft

from .errors import DivergenceError, ParameterError
from .gibbs import ModelSpec, phi_energy
from .io import read_array_file, write_array_file
from .lattice import Domain
from .operators import WOODBURY_MAX, _dst_eigenvalues, _solve_box, laplacian
from .stats import effective_sample_size, integrated_autocorr_time, split_rhat

logger = logging.getLogger(__name__)

TARGET_ACCEPT = 0.574
WOODBURY_COST_RATIO = 64


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings.

    Attributes
    ----------
    step_size : float
        Initial Langevin step ``h``; adapted during burn-in.
    n_chains : int
    burn_in : int
        Steps per chain discarded before recording (adaptation happens here).
    thin : int
        Steps between recorded states.
    n_keep : int
        Total kept samples over all chains.
    seed : int
    adapt_window : int or None
        Number of burn-in steps with step-size adaptation (default: all).
    target_accept : float
    preconditioner : {"auto", "bilaplacian", "laplacian2", "none"}
    audit_every : int
        Steps between recomputations of the cached energy.
    min_ess : float
        Effective sample size below which results are flagged.
    """

    step_size: float = 0.5
    n_chains: int = 4
    burn_in: int = 500
    thin: int = 1
    n_keep: int = 4000
    seed: int = 0
    adapt_window: int | None = None
    target_accept: float = TARGET_ACCEPT
    preconditioner: str = "auto"
    audit_every: int = 1000
    min_ess: float = 100.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ParameterError("step size must be positive")
        if self.burn_in < 0 or self.n_keep < 1 or self.n_chains < 1 or self.thin < 1:
            raise ParameterError("need burn_in >= 0, n_keep >= 1, n_chains >= 1, thin >= 1")
        if self.preconditioner not in ("auto", "bilaplacian", "laplacian2", "none"):
            raise ParameterError(f"unknown preconditioner {self.preconditioner!r}")

    @property
    def draws_per_chain(self) -> int:
        return -(-self.n_keep // self.n_chains)


class Preconditioner:
    """Mass matrix ``M`` for the Langevin proposal.

    ``kind`` is one of ``"bilaplacian"`` (``M = A^{-1}``, the Gaussian
    membrane covariance), ``"laplacian2"`` (``M = Delta_L^{-2}``) or
    ``"none"``. ``"auto"`` picks the bilaplacian when its direct solver is
    cheap. ``Delta_L^{-2}`` is diagonal in sine-transform coordinates,
    so for that choice the proposal is generated and scored spectrally.
    """

    def __init__(self, spec: ModelSpec, kind: str = "auto"):
        g = spec.geom
        self.geom = g
        if kind == "auto":
            # the Woodbury solve costs O(m^2) per application; use it only
            # while that stays comparable to the O(N log N) transforms
            m = int(np.count_nonzero(g.boundary_degree()))
            cheap = m <= WOODBURY_MAX and m * m <= WOODBURY_COST_RATIO * g.n_box
            kind = "bilaplacian" if cheap else "laplacian2"
        self.kind = kind
        if kind == "bilaplacian":
            self.solver = spec.cache.bilaplacian
            if self.solver.method != "woodbury":
                raise ParameterError("the bilaplacian preconditioner needs the direct solver")
        if kind == "laplacian2":
            lam = _dst_eigenvalues(g.side, g.d).ravel()
            self._lam2 = lam**2
            self._inv_abs = 1.0 / np.abs(lam)
            self._axes = tuple(range(1, g.d + 1))

    @property
    def spectral(self) -> bool:
        return self.kind == "laplacian2"

    @property
    def noise_dim(self) -> int:
        return self.geom.n_cl1 if self.kind == "bilaplacian" else self.geom.n_box

    def _dst(self, v):
        shape = v.shape
        grid = v.reshape((-1,) + (self.geom.side,) * self.geom.d)
        return sfft.dstn(grid, type=1, axes=self._axes, norm="ortho").reshape(shape)

    def apply(self, v):
        """``M v``."""
        if self.kind == "bilaplacian":
            return self.solver.solve(v, refine=0)
        if self.kind == "laplacian2":
            return _solve_box(self.geom, v, 2)
        return v

    def apply_inv(self, v):
        """``M^{-1} v``."""
        if self.kind == "bilaplacian":
            return self.solver.apply_A(v)
        if self.kind == "laplacian2":
            return laplacian(self.geom, laplacian(self.geom, v))
        return v

    def color(self, w):
        """Map standard normal ``w`` (length ``noise_dim``) to ``N(0, M)``."""
        if self.kind == "bilaplacian":
            return self.solver.solve(laplacian(self.geom, w, out=Domain.BOX), refine=0)
        if self.kind == "laplacian2":
            return _solve_box(self.geom, w, 1)
        return w

    # -- proposal interface used by mala_step --------------------------------

    def grad_rep(self, g):
        """Cached representation of a gradient: ``M g``, or its sine transform
        in the spectral case."""
        return self._dst(g) if self.spectral else self.apply(g)

    def propose(self, x, rep_x, h, w):
        """Proposal ``y`` and the increment in the coordinates used for scoring."""
        if self.spectral:
            dhat = -h * rep_x / self._lam2 + math.sqrt(2.0 * h) * self._inv_abs * w
            return x + self._dst(dhat), dhat
        y = x - h * rep_x + math.sqrt(2.0 * h) * self.color(w)
        return y, y - x

    def log_q_ratio(self, delta, g_x, rep_x, g_y, rep_y, h):
        """``log q(x|y) - log q(y|x)`` for the Gaussian proposal kernel."""
        if self.spectral:
            u = self._lam2 * delta
            fwd = np.sum((delta + h * rep_x / self._lam2) * (u + h * rep_x), axis=-1)
            bwd = np.sum((-delta + h * rep_y / self._lam2) * (-u + h * rep_y), axis=-1)
        else:
            u = self.apply_inv(delta)
            fwd = np.sum((delta + h * rep_x) * (u + h * g_x), axis=-1)
            bwd = np.sum((-delta + h * rep_y) * (-u + h * g_y), axis=-1)
        return (fwd - bwd) / (4.0 * h)


def chain_rngs(seed: int, n_chains: int) -> list:
    """Independent Philox streams keyed by ``(seed, chain index)``."""
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(i,))))
            for i in range(n_chains)]


@dataclass(eq=False)
class ChainState:
    """State of a batch of chains.

    Attributes
    ----------
    phi : ndarray, shape (chains, N)
    eta_cl1 : ndarray, shape (chains, N_cl1)
        Cached ``Delta phi`` on CL1.
    H : ndarray, shape (chains,)
    grad : ndarray, shape (chains, N)
    grad_rep : ndarray, shape (chains, N)
        Preconditioner-specific form of the gradient (see Preconditioner).
    rngs : list of numpy Generators
    step_size : float
    n_accept, n_propose : ndarray of int
    steps : int
    """

    phi: np.ndarray
    eta_cl1: np.ndarray
    H: np.ndarray
    grad: np.ndarray
    grad_rep: np.ndarray
    rngs: list
    step_size: float
    n_accept: np.ndarray
    n_propose: np.ndarray
    steps: int = 0
    last_accept_prob: np.ndarray | None = field(default=None, repr=False)

    @property
    def acceptance_rate(self) -> float:
        tot = self.n_propose.sum()
        return float(self.n_accept.sum() / tot) if tot else float("nan")

    @property
    def eta(self) -> np.ndarray:
        """``eta = Delta_L phi`` on BOX for every chain."""
        return self.eta_cl1[:, : self.phi.shape[1]]


def _draw(rngs, dim):
    return np.stack([r.standard_normal(dim) for r in rngs])


def init_state(spec: ModelSpec, config: SamplerConfig, precond: Preconditioner) -> ChainState:
    """Start every chain from a draw of the matching Gaussian approximation."""
    rngs = chain_rngs(config.seed, config.n_chains)
    c = 0.5 * (spec.pot.c_min + spec.pot.c_max)
    noise = precond.color(_draw(rngs, precond.noise_dim))
    mean = precond.apply(spec.b_phi) / c if precond.kind != "none" else np.zeros(spec.geom.n_box)
    phi = mean + noise / math.sqrt(c) if precond.kind != "none" else np.zeros((config.n_chains, spec.geom.n_box))
    H, grad, eta = phi_energy(spec, phi)
    return ChainState(phi=phi, eta_cl1=eta, H=H, grad=grad, grad_rep=precond.grad_rep(grad), rngs=rngs,
                      step_size=config.step_size, n_accept=np.zeros(config.n_chains, dtype=np.int64),
                      n_propose=np.zeros(config.n_chains, dtype=np.int64))


def _check_finite(state_like, step):
    for arr in state_like:
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite energy or gradient at step {step}", step=step)


def mala_step(state: ChainState, spec: ModelSpec, config: SamplerConfig,
              precond: Preconditioner | None = None) -> ChainState:
    """Advance every chain by one preconditioned MALA step (in place).

    Raises
    ------
    DivergenceError
        If the proposal has a non-finite energy or gradient.
    """
    precond = precond or Preconditioner(spec, config.preconditioner)
    h = state.step_size
    x, gx, rep_x = state.phi, state.grad, state.grad_rep
    y, delta = precond.propose(x, rep_x, h, _draw(state.rngs, precond.noise_dim))
    Hy, gy, eta_y = phi_energy(spec, y)
    _check_finite((Hy, gy), state.steps)
    rep_y = precond.grad_rep(gy)
    log_alpha = state.H - Hy + precond.log_q_ratio(delta, gx, rep_x, gy, rep_y, h)
    uni = np.array([r.random() for r in state.rngs])
    accept = np.log(uni) < log_alpha
    state.phi = np.where(accept[:, None], y, x)
    state.eta_cl1 = np.where(accept[:, None], eta_y, state.eta_cl1)
    state.H = np.where(accept, Hy, state.H)
    state.grad = np.where(accept[:, None], gy, gx)
    state.grad_rep = np.where(accept[:, None], rep_y, rep_x)
    state.n_accept += accept
    state.n_propose += 1
    state.last_accept_prob = np.exp(np.minimum(log_alpha, 0.0))
    state.steps += 1
    if config.audit_every and state.steps % config.audit_every == 0:
        audit(state, spec)
    return state


def audit(state: ChainState, spec: ModelSpec, tol: float = 1e-12) -> None:
    """Recompute cached energies from ``phi`` and compare."""
    H, grad, eta = phi_energy(spec, state.phi)
    scale = np.maximum(1.0, np.abs(H))
    if np.any(np.abs(H - state.H) > tol * scale * 10) or np.any(np.abs(eta - state.eta_cl1) > tol * 10):
        raise DivergenceError(f"cached state drifted at step {state.steps}", step=state.steps)


@dataclass(eq=False)
class SampleBatch:
    """Recorded draws of one sampling run.

    Attributes
    ----------
    eta : ndarray, shape (chains, draws, N), or None
        Recorded Laplacian fields (when no observable map was given).
    obs : ndarray, shape (chains, draws, k), or None
        Recorded observables.
    """

    eta: np.ndarray | None
    obs: np.ndarray | None
    acceptance_rate: float
    step_size: float
    header: dict
    warnings: list = field(default_factory=list)

    @property
    def data(self) -> np.ndarray:
        return self.obs if self.obs is not None else self.eta


def tilt_hash(b: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(b, dtype="<f8").tobytes()).hexdigest()[:16]


def sample_Q(spec: ModelSpec, config: SamplerConfig,
             observe: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
             precond: Preconditioner | None = None) -> SampleBatch:
    """Sample the tilted Laplacian-field law by MALA in phi coordinates.

    Parameters
    ----------
    spec : ModelSpec
        Geometry, potential and tilt ``b``.
    config : SamplerConfig
    observe : callable, optional
        ``observe(phi, eta)`` with arrays of shape ``(chains, N)`` returning
        ``(chains, k)``; when given only these observables are stored.

    Returns
    -------
    SampleBatch
        A warning is attached when some recorded coordinate has an effective
        sample size below ``config.min_ess`` (checked on at most 64 of them).
    """
    precond = precond or Preconditioner(spec, config.preconditioner)
    state = init_state(spec, config, precond)
    window = config.burn_in if config.adapt_window is None else min(config.adapt_window, config.burn_in)
    log_h = math.log(state.step_size)
    for t in range(config.burn_in):
        mala_step(state, spec, config, precond)
        if t < window:
            rate = float(np.mean(state.last_accept_prob))
            log_h += (rate - config.target_accept) / (1.0 + t) ** 0.6
            log_h = min(log_h, math.log(50.0))
            state.step_size = math.exp(log_h)
    state.n_accept[:] = 0
    state.n_propose[:] = 0
    draws = config.draws_per_chain
    rec = []
    for _ in range(draws):
        for _ in range(config.thin):
            mala_step(state, spec, config, precond)
        eta = state.eta
        rec.append(observe(state.phi, eta) if observe is not None else eta.copy())
    data = np.stack(rec, axis=1)
    header = {"d": spec.geom.d, "L": spec.geom.L, "potential": spec.pot.tag,
              "b_hash": tilt_hash(spec.b), "seed": int(config.seed)}
    batch = SampleBatch(eta=None if observe is not None else data,
                        obs=data if observe is not None else None,
                        acceptance_rate=state.acceptance_rate, step_size=state.step_size,
                        header=header)
    k = data.shape[-1]
    probe = np.linspace(0, k - 1, min(k, 64)).astype(int)
    ess = min(effective_sample_size(data[:, :, i]) for i in probe)
    if ess < config.min_ess:
        batch.warnings.append(f"effective sample size {ess:.1f} below {config.min_ess}")
        logger.warning("low effective sample size %.1f", ess)
    return batch


def save_batch(path, batch: SampleBatch) -> None:
    """Persist a batch in the versioned binary array format."""
    header = dict(batch.header, acceptance_rate=batch.acceptance_rate, step_size=batch.step_size,
                  content="obs" if batch.obs is not None else "eta", kind="samples")
    write_array_file(path, batch.data, header)


def load_batch(path) -> SampleBatch:
    header, data = read_array_file(path)
    if header.get("kind") != "samples":
        raise ValueError(f"{path} does not hold a sample batch")
    is_obs = header.get("content") == "obs"
    meta = {k: header[k] for k in ("d", "L", "potential", "b_hash", "seed")}
    return SampleBatch(eta=None if is_obs else data, obs=data if is_obs else None,
                       acceptance_rate=header["acceptance_rate"], step_size=header["step_size"],
                       header=meta)


@dataclass(frozen=True)
class DiagnosticsReport:
    """Per-observable autocorrelation diagnostics.

    Attributes
    ----------
    iat, ess, rhat : ndarray, shape (k,)
    flags : list of str
    """

    iat: np.ndarray
    ess: np.ndarray
    rhat: np.ndarray
    flags: list


def diagnostics(batch, max_observables: int | None = None) -> DiagnosticsReport:
    """IAT, ESS and split R-hat for each recorded coordinate.

    Parameters
    ----------
    batch : SampleBatch or ndarray, shape (chains, draws[, k])
    """
    data = batch.data if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=float)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.size == 0:
        raise ParameterError("empty batch")
    k = data.shape[-1] if max_observables is None else min(data.shape[-1], max_observables)
    iat = np.array([integrated_autocorr_time(data[:, :, i]) for i in range(k)])
    ess = np.where(np.isfinite(iat), data.shape[0] * data.shape[1] / iat, 0.0)
    rhat = np.array([split_rhat(data[:, :, i]) for i in range(k)])
    flags = []
    if np.any(~np.isfinite(iat)):
        flags.append("infinite autocorrelation time (degenerate chain)")
    if data.shape[0] < 2:
        flags.append("fewer than two chains: R-hat unavailable")
    return DiagnosticsReport(iat=iat, ess=ess, rhat=rhat, flags=flags)
