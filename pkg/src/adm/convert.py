"""
Kernel to companion-form state-space conversion.

A stationary kernel fixes every second moment of its process, so the
least-squares regression of ``x_t`` on its ``P`` predecessors can be written
entirely with lag blocks ``K(tau)``.  The normal equations are factored with
a Cholesky decomposition of

    D = [[Vg, Wg.T], [Wg, K0]] + delta I,    D = L L.T,

which yields the stacked transition ``G = L2 L1^{-1} = [A_P, ..., A_1]`` and
the one-step residual covariance ``Q = L3 L3.T``.  The order-``P`` model is
then stacked into a first-order companion system.

Everything here is batched: ``blocks`` may carry leading axes, which is how
the time-varying family is converted in one pass.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov, solve_triangular

from .kernels import MOSE, StationaryKernel, eval_block

__all__ = [
    "ConversionError",
    "UnstableTransitionWarning",
    "GramBlocks",
    "MultiOrderSsm",
    "CompanionSsm",
    "CompanionSequence",
    "build_gram_blocks",
    "assemble_normal_matrices",
    "solve_transition",
    "to_companion",
    "kernel_to_markovian",
    "time_varying_family",
    "stationary_covariance",
    "lag_covariances",
    "DEFAULT_JITTER",
    "DEFAULT_STABILIZER",
]

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6
DEFAULT_STABILIZER = 1e-9
_MAX_JITTER = 1e-2


class ConversionError(ArithmeticError):
    """The normal-equation factorization failed even after jitter escalation."""

    def __init__(self, message: str, *, index=None, params=None):
        super().__init__(message)
        self.index = index
        self.params = params


class UnstableTransitionWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class GramBlocks:
    """Lag blocks ``K(tau)`` for ``tau = -P+1, ..., P``; ``blocks`` is ``(..., 2P, N, N)``."""

    order: int
    blocks: np.ndarray

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.order + 1, self.order + 1)

    def at(self, tau: int) -> np.ndarray:
        if not -self.order < tau <= self.order:
            raise KeyError(tau)
        return self.blocks[..., tau + self.order - 1, :, :]


@dataclass(frozen=True, eq=False)
class MultiOrderSsm:
    """``x_t = sum_p A_p x_{t-p} + q_t``; ``transitions[p-1] = A_p``."""

    transitions: np.ndarray  # (..., P, N, N)
    noise_cov: np.ndarray  # (..., N, N)

    @property
    def order(self) -> int:
        return self.transitions.shape[-3]


@dataclass(frozen=True, eq=False)
class CompanionSsm:
    transition: np.ndarray  # (NP, NP)
    noise_cov: np.ndarray  # (NP, NP)
    mask: np.ndarray  # (N, NP)
    stabilizer: float

    @property
    def order(self) -> int:
        return self.transition.shape[-1] // self.mask.shape[0]

    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.transition)).max())


@dataclass(frozen=True, eq=False)
class CompanionSequence:
    """A length-``T`` family of companion systems stored as stacked arrays."""

    transitions: np.ndarray  # (T, NP, NP)
    noise_covs: np.ndarray  # (T, NP, NP)
    mask: np.ndarray
    stabilizer: float

    def __len__(self):
        return self.transitions.shape[0]

    def __getitem__(self, t) -> CompanionSsm:
        return CompanionSsm(self.transitions[t], self.noise_covs[t], self.mask, self.stabilizer)


def build_gram_blocks(kernel: StationaryKernel, order: int) -> GramBlocks:
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    lags = np.arange(-order + 1, order + 1, dtype=float)
    return GramBlocks(order, eval_block(kernel, lags))


def assemble_normal_matrices(gb: GramBlocks):
    """
    Build ``(Vg, Wg, K0)`` from lag blocks.

    ``Vg`` is the ``P x P`` block-Toeplitz matrix with block ``(r, c) =
    K(r - c)``; ``Wg = [K(P), ..., K(1)]``; ``K0 = K(0)``.  Leading batch
    axes of ``gb.blocks`` are preserved.
    """
    p = gb.order
    blocks = gb.blocks
    n = blocks.shape[-1]
    batch = blocks.shape[:-3]
    r, c = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    # index of lag (r - c) within the stored range -P+1..P
    vg = blocks[..., (r - c) + p - 1, :, :]  # (..., P, P, N, N)
    vg = np.swapaxes(vg, -3, -2).reshape(batch + (n * p, n * p))
    wg = blocks[..., np.arange(2 * p - 1, p - 1, -1), :, :]  # K(P), ..., K(1)
    wg = np.swapaxes(wg, -3, -2).reshape(batch + (n, n * p))
    k0 = blocks[..., p - 1, :, :]
    return vg, wg, k0


def _jitter_base(d: np.ndarray) -> np.ndarray:
    dim = d.shape[-1]
    return np.trace(d, axis1=-2, axis2=-1) / dim


def _cholesky_with_jitter(d: np.ndarray, jitter: float):
    """Batched Cholesky of ``d + delta I``, escalating delta per failing element."""
    dim = d.shape[-1]
    eye = np.eye(dim)
    base = _jitter_base(d)[..., None, None]
    try:
        return np.linalg.cholesky(d + jitter * base * eye), None
    except np.linalg.LinAlgError:
        pass
    flat = d.reshape((-1, dim, dim))
    base_flat = base.reshape(-1)
    out = np.empty_like(flat)
    for i, (di, bi) in enumerate(zip(flat, base_flat)):
        rel = jitter
        while True:
            try:
                out[i] = np.linalg.cholesky(di + rel * bi * eye)
                break
            except np.linalg.LinAlgError:
                # a zero starting jitter must still escalate
                rel = rel * 10.0 if rel > 0 else 1e-12
                if rel > _MAX_JITTER * (1 + 1e-9):
                    idx = np.unravel_index(i, d.shape[:-2]) if d.ndim > 2 else None
                    raise ConversionError(
                        "normal matrix is not positive definite after jitter escalation",
                        index=idx,
                    ) from None
        if rel != jitter:
            logger.debug("conversion jitter escalated to %g at flat index %d", rel, i)
    return out.reshape(d.shape), True


def solve_transition(vg, wg, k0, jitter: float = DEFAULT_JITTER) -> MultiOrderSsm:
    """
    Least-squares transition matrices and residual covariance.

    ``jitter`` is relative: ``delta = jitter * trace(D) / dim(D)``.
    """
    n = k0.shape[-1]
    np_ = vg.shape[-1]
    if np_ % n or wg.shape[-2:] != (n, np_):
        raise ConversionError(f"inconsistent shapes Vg{vg.shape}, Wg{wg.shape}, K0{k0.shape}")
    p = np_ // n
    top = np.concatenate([vg, np.swapaxes(wg, -1, -2)], axis=-1)
    bottom = np.concatenate([wg, k0], axis=-1)
    d = np.concatenate([top, bottom], axis=-2)
    d = 0.5 * (d + np.swapaxes(d, -1, -2))
    chol, _ = _cholesky_with_jitter(d, jitter)
    l1 = chol[..., :np_, :np_]
    l2 = chol[..., np_:, :np_]
    l3 = chol[..., np_:, np_:]
    # G = L2 L1^{-1}  <=>  L1^T G^T = L2^T
    g = np.swapaxes(_solve_upper(np.swapaxes(l1, -1, -2), np.swapaxes(l2, -1, -2)), -1, -2)
    q = l3 @ np.swapaxes(l3, -1, -2)
    q = 0.5 * (q + np.swapaxes(q, -1, -2))
    # G columns hold [A_P, ..., A_1]
    blocks = g.reshape(g.shape[:-1] + (p, n))
    transitions = np.moveaxis(blocks, -2, -3)[..., ::-1, :, :]
    return MultiOrderSsm(np.ascontiguousarray(transitions), q)


def _solve_upper(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    if u.ndim == 2:
        return solve_triangular(u, b, lower=False)
    return np.linalg.solve(u, b)


def _companion_arrays(transitions: np.ndarray, q: np.ndarray, stabilizer: float):
    p, n = transitions.shape[-3], transitions.shape[-1]
    batch = transitions.shape[:-3]
    dim = n * p
    a_hat = np.zeros(batch + (dim, dim))
    a_hat[..., :n, :] = np.concatenate(list(np.moveaxis(transitions, -3, 0)), axis=-1)
    if p > 1:
        a_hat[..., n:, : dim - n] = np.eye(dim - n)
    q_hat = np.zeros(batch + (dim, dim))
    q_hat[..., :n, :n] = q
    if p > 1:
        q_hat[..., n:, n:] = stabilizer * np.eye(dim - n)
    return a_hat, q_hat


def _mask(n: int, p: int) -> np.ndarray:
    return np.hstack([np.eye(n), np.zeros((n, n * (p - 1)))])


def _check_radius(a_hat: np.ndarray, context: str = "") -> None:
    radius = np.abs(np.linalg.eigvals(a_hat)).max(axis=-1)
    worst = float(np.max(radius))
    logger.debug("companion spectral radius %.6f %s", worst, context)
    if worst >= 1.0:
        warnings.warn(
            f"companion transition has spectral radius {worst:.6f} >= 1 {context}".rstrip(),
            UnstableTransitionWarning,
            stacklevel=3,
        )


def to_companion(m: MultiOrderSsm, stabilizer: float = DEFAULT_STABILIZER) -> CompanionSsm:
    if stabilizer <= 0:
        raise ValueError("stabilizer must be positive")
    if m.transitions.ndim != 3 or m.noise_cov.shape != m.transitions.shape[-2:]:
        raise ConversionError(
            f"shape mismatch: transitions {m.transitions.shape}, noise {m.noise_cov.shape}"
        )
    p, n = m.transitions.shape[0], m.transitions.shape[-1]
    a_hat, q_hat = _companion_arrays(m.transitions, m.noise_cov, stabilizer)
    _check_radius(a_hat)
    return CompanionSsm(a_hat, q_hat, _mask(n, p), stabilizer)


def kernel_to_markovian(
    kernel: StationaryKernel,
    order: int,
    jitter: float = DEFAULT_JITTER,
    stabilizer: float = DEFAULT_STABILIZER,
) -> CompanionSsm:
    """Convert a stationary kernel into an order-``order`` companion system."""
    gb = build_gram_blocks(kernel, order)
    return to_companion(solve_transition(*assemble_normal_matrices(gb), jitter), stabilizer)


def mose_blocks(delays: np.ndarray, length_scale: float, order: int) -> np.ndarray:
    """
    Lag blocks of a MOSE kernel for a batch of delay vectors.

    ``delays`` is ``(..., N)``; returns ``(..., 2P, N, N)``.
    """
    delays = np.asarray(delays, dtype=float)
    lags = np.arange(-order + 1, order + 1, dtype=float)
    theta = delays[..., None, :] - delays[..., :, None]  # (..., N, N)
    u = lags[:, None, None] + theta[..., None, :, :]
    return np.exp(-0.5 * (u / length_scale) ** 2)


def time_varying_family(
    delays,
    length_scale: float,
    order: int,
    jitter: float = DEFAULT_JITTER,
    stabilizer: float = DEFAULT_STABILIZER,
) -> CompanionSequence:
    """
    Companion systems of a MOSE kernel whose delays change per time bin.

    Parameters
    ----------
    delays : array_like, shape (T, N)
        Per-bin output delays; column 0 must be zero.
    length_scale : float
        Shared across all bins.

    Returns
    -------
    CompanionSequence
        Element ``t`` equals ``kernel_to_markovian(MOSE(delays[t], l), order)``.
    """
    delays = np.asarray(delays, dtype=float)
    if delays.ndim != 2:
        raise ValueError("delays must be (T, N)")
    if np.any(delays[:, 0] != 0.0):
        raise ConversionError("delays[:, 0] must be zero")
    # validates length_scale and finiteness once
    MOSE(delays=delays[0], length_scale=length_scale)
    if not np.all(np.isfinite(delays)):
        bad = int(np.argwhere(~np.isfinite(delays))[0, 0])
        raise ConversionError("non-finite delay", index=bad, params=delays[bad])
    blocks = mose_blocks(delays, length_scale, order)
    try:
        m = solve_transition(*assemble_normal_matrices(GramBlocks(order, blocks)), jitter)
    except ConversionError as err:
        t = err.index[0] if err.index else None
        raise ConversionError(
            f"conversion failed at t={t}", index=t, params={"delays": delays[t], "length_scale": length_scale}
        ) from err
    a_hat, q_hat = _companion_arrays(m.transitions, m.noise_cov, stabilizer)
    _check_radius(a_hat, "in time-varying family")
    return CompanionSequence(a_hat, q_hat, _mask(delays.shape[1], order), stabilizer)


def stationary_covariance(comp: CompanionSsm) -> np.ndarray:
    """Solve ``S = A S A^T + Q`` for the stacked state of a stable system."""
    s = solve_discrete_lyapunov(comp.transition, comp.noise_cov)
    return 0.5 * (s + s.T)


def lag_covariances(comp: CompanionSsm, max_lag: int) -> np.ndarray:
    """
    Stationary output covariances ``E[y_{t+tau} y_t^T]`` of a companion system.

    Returns
    -------
    ndarray, shape (max_lag + 1, N, N)
    """
    s = stationary_covariance(comp)
    h, a = comp.mask, comp.transition
    out = []
    cur = s
    for _ in range(max_lag + 1):
        out.append(h @ cur @ h.T)
        cur = a @ cur
    return np.stack(out)
