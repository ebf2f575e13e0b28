"""
Stationary temporal kernels, single- and multi-output.

Every kernel maps a real lag ``tau`` (in time bins) to an ``N x N`` block
``K(tau)`` with ``K(tau)[i, j] = Cov(x_i(t + tau), x_j(t))``.  Stationarity
gives ``K(-tau) = K(tau).T``.

Nine kinds are available:

============  =======  =============================================
kind          outputs  parameters
============  =======  =============================================
``Exp``       1        variance, length_scale
``Matern32``  1        variance, length_scale
``SE``        1        variance, length_scale
``RQ``        1        variance, length_scale, alpha
``SM``        1        variances, length_scales, frequencies  (Q,)
``MOSE``      N        delays (N,), length_scale
``MOSM``      N        amplitudes, delays, phases (N, Q); length_scales,
                       frequencies (Q,)
``CSM``       N        amplitudes, phases (R, N, Q); length_scales,
                       frequencies (Q,)
``LMC``       N        coregionalization (Q, N, N); length_scales (Q,)
============  =======  =============================================

The multi-output kinds use per-output parameters (delays, phases) so that
each pairwise term is built from differences, which keeps the kernels
positive semidefinite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, ClassVar

import numpy as np

__all__ = [
    "KernelParameterError",
    "GridError",
    "StationaryKernel",
    "Exp",
    "Matern32",
    "SE",
    "RQ",
    "SM",
    "MOSE",
    "MOSM",
    "CSM",
    "LMC",
    "KINDS",
    "eval_block",
    "recommended_order",
    "gram_matrix",
    "kernel_from_dict",
    "kernel_to_dict",
]


class KernelParameterError(ValueError):
    """Raised when a kernel parameter is non-finite or out of its domain."""


class GridError(ValueError):
    """Raised when a time grid is not strictly increasing and uniform."""


def _positive(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise KernelParameterError(f"{name} must be finite, got {value!r}")
    if np.any(value <= 0):
        raise KernelParameterError(f"{name} must be positive, got {value!r}")


def _finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise KernelParameterError(f"{name} must be finite, got {value!r}")


def _as_array(x: Any, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != ndim:
        raise KernelParameterError(f"expected a {ndim}-d parameter, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StationaryKernel:
    """Base class. Subclasses implement ``_evaluate`` on an array of lags."""

    kind: ClassVar[str] = ""

    @property
    def n_outputs(self) -> int:
        return 1

    def __call__(self, tau):
        return eval_block(self, tau)

    def _evaluate(self, tau: np.ndarray) -> np.ndarray:
        """Return blocks of shape ``tau.shape + (N, N)``."""
        raise NotImplementedError

    def amplitude_bound(self) -> np.ndarray:
        """Entrywise bound ``|K(tau)[i, j]| <= bound[i, j]`` valid for all lags."""
        raise NotImplementedError

    def params(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


# ----------------------------------------------------------------------------
# single-output kinds
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _ScalarKernel(StationaryKernel):
    variance: float = 1.0
    length_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variance", float(self.variance))
        object.__setattr__(self, "length_scale", float(self.length_scale))
        _positive("variance", np.asarray(self.variance))
        _positive("length_scale", np.asarray(self.length_scale))

    def _scalar(self, tau: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _evaluate(self, tau):
        return self._scalar(tau)[..., None, None]

    def amplitude_bound(self):
        return np.array([[self.variance]])


@dataclass(frozen=True, eq=False)
class Exp(_ScalarKernel):
    """Exponential (Ornstein-Uhlenbeck) kernel ``s2 exp(-|tau| / l)``."""

    kind: ClassVar[str] = "Exp"

    def _scalar(self, tau):
        return self.variance * np.exp(-np.abs(tau) / self.length_scale)


@dataclass(frozen=True, eq=False)
class Matern32(_ScalarKernel):
    kind: ClassVar[str] = "Matern32"

    def _scalar(self, tau):
        r = np.sqrt(3.0) * np.abs(tau) / self.length_scale
        return self.variance * (1.0 + r) * np.exp(-r)


@dataclass(frozen=True, eq=False)
class SE(_ScalarKernel):
    """Squared exponential ``s2 exp(-tau^2 / (2 l^2))``."""

    kind: ClassVar[str] = "SE"

    def _scalar(self, tau):
        return self.variance * np.exp(-0.5 * (tau / self.length_scale) ** 2)


@dataclass(frozen=True, eq=False)
class RQ(_ScalarKernel):
    kind: ClassVar[str] = "RQ"
    alpha: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "alpha", float(self.alpha))
        _positive("alpha", np.asarray(self.alpha))

    def _scalar(self, tau):
        base = 1.0 + tau**2 / (2.0 * self.alpha * self.length_scale**2)
        return self.variance * base ** (-self.alpha)


@dataclass(frozen=True, eq=False)
class SM(StationaryKernel):
    """Spectral mixture: ``sum_q s2_q exp(-tau^2 / (2 l_q^2)) cos(w_q tau)``."""

    kind: ClassVar[str] = "SM"
    variances: np.ndarray = field(default_factory=lambda: np.ones(1))
    length_scales: np.ndarray = field(default_factory=lambda: np.ones(1))
    frequencies: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        for name in ("variances", "length_scales", "frequencies"):
            object.__setattr__(self, name, _as_array(getattr(self, name), 1))
        q = self.variances.shape[0]
        if q < 1 or self.length_scales.shape != (q,) or self.frequencies.shape != (q,):
            raise KernelParameterError("SM parameters must share a mixture count Q >= 1")
        _positive("variances", self.variances)
        _positive("length_scales", self.length_scales)
        _finite("frequencies", self.frequencies)

    def _evaluate(self, tau):
        t = tau[..., None]
        terms = (
            self.variances
            * np.exp(-0.5 * (t / self.length_scales) ** 2)
            * np.cos(self.frequencies * t)
        )
        return terms.sum(-1)[..., None, None]

    def amplitude_bound(self):
        return np.array([[self.variances.sum()]])


# ----------------------------------------------------------------------------
# multi-output kinds
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MOSE(StationaryKernel):
    """
    Multi-output squared exponential with temporal delays.

    ``K_ij(tau) = exp(-(tau + theta_ij)^2 / (2 l^2))`` with pairwise delay
    ``theta_ij = d_j - d_i``.  Output ``i`` behaves as a shared process
    shifted by ``d_i`` bins, so ``d_0`` is pinned to zero.  The amplitude is
    fixed to one; scale lives in the emission loading.
    """

    kind: ClassVar[str] = "MOSE"
    delays: np.ndarray = field(default_factory=lambda: np.zeros(2))
    length_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "delays", _as_array(self.delays, 1))
        object.__setattr__(self, "length_scale", float(self.length_scale))
        _finite("delays", self.delays)
        _positive("length_scale", np.asarray(self.length_scale))
        if self.delays.shape[0] < 1:
            raise KernelParameterError("MOSE needs at least one output")
        if self.delays[0] != 0.0:
            raise KernelParameterError("MOSE delays[0] must be exactly 0")

    @property
    def n_outputs(self):
        return self.delays.shape[0]

    def pairwise_delays(self) -> np.ndarray:
        """``theta[i, j] = d_j - d_i``."""
        return self.delays[None, :] - self.delays[:, None]

    def _evaluate(self, tau):
        u = tau[..., None, None] + self.pairwise_delays()
        return np.exp(-0.5 * (u / self.length_scale) ** 2)

    def amplitude_bound(self):
        n = self.n_outputs
        return np.ones((n, n))


@dataclass(frozen=True, eq=False)
class MOSM(StationaryKernel):
    """
    Multi-output spectral mixture.

    ``K_ij(tau) = sum_q a_iq a_jq exp(-(tau + th_ijq)^2 / (2 l_q^2))
    cos(w_q (tau + th_ijq) + ph_ijq)`` with ``th_ijq = delays[j, q] -
    delays[i, q]`` and ``ph_ijq = phases[j, q] - phases[i, q]``.
    """

    kind: ClassVar[str] = "MOSM"
    amplitudes: np.ndarray = field(default_factory=lambda: np.ones((2, 1)))
    delays: np.ndarray = field(default_factory=lambda: np.zeros((2, 1)))
    phases: np.ndarray = field(default_factory=lambda: np.zeros((2, 1)))
    length_scales: np.ndarray = field(default_factory=lambda: np.ones(1))
    frequencies: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        for name in ("amplitudes", "delays", "phases"):
            object.__setattr__(self, name, _as_array(getattr(self, name), 2))
        for name in ("length_scales", "frequencies"):
            object.__setattr__(self, name, _as_array(getattr(self, name), 1))
        n, q = self.amplitudes.shape
        if q < 1 or self.delays.shape != (n, q) or self.phases.shape != (n, q):
            raise KernelParameterError("MOSM per-output parameters must be (N, Q) with Q >= 1")
        if self.length_scales.shape != (q,) or self.frequencies.shape != (q,):
            raise KernelParameterError("MOSM per-component parameters must be (Q,)")
        _positive("amplitudes", self.amplitudes)
        _positive("length_scales", self.length_scales)
        _finite("delays", self.delays)
        _finite("phases", self.phases)
        _finite("frequencies", self.frequencies)

    @property
    def n_outputs(self):
        return self.amplitudes.shape[0]

    def _evaluate(self, tau):
        a, d, p = self.amplitudes, self.delays, self.phases
        amp = a[:, None, :] * a[None, :, :]  # (N, N, Q)
        th = d[None, :, :] - d[:, None, :]
        ph = p[None, :, :] - p[:, None, :]
        u = tau[..., None, None, None] + th
        terms = amp * np.exp(-0.5 * (u / self.length_scales) ** 2) * np.cos(self.frequencies * u + ph)
        return terms.sum(-1)

    def amplitude_bound(self):
        return np.einsum("iq,jq->ij", self.amplitudes, self.amplitudes)


@dataclass(frozen=True, eq=False)
class CSM(StationaryKernel):
    """
    Cross-spectral mixture.

    ``K_ij(tau) = sum_q sum_r a^r_iq a^r_jq exp(-tau^2 / (2 l_q^2))
    cos(w_q tau + phases[r, j, q] - phases[r, i, q])``.
    """

    kind: ClassVar[str] = "CSM"
    amplitudes: np.ndarray = field(default_factory=lambda: np.ones((1, 2, 1)))
    phases: np.ndarray = field(default_factory=lambda: np.zeros((1, 2, 1)))
    length_scales: np.ndarray = field(default_factory=lambda: np.ones(1))
    frequencies: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        for name in ("amplitudes", "phases"):
            object.__setattr__(self, name, _as_array(getattr(self, name), 3))
        for name in ("length_scales", "frequencies"):
            object.__setattr__(self, name, _as_array(getattr(self, name), 1))
        r, n, q = self.amplitudes.shape
        if r < 1 or q < 1 or self.phases.shape != (r, n, q):
            raise KernelParameterError("CSM amplitudes/phases must be (R, N, Q) with R, Q >= 1")
        if self.length_scales.shape != (q,) or self.frequencies.shape != (q,):
            raise KernelParameterError("CSM per-component parameters must be (Q,)")
        _positive("amplitudes", self.amplitudes)
        _positive("length_scales", self.length_scales)
        _finite("phases", self.phases)
        _finite("frequencies", self.frequencies)

    @property
    def n_outputs(self):
        return self.amplitudes.shape[1]

    def _evaluate(self, tau):
        a, p = self.amplitudes, self.phases
        amp = a[:, :, None, :] * a[:, None, :, :]  # (R, N, N, Q)
        ph = p[:, None, :, :] - p[:, :, None, :]
        t = tau[..., None, None, None, None]
        terms = amp * np.exp(-0.5 * (t / self.length_scales) ** 2) * np.cos(self.frequencies * t + ph)
        return terms.sum(axis=(-4, -1))

    def amplitude_bound(self):
        return np.einsum("riq,rjq->ij", self.amplitudes, self.amplitudes)


@dataclass(frozen=True, eq=False)
class LMC(StationaryKernel):
    """Linear model of coregionalization with SE bases: ``sum_q B_q k_q(tau)``."""

    kind: ClassVar[str] = "LMC"
    coregionalization: np.ndarray = field(default_factory=lambda: np.eye(2)[None])
    length_scales: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        object.__setattr__(self, "coregionalization", _as_array(self.coregionalization, 3))
        object.__setattr__(self, "length_scales", _as_array(self.length_scales, 1))
        b = self.coregionalization
        q, n, n2 = b.shape
        if q < 1 or n != n2 or self.length_scales.shape != (q,):
            raise KernelParameterError("LMC needs (Q, N, N) matrices and (Q,) length scales")
        _finite("coregionalization", b)
        _positive("length_scales", self.length_scales)
        if not np.allclose(b, b.transpose(0, 2, 1)):
            raise KernelParameterError("LMC coregionalization matrices must be symmetric")
        if np.linalg.eigvalsh(b).min() < -1e-10 * max(1.0, np.abs(b).max()):
            raise KernelParameterError("LMC coregionalization matrices must be PSD")

    @property
    def n_outputs(self):
        return self.coregionalization.shape[1]

    def _evaluate(self, tau):
        k = np.exp(-0.5 * (tau[..., None] / self.length_scales) ** 2)  # (..., Q)
        return np.einsum("...q,qij->...ij", k, self.coregionalization)

    def amplitude_bound(self):
        d = np.sqrt(np.clip(np.diagonal(self.coregionalization, axis1=1, axis2=2), 0, None))
        return np.einsum("qi,qj->ij", d, d)


KINDS: dict[str, type[StationaryKernel]] = {
    cls.kind: cls for cls in (Exp, Matern32, SE, RQ, SM, MOSE, MOSM, CSM, LMC)
}

_RECOMMENDED_ORDER = {
    "Exp": 1,
    "Matern32": 2,
    "SE": 2,
    "RQ": 4,
    "SM": 2,
    "MOSE": 2,
    "MOSM": 2,
    "CSM": 4,
    "LMC": 2,
}


def eval_block(kernel: StationaryKernel, tau) -> np.ndarray:
    """
    Evaluate the cross-covariance block at one or more lags.

    Parameters
    ----------
    kernel : StationaryKernel
    tau : float or array_like
        Lag(s) in time bins.

    Returns
    -------
    ndarray
        ``(N, N)`` for a scalar lag, ``tau.shape + (N, N)`` otherwise.
    """
    tau = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(tau)):
        raise KernelParameterError("lags must be finite")
    return kernel._evaluate(tau)


def recommended_order(kind: str | StationaryKernel) -> int:
    """Companion order ``P`` that gives a close state-space fit for ``kind``."""
    if isinstance(kind, StationaryKernel):
        kind = kind.kind
    try:
        return _RECOMMENDED_ORDER[kind]
    except KeyError:
        raise KernelParameterError(f"unknown kernel kind {kind!r}") from None


def gram_matrix(kernel: StationaryKernel, times) -> np.ndarray:
    """
    Joint covariance of all outputs on a uniform time grid.

    Block ``(s, t)`` of the ``NT x NT`` result is ``K(times[s] - times[t])``,
    so rows are ordered time-major, output-minor.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise GridError("times must be a non-empty 1-d array")
    if times.size > 1:
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise GridError("times must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise GridError("times must be uniformly spaced")
    lags = times[:, None] - times[None, :]
    blocks = eval_block(kernel, lags)  # (T, T, N, N)
    t, n = times.size, kernel.n_outputs
    gram = blocks.transpose(0, 2, 1, 3).reshape(t * n, t * n)
    return 0.5 * (gram + gram.T)


def kernel_to_dict(kernel: StationaryKernel) -> dict[str, Any]:
    return {"kind": kernel.kind, **kernel.params()}


def kernel_from_dict(spec: dict[str, Any]) -> StationaryKernel:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in KINDS:
        raise KernelParameterError(f"unknown kernel kind {kind!r}")
    return KINDS[kind](**spec)
