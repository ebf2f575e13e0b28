"""
Kalman filtering and RTS smoothing for time-varying linear-Gaussian SSMs.

Model, for ``t = 0, ..., T-1``::

    x_0 ~ N(m0, P0)
    x_t = F_t x_{t-1} + q_t,      q_t ~ N(0, Q_t)         (t >= 1)
    y_t = H x_t + d + e_t,        e_t ~ N(0, diag(V))

``F_0`` and ``Q_0`` are ignored; the first observation is conditioned on the
prior directly.

Two engines are provided.  The sequential one is the textbook recursion.
The parallel one rewrites filtering and smoothing as prefix combinations of
an associative operator and evaluates every prefix with a Hillis-Steele
scan, i.e. ``ceil(log2 T)`` vectorized combine levels.

Covariances do not depend on the observations, so they are computed once
and shared by every trial in a batch; only means are per trial.  Arrays of
observations may be ``(T, D)`` or ``(R, T, D)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "InferenceError",
    "GaussianSSM",
    "FilterOutput",
    "SmootherOutput",
    "ScanCounter",
    "associative_scan",
    "seq_filter",
    "seq_smoother",
    "parallel_filter",
    "parallel_smoother",
    "filter_combine",
    "smoother_combine",
    "smooth",
    "expected_loglik",
    "observation_loglik",
    "ObservationLoglik",
]

_LOG2PI = np.log(2.0 * np.pi)


class InferenceError(ArithmeticError):
    """A covariance that must be positive definite was not."""


@dataclass(frozen=True, eq=False)
class GaussianSSM:
    transitions: np.ndarray  # (T, S, S); [0] unused
    process_covs: np.ndarray  # (T, S, S); [0] unused
    emission: np.ndarray  # (D, S)
    obs_noise: np.ndarray  # (D,) diagonal variances
    offset: np.ndarray  # (D,)
    init_mean: np.ndarray  # (S,)
    init_cov: np.ndarray  # (S, S)

    @property
    def n_steps(self) -> int:
        return self.transitions.shape[0]

    @property
    def state_dim(self) -> int:
        return self.transitions.shape[-1]

    @property
    def obs_dim(self) -> int:
        return self.emission.shape[0]


@dataclass(frozen=True, eq=False)
class FilterOutput:
    predicted_means: np.ndarray  # (R, T, S)
    predicted_covs: np.ndarray  # (T, S, S)
    filtered_means: np.ndarray  # (R, T, S)
    filtered_covs: np.ndarray  # (T, S, S)
    loglik_increments: np.ndarray  # (R, T)
    batched: bool = True

    def loglik(self) -> float:
        return float(self.loglik_increments.sum())

    def means(self) -> np.ndarray:
        return self.filtered_means if self.batched else self.filtered_means[0]


@dataclass(frozen=True, eq=False)
class SmootherOutput:
    """
    Posterior moments.  ``cross_covs[t] = Cov(x_t, x_{t-1} | y)`` for ``t >= 1``
    (``cross_covs[0]`` is zero); ``gains[t]`` is the RTS gain linking ``t`` to
    ``t + 1``.
    """

    means: np.ndarray  # (R, T, S)
    covs: np.ndarray  # (T, S, S)
    cross_covs: np.ndarray  # (T, S, S)
    gains: np.ndarray  # (T, S, S)
    batched: bool = True

    def second_moments(self) -> np.ndarray:
        """``E[x_t x_t^T | y]``, shape ``(R, T, S, S)``."""
        m = self.means
        return self.covs[None] + m[..., :, None] * m[..., None, :]

    def cross_moments(self) -> np.ndarray:
        """``E[x_t x_{t-1}^T | y]`` for ``t >= 1``; index 0 holds zeros."""
        m = self.means
        out = np.zeros(m.shape[:2] + self.covs.shape[1:])
        out[:, 1:] = self.cross_covs[None, 1:] + m[:, 1:, :, None] * m[:, :-1, None, :]
        return out


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _as_batch(ssm: GaussianSSM, y) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=float)
    batched = y.ndim == 3
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3 or y.shape[1:] != (ssm.n_steps, ssm.obs_dim):
        raise ValueError(
            f"observations must be (T, D) or (R, T, D) with T={ssm.n_steps}, D={ssm.obs_dim}; got {y.shape}"
        )
    if not np.all(np.isfinite(y)):
        raise ValueError("observations contain non-finite entries")
    return y, batched


def _chol(a: np.ndarray, what: str, jitter_tries: int = 4) -> np.ndarray:
    """Batched lower Cholesky with a few relative-jitter retries."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[-1])
    scale = np.abs(np.diagonal(a, axis1=-2, axis2=-1)).mean(-1)[..., None, None]
    rel = 1e-12
    for _ in range(jitter_tries):
        try:
            return np.linalg.cholesky(a + rel * scale * eye)
        except np.linalg.LinAlgError:
            rel *= 100.0
    raise InferenceError(f"{what} is not positive definite")


def _gaussian_logpdf(resid: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log N(resid; 0, L L^T). ``resid`` is (R, T, D), ``chol`` (T, D, D)."""
    d = resid.shape[-1]
    # one factorization per bin, all trials as right-hand sides
    z = np.linalg.solve(chol, np.transpose(resid, (1, 2, 0)))  # (T, D, R)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    return -0.5 * (d * _LOG2PI + logdet[None] + (z**2).sum(1).T)


# ----------------------------------------------------------------------------
# sequential engine
# ----------------------------------------------------------------------------


def seq_filter(ssm: GaussianSSM, y) -> FilterOutput:
    """Time-varying Kalman filter with Joseph-form covariance updates."""
    y, batched = _as_batch(ssm, y)
    r, t_len, _ = y.shape
    s = ssm.state_dim
    h, v = ssm.emission, ssm.obs_noise
    resid = y - ssm.offset
    eye = np.eye(s)

    pm = np.empty((r, t_len, s))
    pp = np.empty((t_len, s, s))
    fm = np.empty((r, t_len, s))
    fp = np.empty((t_len, s, s))
    ll = np.empty((r, t_len))

    m = np.broadcast_to(ssm.init_mean, (r, s)).copy()
    p = ssm.init_cov.copy()
    for t in range(t_len):
        if t > 0:
            f = ssm.transitions[t]
            m = m @ f.T
            p = _sym(f @ p @ f.T + ssm.process_covs[t])
        pm[:, t], pp[t] = m, p
        innov_cov = _sym(h @ p @ h.T) + np.diag(v)
        try:
            cf = cho_factor(innov_cov, lower=True)
        except np.linalg.LinAlgError:
            raise InferenceError(f"innovation covariance not PD at t={t}") from None
        e = resid[:, t] - m @ h.T
        gain = cho_solve(cf, h @ p).T  # P H^T S^{-1}
        m = m + e @ gain.T
        ikh = eye - gain @ h
        p = _sym(ikh @ p @ ikh.T + (gain * v) @ gain.T)
        fm[:, t], fp[t] = m, p
        z = cho_solve(cf, e.T).T
        logdet = 2.0 * np.log(np.diag(cf[0])).sum()
        ll[:, t] = -0.5 * (h.shape[0] * _LOG2PI + logdet + (e * z).sum(-1))
    return FilterOutput(pm, pp, fm, fp, ll, batched)


def seq_smoother(ssm: GaussianSSM, filt: FilterOutput) -> SmootherOutput:
    """Rauch-Tung-Striebel backward pass."""
    fm, fp = filt.filtered_means, filt.filtered_covs
    pm, pp = filt.predicted_means, filt.predicted_covs
    t_len, s = fp.shape[0], fp.shape[-1]
    ms = fm.copy()
    ps = fp.copy()
    gains = np.zeros((t_len, s, s))
    cross = np.zeros((t_len, s, s))
    for t in range(t_len - 2, -1, -1):
        f = ssm.transitions[t + 1]
        try:
            cf = cho_factor(pp[t + 1], lower=True)
        except np.linalg.LinAlgError:
            raise InferenceError(f"predicted covariance not PD at t={t + 1}") from None
        g = cho_solve(cf, f @ fp[t]).T  # P_f F^T P_p^{-1}
        ms[:, t] = fm[:, t] + (ms[:, t + 1] - pm[:, t + 1]) @ g.T
        ps[t] = _sym(fp[t] + g @ (ps[t + 1] - pp[t + 1]) @ g.T)
        gains[t] = g
        cross[t + 1] = ps[t + 1] @ g.T
    return SmootherOutput(ms, ps, cross, gains, filt.batched)


# ----------------------------------------------------------------------------
# associative scan
# ----------------------------------------------------------------------------


@dataclass
class ScanCounter:
    """Records how many combine levels a scan executed."""

    levels: int = 0
    combines: int = 0
    history: list = field(default_factory=list)


Elements = tuple


def _chunked(combine, left: Elements, right: Elements, workers: int) -> Elements:
    n = left[0].shape[0]
    if workers <= 1 or n < 2 * workers:
        return combine(left, right)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    pieces = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

    def run(span):
        lo, hi = span
        return combine(tuple(e[lo:hi] for e in left), tuple(e[lo:hi] for e in right))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, pieces))
    return tuple(np.concatenate(arrs, axis=0) for arrs in zip(*parts))


def associative_scan(
    combine: Callable[[Elements, Elements], Elements],
    elems: Sequence[np.ndarray],
    *,
    reverse: bool = False,
    counter: ScanCounter | None = None,
    workers: int = 1,
) -> Elements:
    """
    Inclusive scan of ``combine`` over axis 0 of every array in ``elems``.

    ``combine(a, b)`` receives equally long slices where ``a`` precedes ``b``
    in time and must be associative.  Forward scans return prefixes
    ``e_0 * ... * e_t``; reverse scans return suffixes ``e_t * ... * e_{T-1}``.
    Each level combines all eligible pairs at once, so the depth is
    ``ceil(log2 T)``.
    """
    cur = tuple(np.asarray(e) for e in elems)
    n = cur[0].shape[0]
    offset = 1
    while offset < n:
        left = tuple(e[:-offset] for e in cur)
        right = tuple(e[offset:] for e in cur)
        merged = _chunked(combine, left, right, workers)
        if reverse:
            cur = tuple(np.concatenate([m, e[-offset:]], axis=0) for m, e in zip(merged, cur))
        else:
            cur = tuple(np.concatenate([e[:offset], m], axis=0) for m, e in zip(merged, cur))
        if counter is not None:
            counter.levels += 1
            counter.combines += n - offset
            counter.history.append(n - offset)
        offset *= 2
    return cur


def filter_combine(ei: Elements, ej: Elements) -> Elements:
    """
    Compose filtering elements ``(A, b, C, eta, J)``; ``ei`` is earlier.

    ``b`` and ``eta`` carry a trial axis: ``(K, R, S)``; the rest are ``(K, S, S)``.
    """
    ai, bi, ci, etai, ji = ei
    aj, bj, cj, etaj, jj = ej
    eye = np.eye(ai.shape[-1])
    ajm = np.swapaxes(np.linalg.solve(eye + jj @ ci, np.swapaxes(aj, -1, -2)), -1, -2)
    mai = np.linalg.solve(eye + ci @ jj, ai)
    ait_mt = np.swapaxes(mai, -1, -2)
    a = ajm @ ai
    b = (bi + etaj @ ci) @ np.swapaxes(ajm, -1, -2) + bj
    c = _sym(ajm @ ci @ np.swapaxes(aj, -1, -2) + cj)
    eta = (etaj - bi @ jj) @ mai + etai
    j = _sym(ait_mt @ jj @ ai + ji)
    return a, b, c, eta, j


def smoother_combine(ei: Elements, ej: Elements) -> Elements:
    """Compose smoothing elements ``(E, g, L)``; ``ei`` is earlier."""
    e_i, g_i, l_i = ei
    e_j, g_j, l_j = ej
    e = e_i @ e_j
    g = g_j @ np.swapaxes(e_i, -1, -2) + g_i
    l = _sym(e_i @ l_j @ np.swapaxes(e_i, -1, -2) + l_i)
    return e, g, l


def _filter_elements(ssm: GaussianSSM, resid: np.ndarray) -> Elements:
    r, t_len, _ = resid.shape
    s = ssm.state_dim
    h, v = ssm.emission, ssm.obs_noise
    eye = np.eye(s)

    a = np.zeros((t_len, s, s))
    b = np.zeros((t_len, r, s))
    c = np.zeros((t_len, s, s))
    eta = np.zeros((t_len, r, s))
    j = np.zeros((t_len, s, s))

    # first step conditions the prior
    m0, p0 = ssm.init_mean, ssm.init_cov
    s0 = _sym(h @ p0 @ h.T) + np.diag(v)
    l0 = _chol(s0, "innovation covariance at t=0")
    k0 = cho_solve((l0, True), h @ p0).T
    b[0] = m0 + (resid[:, 0] - h @ m0) @ k0.T
    ikh0 = eye - k0 @ h
    c[0] = _sym(ikh0 @ p0 @ ikh0.T + (k0 * v) @ k0.T)

    if t_len > 1:
        f = ssm.transitions[1:]
        q = ssm.process_covs[1:]
        sm = _sym(h @ q @ h.T) + np.diag(v)
        chol = _chol(sm, "innovation covariance")
        # S^{-1} H via two triangular solves
        sinv_h = np.linalg.solve(np.swapaxes(chol, -1, -2), np.linalg.solve(chol, h))
        k = q @ np.swapaxes(sinv_h, -1, -2)  # (T-1, S, D)
        ikh = eye - k @ h
        a[1:] = ikh @ f
        b[1:] = np.einsum("rtd,tsd->trs", resid[:, 1:], k)
        c[1:] = _sym(ikh @ q @ np.swapaxes(ikh, -1, -2) + (k * v) @ np.swapaxes(k, -1, -2))
        eta[1:] = np.swapaxes(resid[:, 1:], 0, 1) @ sinv_h @ f
        ht_sinv_h = _sym(h.T @ sinv_h)
        j[1:] = _sym(np.swapaxes(f, -1, -2) @ ht_sinv_h @ f)
    return a, b, c, eta, j


def parallel_filter(
    ssm: GaussianSSM, y, *, counter: ScanCounter | None = None, workers: int = 1
) -> FilterOutput:
    """Kalman filter via an associative prefix scan; matches :func:`seq_filter`."""
    y, batched = _as_batch(ssm, y)
    resid = y - ssm.offset
    h, v = ssm.emission, ssm.obs_noise
    elems = _filter_elements(ssm, resid)
    _, b, c, _, _ = associative_scan(filter_combine, elems, counter=counter, workers=workers)
    fm = np.swapaxes(b, 0, 1)
    fp = c

    r, t_len, _ = resid.shape
    pm = np.empty_like(fm)
    pp = np.empty_like(fp)
    pm[:, 0] = ssm.init_mean
    pp[0] = ssm.init_cov
    if t_len > 1:
        f = ssm.transitions[1:]
        pm[:, 1:] = np.einsum("tij,rtj->rti", f, fm[:, :-1])
        pp[1:] = _sym(f @ fp[:-1] @ np.swapaxes(f, -1, -2) + ssm.process_covs[1:])
    innov = _sym(h @ pp @ h.T) + np.diag(v)
    chol = _chol(innov, "innovation covariance")
    ll = _gaussian_logpdf(resid - pm @ h.T, chol)
    return FilterOutput(pm, pp, fm, fp, ll, batched)


def parallel_smoother(
    ssm: GaussianSSM, filt: FilterOutput, *, counter: ScanCounter | None = None, workers: int = 1
) -> SmootherOutput:
    """RTS smoother via a reverse associative scan; matches :func:`seq_smoother`."""
    fm, fp = filt.filtered_means, filt.filtered_covs
    t_len, s = fp.shape[0], fp.shape[-1]
    r = fm.shape[0]
    e = np.zeros((t_len, s, s))
    g = np.empty((t_len, r, s))
    l = np.empty((t_len, s, s))
    if t_len > 1:
        f = ssm.transitions[1:]
        pp = filt.predicted_covs[1:]
        try:
            e[:-1] = np.swapaxes(np.linalg.solve(pp, f @ fp[:-1]), -1, -2)
        except np.linalg.LinAlgError:
            raise InferenceError("predicted covariance is singular") from None
        ef = e[:-1] @ f
        g[:-1] = np.swapaxes(fm[:, :-1] - np.einsum("tij,rtj->rti", ef, fm[:, :-1]), 0, 1)
        l[:-1] = _sym(fp[:-1] - e[:-1] @ pp @ np.swapaxes(e[:-1], -1, -2))
    g[-1] = fm[:, -1]
    l[-1] = fp[-1]
    _, gs, ls = associative_scan(smoother_combine, (e, g, l), reverse=True, counter=counter, workers=workers)
    ms = np.swapaxes(gs, 0, 1)
    cross = np.zeros_like(ls)
    if t_len > 1:
        cross[1:] = ls[1:] @ np.swapaxes(e[:-1], -1, -2)
    return SmootherOutput(ms, ls, cross, e, filt.batched)


def smooth(ssm: GaussianSSM, y, method: str = "parallel", workers: int = 1):
    """Filter then smooth; returns ``(FilterOutput, SmootherOutput)``."""
    if method == "parallel":
        filt = parallel_filter(ssm, y, workers=workers)
        return filt, parallel_smoother(ssm, filt, workers=workers)
    if method == "sequential":
        filt = seq_filter(ssm, y)
        return filt, seq_smoother(ssm, filt)
    raise ValueError(f"unknown method {method!r}")


# ----------------------------------------------------------------------------
# likelihoods
# ----------------------------------------------------------------------------


def _logdet(a: np.ndarray, what: str) -> np.ndarray:
    sign, val = np.linalg.slogdet(a)
    if np.any(sign <= 0):
        raise InferenceError(f"{what} is not positive definite")
    return val


def expected_loglik(ssm: GaussianSSM, sm: SmootherOutput, y) -> float:
    """
    Expected complete-data log-likelihood ``E[log p(x, y)]`` under the
    smoothed posterior, summed over trials.  Includes all normalizing
    constants and the initial-state term.
    """
    y, _ = _as_batch(ssm, y)
    r, t_len, d = y.shape
    s = ssm.state_dim
    h, v = ssm.emission, ssm.obs_noise
    if np.any(v <= 0):
        raise InferenceError("observation noise must be positive")
    m, p, x = sm.means, sm.covs, sm.cross_covs

    # emission
    resid = y - ssm.offset - m @ h.T
    quad = (resid**2 / v).sum()
    trace = r * np.einsum("ds,tsu,du->", h / v[:, None], p, h)
    total = -0.5 * (r * t_len * (d * _LOG2PI + np.log(v).sum()) + quad + trace)

    # initial state
    p0 = ssm.init_cov
    cf = cho_factor(p0, lower=True)
    dm = m[:, 0] - ssm.init_mean
    scatter = r * p[0] + dm.T @ dm
    total += -0.5 * (r * (s * _LOG2PI + _logdet(p0, "initial covariance")) + np.trace(cho_solve(cf, scatter)))

    # transitions
    if t_len > 1:
        f = ssm.transitions[1:]
        q = ssm.process_covs[1:]
        dmu = m[:, 1:] - np.einsum("tij,rtj->rti", f, m[:, :-1])
        ft = np.swapaxes(f, -1, -2)
        cov_res = p[1:] - f @ np.swapaxes(x[1:], -1, -2) - x[1:] @ ft + f @ p[:-1] @ ft
        scatter = r * cov_res + np.einsum("rti,rtj->tij", dmu, dmu)
        logdet_q = _logdet(q, "process covariance")
        tr = np.trace(np.linalg.solve(q, scatter), axis1=-2, axis2=-1)
        total += -0.5 * (r * ((t_len - 1) * s * _LOG2PI + logdet_q.sum()) + tr.sum())
    return float(total)


class ObservationLoglik(NamedTuple):
    plugin: float
    marginal: float


def observation_loglik(ssm: GaussianSSM, y, method: str = "parallel") -> ObservationLoglik:
    """
    Observation log-likelihood of ``y``, summed over trials and bins.

    ``plugin`` evaluates ``sum_t log N(y_t | H x_t + d, diag(V))`` at the
    smoothed means; ``marginal`` is the exact ``sum_t log p(y_t | y_{<t})``.
    """
    y, _ = _as_batch(ssm, y)
    filt, sm = smooth(ssm, y, method)
    v = ssm.obs_noise
    resid = y - ssm.offset - sm.means @ ssm.emission.T
    r, t_len, d = y.shape
    plugin = -0.5 * (r * t_len * (d * _LOG2PI + np.log(v).sum()) + (resid**2 / v).sum())
    return ObservationLoglik(float(plugin), filt.loglik())
