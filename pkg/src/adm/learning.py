"""
EM fitting of the adaptive delay model.

The E-step runs the Kalman smoother on every trial.  The expected
complete-data log-likelihood then splits into an emission part, which the
factor-analysis update maximizes in closed form, and one dynamics part per
latent group.  Only the top (current-value) block of each group's companion
system depends on kernel parameters: the shift rows and the stabilizer are
fixed, so their contribution is a constant and is left out of every
objective here.

For an across group the dynamics part is a sum over bins, and the term at
bin ``t`` depends on the delays at ``t`` alone (bin 0 enters through the
stationary prior).  Delay updates therefore run as independent per-bin line
searches, vectorized over time.  Gradients flow through the conversion
chain delays -> lag blocks -> normal equations -> (A, Q) analytically:

    dG = (dW - G dV) V^{-1},    dQ = dK0 - dG W^T - G dW^T.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .convert import GramBlocks, assemble_normal_matrices, mose_blocks, solve_transition
from .inference import observation_loglik, smooth
from .model import (
    AcrossGroup,
    AdmModel,
    FaParams,
    LatentLayout,
    TrialSet,
    WithinGroup,
    stacked_gram,
)

logger = logging.getLogger(__name__)

_LOG2PI = np.log(2.0 * np.pi)

__all__ = [
    "LearningError",
    "InitError",
    "FitConfig",
    "FitTrace",
    "GroupStats",
    "MomentStats",
    "collect_stats",
    "init_params",
    "m_step_fa",
    "fa_objective",
    "across_terms",
    "within_terms",
    "q_value",
    "m_step_kernel",
    "fit",
    "grid_evaluate",
    "delay_recovery",
]


class LearningError(ArithmeticError):
    def __init__(self, message: str, *, iteration=None, params=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.params = params


class InitError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """
    Fitting options.

    ``delay_bound=None`` clamps each group's delays to ``3 l``.  Step sizes
    are initial trial steps of the backtracking line searches: delays move at
    most ``delay_step`` bins per step and ``log l`` at most
    ``log_length_step``.
    """

    n_across: int = 2
    n_within: int = 1
    order: int = 5
    max_iters: int = 200
    loglik_rel_tol: float = 1e-5
    delay_bound: float | None = None
    smoothness: float = 0.0
    delay_step: float = 1.0
    log_length_step: float = 0.25
    kernel_steps: int = 3
    max_backtracks: int = 30
    learn_length_scales: bool = True
    gradient: str = "analytic"
    e_step: str = "parallel"
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_across < 0 or self.n_within < 0 or self.n_across + self.n_within < 1:
            raise ValueError("need at least one latent group")
        if self.order < 1 or self.max_iters < 0:
            raise ValueError("order must be >= 1 and max_iters >= 0")
        if not self.loglik_rel_tol > 0:
            raise ValueError("loglik_rel_tol must be positive")
        if self.delay_bound is not None and not self.delay_bound > 0:
            raise ValueError("delay_bound must be positive")
        if self.smoothness < 0:
            raise ValueError("smoothness must be >= 0")
        if self.gradient not in ("analytic", "forward", "central"):
            raise ValueError(f"unknown gradient method {self.gradient!r}")
        if self.e_step not in ("parallel", "sequential"):
            raise ValueError(f"unknown E-step method {self.e_step!r}")


@dataclass
class FitTrace:
    """
    Per-iteration record of a fit.

    ``q_before[k]`` is the expected log-likelihood of the iteration-``k``
    parameters under their own posterior, ``q_after[k]`` that of the updated
    parameters under the same posterior; ``loglik[k]`` is the marginal
    log-likelihood of the iteration-``k`` parameters.
    """

    q_before: list = field(default_factory=list)
    q_after: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    length_scales: list = field(default_factory=list)
    delays: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iters(self) -> int:
        return len(self.q_before)

    def rows(self):
        """Tabular view: one dict per iteration."""
        for k in range(self.n_iters):
            yield {
                "iter": k,
                "q_before": self.q_before[k],
                "q_after": self.q_after[k],
                "loglik": self.loglik[k],
                "grad_norm": self.grad_norms[k],
                "length_scales": " ".join(f"{v:.6g}" for v in self.length_scales[k]),
                "seconds": self.wall_clock[k],
            }

    def m_step_gains(self) -> np.ndarray:
        return np.asarray(self.q_after) - np.asarray(self.q_before)


# ----------------------------------------------------------------------------
# sufficient statistics
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroupStats:
    """
    Trial-summed moments of one group's companion state.

    ``s11[b] = sum E[x_t x_t^T]`` over the current-value block, ``cross[b] =
    sum E[x_t x_{t-1,stack}^T]`` and ``s0[b] = sum E[x_{t-1,stack}
    x_{t-1,stack}^T]``, each with ``count[b]`` summed replicates.  The
    ``init`` fields hold the first bin's stacked second moment.
    """

    s11: np.ndarray  # (B, n, n)
    cross: np.ndarray  # (B, n, n P)
    s0: np.ndarray  # (B, n P, n P)
    count: np.ndarray  # (B,)
    init: np.ndarray  # (n P, n P)
    init_count: float


@dataclass(frozen=True, eq=False)
class MomentStats:
    across: tuple[GroupStats, ...]
    within: tuple[GroupStats, ...]
    # emission: per region (sum E[z z^T], sum E[z], sum y z^T)
    zz: tuple[np.ndarray, ...]
    z: tuple[np.ndarray, ...]
    yz: tuple[np.ndarray, ...]
    y_sum: np.ndarray  # (D,)
    y_sq: np.ndarray  # (D,)
    n_obs: int  # R * T


def collect_stats(sm, y: np.ndarray, layout: LatentLayout) -> MomentStats:
    """
    Reduce smoother output over trials into the M-step statistics.

    ``y`` is time-major ``(R, T, D)``.
    """
    m, p, x = sm.means, sm.covs, sm.cross_covs
    r, t_len, _ = m.shape
    mm = np.einsum("rti,rtj->tij", m, m) + r * p
    n, order = layout.n_regions, layout.order

    across = []
    for g in range(layout.n_across):
        sl = layout.across_block(g)
        top = np.arange(sl.start, sl.start + n)
        ms, mt = m[:, :, sl], m[:, :, top]
        if t_len > 1:
            s11 = mm[1:][:, top[:, None], top]
            cross = np.einsum("rti,rtj->tij", mt[:, 1:], ms[:, :-1]) + r * x[1:, top, sl]
            s0 = mm[:-1, sl, sl]
        else:
            s11 = np.zeros((0, n, n))
            cross = np.zeros((0, n, n * order))
            s0 = np.zeros((0, n * order, n * order))
        across.append(GroupStats(s11, cross, s0, np.full(len(s11), float(r)), mm[0, sl, sl], float(r)))

    within = []
    for w in range(layout.n_within):
        s11 = np.zeros((1, 1, 1))
        cross = np.zeros((1, 1, order))
        s0 = np.zeros((1, order, order))
        init = np.zeros((order, order))
        for i in range(n):
            sl = layout.within_block(w, i)
            init += mm[0, sl, sl]
            if t_len > 1:
                top = sl.start
                s11[0] += mm[1:, top, top].sum()
                cross[0] += (
                    np.einsum("rt,rtj->j", m[:, 1:, top], m[:, :-1, sl]) + r * x[1:, top, sl].sum(0)
                )[None]
                s0[0] += mm[:-1, sl, sl].sum(0)
        cnt = float(r * (t_len - 1) * n)
        within.append(GroupStats(s11, cross, s0, np.array([cnt]), init, float(r * n)))

    zz, z, yz = [], [], []
    for i in range(n):
        idx = layout.latent_state_indices(i)
        zz.append(mm[:, idx[:, None], idx].sum(0))
        z.append(m[:, :, idx].sum((0, 1)))
        yz.append(np.einsum("rtd,rtk->dk", y[:, :, layout.region_slice(i)], m[:, :, idx]))
    return MomentStats(
        tuple(across),
        tuple(within),
        tuple(zz),
        tuple(z),
        tuple(yz),
        y.sum((0, 1)),
        (y**2).sum((0, 1)),
        r * t_len,
    )


# ----------------------------------------------------------------------------
# factor-analysis M-step
# ----------------------------------------------------------------------------


def _fa_normal(stats: MomentStats, i: int):
    zz, z = stats.zz[i], stats.z[i]
    k = len(z)
    a = np.empty((k + 1, k + 1))
    a[:k, :k] = zz
    a[:k, k] = a[k, :k] = z
    a[k, k] = stats.n_obs
    return a


def _fa_rhs(stats: MomentStats, layout: LatentLayout, i: int):
    sl = layout.region_slice(i)
    return np.hstack([stats.yz[i], stats.y_sum[sl, None]])


def _fa_sq_resid(stats: MomentStats, layout: LatentLayout, fa: FaParams) -> np.ndarray:
    """Per-channel summed expected squared residual."""
    out = np.empty(layout.obs_dim)
    for i in range(layout.n_regions):
        sl = layout.region_slice(i)
        w = np.hstack([fa.region_block(layout, i), fa.offset[sl, None]])
        a, b = _fa_normal(stats, i), _fa_rhs(stats, layout, i)
        out[sl] = stats.y_sq[sl] - 2 * (w * b).sum(1) + np.einsum("dk,kl,dl->d", w, a, w)
    return out


def fa_objective(stats: MomentStats, layout: LatentLayout, fa: FaParams) -> float:
    """Emission part of the expected complete-data log-likelihood."""
    sq = _fa_sq_resid(stats, layout, fa)
    n = stats.n_obs
    return float(-0.5 * (n * (layout.obs_dim * _LOG2PI + np.log(fa.noise).sum()) + (sq / fa.noise).sum()))


def m_step_fa(
    stats: MomentStats,
    layout: LatentLayout,
    *,
    fix_loading: bool = False,
    noise_floor: float = 1e-8,
    jitter: float = 1e-10,
) -> FaParams:
    """
    Closed-form loading, offset and noise update.

    Each region's rows of ``[C_i d_i]`` solve the normal equations of the
    regression of ``y`` on ``[z; 1]``; ``V`` is the per-channel mean expected
    squared residual, floored at ``noise_floor``.  With ``fix_loading`` the
    loading is held at zero and ``d`` becomes the sample mean.
    """
    m = layout.n_groups
    blocks, offset = [], np.empty(layout.obs_dim)
    for i in range(layout.n_regions):
        sl = layout.region_slice(i)
        a, b = _fa_normal(stats, i), _fa_rhs(stats, layout, i)
        if fix_loading:
            w = np.zeros_like(b)
            w[:, -1] = b[:, -1] / stats.n_obs
        else:
            w = _solve_normal(a, b, jitter, region=i)
        blocks.append(w[:, :m])
        offset[sl] = w[:, -1]
    fa = FaParams.from_blocks(blocks, offset, np.ones(layout.obs_dim))
    noise = np.maximum(_fa_sq_resid(stats, layout, fa) / stats.n_obs, noise_floor)
    return FaParams(fa.loading, fa.offset, noise)


def _solve_normal(a, b, jitter, region):
    scale = np.trace(a) / len(a)
    for rel in (0.0, jitter, jitter * 1e2, jitter * 1e4):
        try:
            cf = np.linalg.cholesky(a + rel * scale * np.eye(len(a)))
        except np.linalg.LinAlgError:
            continue
        return np.linalg.solve(cf.T, np.linalg.solve(cf, b.T)).T
    raise LearningError(f"singular FA normal matrix for region {region}")


# ----------------------------------------------------------------------------
# kernel objectives and gradients
# ----------------------------------------------------------------------------


def _chol_logdet_inv(a: np.ndarray, what: str):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise LearningError(f"{what} is not positive definite") from None
    logdet = 2 * np.log(np.diagonal(c, axis1=-2, axis2=-1)).sum(-1)
    inv = np.linalg.inv(a)
    return logdet, 0.5 * (inv + np.swapaxes(inv, -1, -2))


def _dynamics_terms(blocks, dblocks, stats: GroupStats, order: int, jitter: float):
    """
    Transition terms of one group at every batch element.

    Parameters
    ----------
    blocks : (B, 2P, n, n) lag blocks
    dblocks : (K, B, 2P, n, n) or None, derivative blocks for K parameters

    Returns
    -------
    f : (B,)
    grad : (B, K) or None
    """
    n = blocks.shape[-1]
    vg, wg, k0 = assemble_normal_matrices(GramBlocks(order, blocks))
    msys = solve_transition(vg, wg, k0, jitter)
    q = msys.noise_cov
    a_bar = np.concatenate(list(np.moveaxis(msys.transitions, -3, 0)), axis=-1)  # [A_1..A_P]
    logdet, qinv = _chol_logdet_inv(q, "process covariance")
    cnt = stats.count
    a_s0 = a_bar @ stats.s0
    mt = np.swapaxes(stats.cross, -1, -2)
    psi = stats.s11 - a_bar @ mt - stats.cross @ np.swapaxes(a_bar, -1, -2) + a_s0 @ np.swapaxes(a_bar, -1, -2)
    f = -0.5 * (cnt * (logdet + n * _LOG2PI) + np.einsum("bij,bji->b", qinv, psi))
    if dblocks is None:
        return f, None

    dim = vg.shape[-1] + n
    delta = jitter * (np.trace(vg, axis1=-2, axis2=-1) + np.trace(k0, axis1=-2, axis2=-1)) / dim
    vinv = np.linalg.inv(vg + delta[:, None, None] * np.eye(vg.shape[-1]))
    g_old = np.concatenate(list(np.moveaxis(msys.transitions[..., ::-1, :, :], -3, 0)), axis=-1)
    w_q = cnt[:, None, None] * qinv - qinv @ psi @ qinv
    w_a = qinv @ (a_s0 - stats.cross)
    grads = np.empty((len(f), len(dblocks)))
    for k, db in enumerate(dblocks):
        dvg, dwg, dk0 = assemble_normal_matrices(GramBlocks(order, db))
        dg = (dwg - g_old @ dvg) @ vinv
        dq = dk0 - dg @ np.swapaxes(wg, -1, -2) - g_old @ np.swapaxes(dwg, -1, -2)
        # reverse block order to get d[A_1..A_P]
        da = dg.reshape(dg.shape[:-1] + (order, n))[..., ::-1, :].reshape(dg.shape)
        grads[:, k] = -0.5 * np.einsum("bij,bij->b", w_q, dq) - np.einsum("bij,bij->b", w_a, da)
    return f, grads


def _initial_term(blocks0, dblocks0, stats: GroupStats, order: int, jitter: float):
    """Prior term of the first bin; ``blocks0`` is ``(2P, n, n)``."""
    p0 = stacked_gram(blocks0, order, jitter)
    logdet, pinv = _chol_logdet_inv(p0, "initial covariance")
    c = stats.init_count
    f = -0.5 * (c * (logdet + len(p0) * _LOG2PI) + np.sum(pinv * stats.init))
    if dblocks0 is None:
        return f, None
    w = c * pinv - pinv @ stats.init @ pinv
    grads = np.array([-0.5 * np.sum(w * stacked_gram(db, order, 0.0)) for db in dblocks0])
    return f, grads


def _mose_with_derivs(delays: np.ndarray, length_scale: float, order: int, need: bool):
    """Lag blocks ``(B, 2P, N, N)`` and derivatives w.r.t. each delay and ``l``."""
    k = mose_blocks(delays, length_scale, order)
    if not need:
        return k, None
    lags = np.arange(1 - order, order + 1, dtype=float)
    theta = delays[..., None, :] - delays[..., :, None]
    u = lags[:, None, None] + theta[..., None, :, :]
    dk_dtheta = -k * u / length_scale**2
    n = delays.shape[-1]
    eye = np.eye(n)
    # theta_ij = d_j - d_i
    dd = [dk_dtheta * (eye[k_][None, :] - eye[k_][:, None]) for k_ in range(n)]
    dl = k * u**2 / length_scale**3
    return k, np.stack(dd + [dl])


def across_terms(delays, length_scale: float, stats: GroupStats, order: int, jitter: float, grad: bool = True):
    """
    Per-bin objective of one across group and its analytic gradient.

    Returns
    -------
    f : ndarray, shape (T,)
        ``f[0]`` is the prior term, ``f[t]`` the transition term into bin ``t``.
    grad_delays : ndarray, shape (T, N) or None
        ``d f[t] / d delays[t]``; column 0 is zero.
    grad_length : ndarray, shape (T,) or None
        ``d f[t] / d l``.
    """
    delays = np.asarray(delays, dtype=float)
    t_len, n = delays.shape
    blocks, dblocks = _mose_with_derivs(delays, length_scale, order, grad)
    f = np.empty(t_len)
    g = np.zeros((t_len, n + 1)) if grad else None
    f[0], g0 = _initial_term(blocks[0], None if dblocks is None else dblocks[:, 0], stats, order, jitter)
    if t_len > 1:
        f[1:], g1 = _dynamics_terms(blocks[1:], None if dblocks is None else dblocks[:, 1:], stats, order, jitter)
    if not grad:
        return f, None, None
    g[0] = g0
    if t_len > 1:
        g[1:] = g1
    g[:, 0] = 0.0
    return f, g[:, :n], g[:, n]


def _se_with_derivs(length_scale: float, order: int, need: bool):
    lags = np.arange(1 - order, order + 1, dtype=float)
    k = np.exp(-0.5 * (lags / length_scale) ** 2)[:, None, None]
    if not need:
        return k, None
    return k, (k * (lags**2)[:, None, None] / length_scale**3)[None]


def within_terms(length_scale: float, stats: GroupStats, order: int, jitter: float, grad: bool = True):
    """Objective of one within group (summed over regions and bins) and ``d/dl``."""
    k, dk = _se_with_derivs(length_scale, order, grad)
    f, g = _initial_term(k, dk, stats, order, jitter)
    if stats.count[0] > 0:
        f1, g1 = _dynamics_terms(k[None], None if dk is None else dk[:, None], stats, order, jitter)
        f += f1[0]
        if grad:
            g = g + g1[0]
    return float(f), (None if g is None else float(g[0]))


def q_value(model: AdmModel, stats: MomentStats) -> float:
    """
    Expected complete-data log-likelihood, up to a parameter-free constant.

    The constant is the fixed shift-row part of the companion dynamics.
    """
    lay = model.layout
    total = fa_objective(stats, lay, model.fa)
    for g, grp in enumerate(model.across):
        f, _, _ = across_terms(grp.delays, grp.length_scale, stats.across[g], lay.order, model.jitter, False)
        total += f.sum()
    for w, grp in enumerate(model.within):
        total += within_terms(grp.length_scale, stats.within[w], lay.order, model.jitter, False)[0]
    return float(total)


# ----------------------------------------------------------------------------
# kernel M-step
# ----------------------------------------------------------------------------


def _fd_across(delays, l, stats, order, jitter, method):
    """Finite-difference gradient; bins are separable so each delay column is probed once."""
    f0, _, _ = across_terms(delays, l, stats, order, jitter, False)
    t_len, n = delays.shape
    gd = np.zeros((t_len, n))
    for k in range(1, n):
        h = 1e-4 * (1 + np.abs(delays[:, k]))
        dp = delays.copy()
        dp[:, k] += h
        fp = across_terms(dp, l, stats, order, jitter, False)[0]
        if method == "central":
            dm = delays.copy()
            dm[:, k] -= h
            gd[:, k] = (fp - across_terms(dm, l, stats, order, jitter, False)[0]) / (2 * h)
        else:
            gd[:, k] = (fp - f0) / h
    h = 1e-4 * (1 + l)
    fp = across_terms(delays, l + h, stats, order, jitter, False)[0]
    if method == "central":
        gl = (fp - across_terms(delays, l - h, stats, order, jitter, False)[0]) / (2 * h)
    else:
        gl = (fp - f0) / h
    return f0, gd, gl


def _across_eval(delays, l, stats, order, jitter, method):
    if method == "analytic":
        return across_terms(delays, l, stats, order, jitter, True)
    return _fd_across(delays, l, stats, order, jitter, method)


def _penalty(delays, lam):
    if lam == 0 or len(delays) < 2:
        return 0.0, np.zeros_like(delays)
    diff = np.diff(delays, axis=0)
    g = np.zeros_like(delays)
    g[1:] -= 2 * lam * diff
    g[:-1] += 2 * lam * diff
    return -lam * float((diff**2).sum()), g


def _update_delays(delays, l, stats, order, jitter, cfg: FitConfig, bound):
    """One projected gradient-ascent step with backtracking."""
    f, gd, _ = _across_eval(delays, l, stats, order, jitter, cfg.gradient)
    if not np.all(np.isfinite(gd)):
        raise LearningError("non-finite delay gradient", params={"delays": delays, "length_scale": l})
    lam = cfg.smoothness
    if lam == 0:
        # independent line search per bin
        scale = np.abs(gd).max(1)
        pending = scale > 0
        alpha = np.where(pending, cfg.delay_step / np.where(pending, scale, 1.0), 0.0)
        new = delays.copy()
        for _ in range(cfg.max_backtracks):
            if not pending.any():
                break
            cand = np.clip(delays + alpha[:, None] * gd, -bound, bound)
            cand[:, 0] = 0.0
            fc = across_terms(cand, l, stats, order, jitter, False)[0]
            ok = pending & (fc >= f + 1e-4 * (gd * (cand - delays)).sum(1)) & (fc > f)
            new[ok] = cand[ok]
            pending &= ~ok
            alpha[pending] *= 0.5
        return new, float(np.linalg.norm(gd))

    pen, gp = _penalty(delays, lam)
    total, grad = f.sum() + pen, gd + gp
    grad[:, 0] = 0.0
    scale = np.abs(grad).max()
    if scale == 0:
        return delays, 0.0
    alpha = cfg.delay_step / scale
    for _ in range(cfg.max_backtracks):
        cand = np.clip(delays + alpha * grad, -bound, bound)
        cand[:, 0] = 0.0
        fc = across_terms(cand, l, stats, order, jitter, False)[0].sum() + _penalty(cand, lam)[0]
        if fc > total and fc >= total + 1e-4 * (grad * (cand - delays)).sum():
            return cand, float(np.linalg.norm(grad))
        alpha *= 0.5
    return delays, float(np.linalg.norm(grad))


def _line_search_log_l(fun, l, g, step, max_backtracks):
    """Backtracking ascent on ``log l`` given ``g = dF/dl``."""
    f0 = fun(l)
    g_log = g * l
    if g_log == 0 or not np.isfinite(g_log):
        return l
    delta = np.sign(g_log) * min(step, abs(g_log))
    for _ in range(max_backtracks):
        cand = l * np.exp(delta)
        try:
            fc = fun(cand)
        except (LearningError, ArithmeticError):
            fc = -np.inf
        if fc > f0 and fc >= f0 + 1e-4 * g_log * delta:
            return cand
        delta *= 0.5
    return l


def m_step_kernel(stats: MomentStats, model: AdmModel, cfg: FitConfig):
    """
    Gradient ascent on delays and length scales with the moments held fixed.

    Returns
    -------
    AdmModel
        Model with updated across and within groups.
    float
        Norm of the delay and length-scale gradient at the starting point.
    """
    lay = model.layout
    p, jit = lay.order, model.jitter
    across, norms = [], []
    for g, grp in enumerate(model.across):
        st = stats.across[g]
        d, l = grp.delays.copy(), grp.length_scale
        bound = cfg.delay_bound if cfg.delay_bound is not None else 3.0 * l
        d = np.clip(d, -bound, bound)
        for step in range(cfg.kernel_steps):
            d, gnorm = _update_delays(d, l, st, p, jit, cfg, bound)
            if step == 0:
                norms.append(gnorm)
            if cfg.learn_length_scales:
                _, _, gl = _across_eval(d, l, st, p, jit, cfg.gradient)
                gl = float(np.sum(gl))
                if step == 0:
                    norms.append(abs(gl))
                l = _line_search_log_l(
                    lambda v, d=d: float(across_terms(d, v, st, p, jit, False)[0].sum()),
                    l,
                    gl,
                    cfg.log_length_step,
                    cfg.max_backtracks,
                )
        across.append(AcrossGroup(d, l))
    within = []
    for w, grp in enumerate(model.within):
        st = stats.within[w]
        l = grp.length_scale
        if cfg.learn_length_scales:
            for step in range(cfg.kernel_steps):
                if cfg.gradient == "analytic":
                    gl = within_terms(l, st, p, jit, True)[1]
                else:
                    h = 1e-4 * (1 + l)
                    gl = (within_terms(l + h, st, p, jit, False)[0] - within_terms(l - h, st, p, jit, False)[0]) / (2 * h)
                if step == 0:
                    norms.append(abs(gl))
                l = _line_search_log_l(
                    lambda v: within_terms(v, st, p, jit, False)[0], l, gl, cfg.log_length_step, cfg.max_backtracks
                )
        within.append(WithinGroup(l))
    gnorm = float(np.linalg.norm(norms)) if norms else 0.0
    if not np.isfinite(gnorm):
        raise LearningError("non-finite kernel gradient", params={"across": across, "within": within})
    return model.with_params(across=tuple(across), within=tuple(within)), gnorm


# ----------------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------------


def _autocorr_length(z: np.ndarray, max_lag: int) -> float:
    """Lag at which the mean autocorrelation of ``z (R, T, k)`` crosses ``exp(-1/2)``."""
    z = z - z.mean((0, 1))
    var = (z**2).mean()
    if var <= 0:
        return 1.0
    target = np.exp(-0.5)
    prev = 1.0
    for lag in range(1, max_lag + 1):
        ac = (z[:, lag:] * z[:, :-lag]).mean() / var
        if ac < target:
            # linear interpolation between lag-1 and lag
            return lag - 1 + (prev - target) / (prev - ac)
        prev = ac
    return float(max_lag)


def _align_factors(scores, m_a):
    """
    Rotate each region's factors so the first ``m_a`` carry the directions
    most correlated across regions.

    ``scores`` holds per-region ``(samples, M)`` factor scores; returns per
    region ``(whitening_inverse, rotation)`` so that aligned scores are
    ``scores @ whitening @ rotation``.
    """
    n = len(scores)
    mdim = scores[0].shape[1]
    whites, unwhites = [], []
    for s in scores:
        cov = np.cov(s, rowvar=False).reshape(mdim, mdim)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.maximum(evals, 1e-12 * max(evals.max(), 1e-300))
        whites.append(evecs @ np.diag(evals**-0.5) @ evecs.T)
        unwhites.append(evecs @ np.diag(evals**0.5) @ evecs.T)
    if n < 2 or m_a == 0:
        return [(u, w, np.eye(mdim)) for u, w in zip(unwhites, whites)]
    stacked = np.hstack([s @ w for s, w in zip(scores, whites)])
    big = np.cov(stacked, rowvar=False)
    _, vecs = np.linalg.eigh(big)
    top = vecs[:, ::-1][:, :m_a]
    out = []
    for i in range(n):
        ui = top[i * mdim : (i + 1) * mdim]
        q, rr = np.linalg.qr(ui, mode="complete")
        q[:, :m_a] *= np.sign(np.diag(rr)[:m_a] + (np.diag(rr)[:m_a] == 0))
        out.append((unwhites[i], whites[i], q))
    return out


def init_params(data: TrialSet, cfg: FitConfig) -> AdmModel:
    """
    Starting point for EM.

    Per-region factor analysis on all time points gives ``C``, ``d`` and
    ``V``; the factors are then rotated so that the across groups carry the
    directions most correlated between regions.  Delays start at zero and
    each group's length scale at the lag where the mean autocorrelation of
    its factor scores drops below ``exp(-1/2)``.
    """
    from sklearn.decomposition import FactorAnalysis

    y = data.time_major()
    r, t_len, dim = y.shape
    var = y.reshape(-1, dim).var(0)
    scale = np.max(var) if np.max(var) > 0 else 1.0
    bad = np.flatnonzero(var <= 1e-12 * scale)
    if len(bad):
        raise InitError(f"channel {int(bad[0])} has zero variance")
    layout = LatentLayout(data.region_dims, cfg.n_across, cfg.n_within, cfg.order, t_len)
    mdim = layout.n_groups
    loadings, scores, means, noises = [], [], [], []
    for i in range(layout.n_regions):
        yi = y[:, :, layout.region_slice(i)].reshape(r * t_len, -1)
        if yi.shape[1] < mdim:
            raise InitError(f"region {i} has {yi.shape[1]} channels but {mdim} latents per region")
        fa = FactorAnalysis(n_components=mdim, random_state=cfg.seed).fit(yi)
        loadings.append(fa.components_.T)
        scores.append(fa.transform(yi))
        means.append(fa.mean_)
        noises.append(fa.noise_variance_)
    rot = _align_factors(scores, cfg.n_across)
    blocks, aligned = [], []
    for i, (unwhite, white, q) in enumerate(rot):
        blocks.append(loadings[i] @ unwhite @ q)
        aligned.append((scores[i] @ white @ q).reshape(r, t_len, mdim))
    aligned = np.stack(aligned, axis=-2)  # (R, T, N, M)
    max_lag = max(1, t_len // 2)
    across = []
    for g in range(cfg.n_across):
        l = _autocorr_length(aligned[..., g], max_lag)
        across.append(AcrossGroup(np.zeros((t_len, layout.n_regions)), max(l, 0.5)))
    within = []
    for w in range(cfg.n_within):
        l = _autocorr_length(aligned[..., cfg.n_across + w], max_lag)
        within.append(WithinGroup(max(l, 0.5)))
    noise = np.maximum(np.concatenate(noises), 1e-8)
    fa = FaParams.from_blocks(blocks, np.concatenate(means), noise)
    return AdmModel(layout, tuple(across), tuple(within), fa)


# ----------------------------------------------------------------------------
# EM driver
# ----------------------------------------------------------------------------


def fit(data: TrialSet, cfg: FitConfig, init: AdmModel | None = None):
    """
    Run EM.

    Each iteration smooths all trials under the current parameters, updates
    the factor-analysis parameters in closed form and then takes
    ``cfg.kernel_steps`` line-searched gradient steps on the kernel
    parameters.  Stops when the relative M-step gain falls below
    ``cfg.loglik_rel_tol`` or after ``cfg.max_iters`` iterations.

    Returns
    -------
    AdmModel
    FitTrace
    """
    y = data.time_major()
    model = init if init is not None else init_params(data, cfg)
    trace = FitTrace()
    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        try:
            filt, sm = smooth(model.to_ssm(), y, method=cfg.e_step, workers=cfg.workers)
            stats = collect_stats(sm, y, model.layout)
            q0 = q_value(model, stats)
            model_fa = model.with_params(fa=m_step_fa(stats, model.layout))
            new_model, gnorm = m_step_kernel(stats, model_fa, cfg)
            q1 = q_value(new_model, stats)
        except LearningError as err:
            raise LearningError(str(err), iteration=it, params=err.params) from err
        except (ArithmeticError, ValueError) as err:
            raise LearningError(f"{type(err).__name__}: {err}", iteration=it) from err
        trace.q_before.append(q0)
        trace.q_after.append(q1)
        trace.loglik.append(filt.loglik())
        trace.grad_norms.append(gnorm)
        trace.length_scales.append(
            [g.length_scale for g in new_model.across] + [g.length_scale for g in new_model.within]
        )
        trace.delays.append(np.stack([g.delays for g in new_model.across]) if new_model.across else None)
        trace.wall_clock.append(time.perf_counter() - t0)
        logger.info("iter %d  Q %.6f -> %.6f  loglik %.6f  |g| %.3g", it, q0, q1, trace.loglik[-1], gnorm)
        model = new_model
        if (q1 - q0) / abs(q0) < cfg.loglik_rel_tol:
            trace.converged = True
            break
    return model, trace


# ----------------------------------------------------------------------------
# evaluation helpers
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    n_across: int
    n_within: int
    order: int
    fold_logliks: tuple
    failed: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_logliks)) if self.fold_logliks and not self.failed else -np.inf


def grid_evaluate(data: TrialSet, n_across_grid, n_within_grid, order_grid, folds: int = 5, cfg: FitConfig | None = None):
    """
    K-fold cross-validated plug-in log-likelihood over a model-size grid.

    Folds split trials in a seeded order.  A failing cell is recorded with
    its error and the grid continues.  Returns cells sorted best first.
    """
    cfg = cfg or FitConfig()
    if not (list(n_across_grid) and list(n_within_grid) and list(order_grid)):
        raise ValueError("grids must be non-empty")
    if folds < 2 or folds > data.n_trials:
        raise ValueError("need 2 <= folds <= number of trials")
    order = np.random.default_rng(cfg.seed).permutation(data.n_trials)
    splits = np.array_split(order, folds)
    cells = []
    for ma in n_across_grid:
        for mw in n_within_grid:
            for p in order_grid:
                c = FitConfig(**{**cfg.__dict__, "n_across": ma, "n_within": mw, "order": p})
                lls = []
                try:
                    for k in range(folds):
                        test = splits[k]
                        train = np.concatenate([s for j, s in enumerate(splits) if j != k])
                        fitted, _ = fit(data.subset(train), c)
                        ll = observation_loglik(fitted.to_ssm(), data.subset(test).time_major())
                        lls.append(ll.plugin)
                    cells.append(GridCell(ma, mw, p, tuple(lls)))
                except (ArithmeticError, ValueError) as err:
                    logger.warning("grid cell (%d, %d, %d) failed: %s", ma, mw, p, err)
                    cells.append(GridCell(ma, mw, p, tuple(lls), failed=str(err)))
    return sorted(cells, key=lambda cell: -cell.mean)


def constant_delay_bins(delays: np.ndarray) -> np.ndarray:
    """Boolean mask of bins whose delay row equals both neighbours."""
    same = np.all(delays[1:] == delays[:-1], axis=-1)
    mask = np.ones(len(delays), dtype=bool)
    mask[1:] &= same
    mask[:-1] &= same
    return mask


def delay_recovery(fitted: AdmModel, truth: AdmModel, tol: float = 1.0):
    """
    Compare fitted and true across-group delay trajectories.

    Groups are matched by the permutation with the smallest total absolute
    error.  Returns a dict with the fraction of constant-delay bins within
    ``tol`` bins, the sign agreement at change bins and the permutation.
    """
    fd = [g.delays for g in fitted.across]
    td = [g.delays for g in truth.across]
    if len(fd) != len(td):
        raise ValueError("group counts differ")
    best = min(permutations(range(len(fd))), key=lambda pm: sum(np.abs(fd[j] - td[i]).sum() for i, j in enumerate(pm)))
    hits, total, sign_hits, sign_total = 0, 0, 0, 0
    for i, j in enumerate(best):
        mask = constant_delay_bins(td[i])
        err = np.abs(fd[j] - td[i])[:, 1:]
        hits += int((err[mask] <= tol).sum())
        total += int(err[mask].size)
        change = ~mask
        sign_hits += int((np.sign(fd[j][change, 1:]) == np.sign(td[i][change, 1:])).sum())
        sign_total += int(td[i][change, 1:].size)
    return {
        "fraction_within": hits / total if total else float("nan"),
        "sign_agreement": sign_hits / sign_total if sign_total else float("nan"),
        "permutation": best,
    }
