"""
The adaptive delay model: latent layout, joint state-space assembly and
simulation.

Latents come in groups.  An across-region group is one MOSE process shared
by all ``N`` regions up to per-region delays that may change every bin; its
companion state has ``N * P`` coordinates.  A within-region group holds one
independent SE process per region, each a ``P``-dimensional scalar
companion.  Groups are independent, so the joint transition and process
noise are block diagonal.

The observed latent vector is ordered region-major: for region ``i`` the
``M = m_a + m_w`` entries are the across groups followed by the within
groups.  The loading ``C`` is block diagonal in that ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .convert import (
    DEFAULT_STABILIZER,
    kernel_to_markovian,
    mose_blocks,
    time_varying_family,
)
from .inference import GaussianSSM
from .kernels import SE, eval_block

__all__ = [
    "ModelError",
    "MODEL_JITTER",
    "LatentLayout",
    "FaParams",
    "AcrossGroup",
    "WithinGroup",
    "AdmModel",
    "TrialSet",
    "stacked_gram",
    "step_schedule",
    "two_region_preset",
]


class ModelError(ValueError):
    pass


#: Relative jitter (a nugget on the kernel) used when converting the model's
#: kernels.  Much larger than the conversion module's default: with integer
#: delays below ``P`` the normal equations are singular, and a 1e-6 nugget
#: lets every delay switch excite transients orders of magnitude above the
#: kernel variance while freezing the posterior around the current delays.
MODEL_JITTER = 1e-3


@dataclass(frozen=True)
class LatentLayout:
    region_dims: tuple[int, ...]
    n_across: int
    n_within: int
    order: int
    n_steps: int

    def __post_init__(self):
        object.__setattr__(self, "region_dims", tuple(int(d) for d in self.region_dims))
        if self.n_across < 0 or self.n_within < 0 or self.n_across + self.n_within < 1:
            raise ModelError("need at least one latent group")
        if self.order < 1 or self.n_steps < 1:
            raise ModelError("order and n_steps must be positive")
        if not self.region_dims or min(self.region_dims) < 1:
            raise ModelError("every region needs at least one observed dimension")

    @property
    def n_regions(self) -> int:
        return len(self.region_dims)

    @property
    def obs_dim(self) -> int:
        return sum(self.region_dims)

    @property
    def n_groups(self) -> int:
        """Latents per region, ``M``."""
        return self.n_across + self.n_within

    @property
    def across_size(self) -> int:
        return self.n_regions * self.order

    @property
    def state_dim(self) -> int:
        return (self.n_across + self.n_within) * self.n_regions * self.order

    def region_slice(self, i: int) -> slice:
        start = sum(self.region_dims[:i])
        return slice(start, start + self.region_dims[i])

    def across_block(self, g: int) -> slice:
        start = g * self.across_size
        return slice(start, start + self.across_size)

    def within_block(self, w: int, i: int) -> slice:
        start = self.n_across * self.across_size + (w * self.n_regions + i) * self.order
        return slice(start, start + self.order)

    def latent_state_indices(self, i: int) -> np.ndarray:
        """State coordinates holding region ``i``'s current latent values, length ``M``."""
        idx = [self.across_block(g).start + i for g in range(self.n_across)]
        idx += [self.within_block(w, i).start for w in range(self.n_within)]
        return np.array(idx, dtype=int)

    def selection(self) -> np.ndarray:
        """``H_joint`` of shape ``(M N, S)`` picking current values region-major."""
        m, n = self.n_groups, self.n_regions
        h = np.zeros((m * n, self.state_dim))
        for i in range(n):
            h[i * m + np.arange(m), self.latent_state_indices(i)] = 1.0
        return h


@dataclass(frozen=True, eq=False)
class FaParams:
    """Factor-analysis emission ``y = C z + d + e``, ``e ~ N(0, diag(V))``."""

    loading: np.ndarray  # (D, M N), block diagonal by region
    offset: np.ndarray  # (D,)
    noise: np.ndarray  # (D,)

    @classmethod
    def from_blocks(cls, blocks, offset, noise) -> "FaParams":
        from scipy.linalg import block_diag

        return cls(block_diag(*blocks), np.asarray(offset, float), np.asarray(noise, float))

    def region_block(self, layout: LatentLayout, i: int) -> np.ndarray:
        m = layout.n_groups
        return self.loading[layout.region_slice(i), i * m : (i + 1) * m]

    def validate(self, layout: LatentLayout) -> None:
        d, m, n = layout.obs_dim, layout.n_groups, layout.n_regions
        if self.loading.shape != (d, m * n) or self.offset.shape != (d,) or self.noise.shape != (d,):
            raise ModelError("FA parameter shapes do not match the layout")
        mask = np.zeros_like(self.loading, dtype=bool)
        for i in range(n):
            mask[layout.region_slice(i), i * m : (i + 1) * m] = True
        if np.any(self.loading[~mask] != 0):
            raise ModelError("loading must be block diagonal by region")
        if np.any(self.noise <= 0) or not np.all(np.isfinite(self.noise)):
            raise ModelError("observation noise variances must be positive")


@dataclass(frozen=True, eq=False)
class AcrossGroup:
    delays: np.ndarray  # (T, N), column 0 identically zero
    length_scale: float

    def __post_init__(self):
        d = np.array(self.delays, dtype=float)
        if d.ndim != 2 or np.any(d[:, 0] != 0):
            raise ModelError("across-group delays must be (T, N) with a zero first column")
        object.__setattr__(self, "delays", d)
        if not self.length_scale > 0:
            raise ModelError("length scale must be positive")


@dataclass(frozen=True, eq=False)
class WithinGroup:
    length_scale: float

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ModelError("length scale must be positive")


def stacked_gram(blocks: np.ndarray, order: int, jitter: float = MODEL_JITTER) -> np.ndarray:
    """
    Covariance of the stacked state ``[x_t, x_{t-1}, ..., x_{t-P+1}]``.

    Parameters
    ----------
    blocks : ndarray, shape (..., 2P, N, N)
        Lag blocks ``K(tau)`` for ``tau = -P+1, ..., P`` (the layout of
        :class:`~adm.convert.GramBlocks`).
    order : int
    jitter : float
        Relative diagonal jitter; the map is linear in ``blocks`` when 0.

    Returns
    -------
    ndarray, shape (..., N P, N P)
        Block ``(r, c)`` is ``K(c - r)``.
    """
    r, c = np.meshgrid(np.arange(order), np.arange(order), indexing="ij")
    sel = blocks[..., (c - r) + order - 1, :, :]  # (..., P, P, N, N)
    n = blocks.shape[-1]
    batch = blocks.shape[:-3]
    gram = np.swapaxes(sel, -3, -2).reshape(batch + (order * n, order * n))
    gram = 0.5 * (gram + np.swapaxes(gram, -1, -2))
    if jitter:
        dim = gram.shape[-1]
        base = np.trace(gram, axis1=-2, axis2=-1)[..., None, None] / dim
        gram = gram + jitter * base * np.eye(dim)
    return gram


@dataclass(frozen=True, eq=False)
class TrialSet:
    """``R`` trials of ``D x T`` observations."""

    y: np.ndarray  # (R, D, T)
    bin_width: float = 1.0
    region_dims: tuple[int, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 3:
            raise ModelError("trial data must be (R, D, T)")
        if not np.all(np.isfinite(y)):
            raise ModelError("trial data contain non-finite values")
        dims = tuple(int(d) for d in self.region_dims) or (y.shape[1],)
        if sum(dims) != y.shape[1]:
            raise ModelError(f"region dims {dims} do not sum to D={y.shape[1]}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "region_dims", dims)

    @property
    def n_trials(self) -> int:
        return self.y.shape[0]

    @property
    def n_steps(self) -> int:
        return self.y.shape[2]

    def time_major(self) -> np.ndarray:
        """Observations as ``(R, T, D)`` for the inference engines."""
        return np.ascontiguousarray(self.y.transpose(0, 2, 1))

    def subset(self, idx) -> "TrialSet":
        return replace(self, y=self.y[np.asarray(idx)])


@dataclass(frozen=True, eq=False)
class AdmModel:
    layout: LatentLayout
    across: tuple[AcrossGroup, ...]
    within: tuple[WithinGroup, ...]
    fa: FaParams
    jitter: float = MODEL_JITTER
    stabilizer: float = DEFAULT_STABILIZER
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "across", tuple(self.across))
        object.__setattr__(self, "within", tuple(self.within))
        lay = self.layout
        if len(self.across) != lay.n_across or len(self.within) != lay.n_within:
            raise ModelError("group counts do not match the layout")
        for g in self.across:
            if g.delays.shape != (lay.n_steps, lay.n_regions):
                raise ModelError(f"across delays must be {(lay.n_steps, lay.n_regions)}")
        self.fa.validate(lay)

    # -- dynamics ------------------------------------------------------------

    def across_dynamics(self, g: int):
        key = ("across", g)
        if key not in self._cache:
            grp = self.across[g]
            fam = time_varying_family(
                grp.delays, grp.length_scale, self.layout.order, self.jitter, self.stabilizer
            )
            self._cache[key] = (fam.transitions, fam.noise_covs)
        return self._cache[key]

    def within_dynamics(self, w: int):
        key = ("within", w)
        if key not in self._cache:
            c = kernel_to_markovian(
                SE(1.0, self.within[w].length_scale), self.layout.order, self.jitter, self.stabilizer
            )
            self._cache[key] = (c.transition, c.noise_cov)
        return self._cache[key]

    def joint_dynamics(self):
        """Block-diagonal ``(T, S, S)`` transitions and process covariances."""
        if "joint" in self._cache:
            return self._cache["joint"]
        lay = self.layout
        a = np.zeros((lay.n_steps, lay.state_dim, lay.state_dim))
        q = np.zeros_like(a)
        for g in range(lay.n_across):
            sl = lay.across_block(g)
            ag, qg = self.across_dynamics(g)
            a[:, sl, sl] = ag
            q[:, sl, sl] = qg
        for w in range(lay.n_within):
            aw, qw = self.within_dynamics(w)
            for i in range(lay.n_regions):
                sl = lay.within_block(w, i)
                a[:, sl, sl] = aw
                q[:, sl, sl] = qw
        self._cache["joint"] = (a, q)
        return a, q

    def emission(self) -> np.ndarray:
        """``E = C H_joint``, shape ``(D, S)``."""
        return self.fa.loading @ self.layout.selection()

    def assemble_joint(self, t: int):
        """``(A(t), Q(t), E)`` of the joint system at bin ``t``."""
        if not 0 <= t < self.layout.n_steps:
            raise IndexError(f"t={t} outside [0, {self.layout.n_steps})")
        a, q = self.joint_dynamics()
        return a[t], q[t], self.emission()

    def group_initial_cov(self, kind: str, g: int) -> np.ndarray:
        p = self.layout.order
        if kind == "across":
            grp = self.across[g]
            blocks = mose_blocks(grp.delays[0], grp.length_scale, p)
        else:
            blocks = eval_block(SE(1.0, self.within[g].length_scale), np.arange(1 - p, p + 1.0))
        return stacked_gram(blocks, p, self.jitter)

    def stationary_initial(self):
        """Zero mean and the block-diagonal stacked-Gram covariance at ``t = 0``."""
        lay = self.layout
        p0 = np.zeros((lay.state_dim, lay.state_dim))
        for g in range(lay.n_across):
            sl = lay.across_block(g)
            p0[sl, sl] = self.group_initial_cov("across", g)
        for w in range(lay.n_within):
            block = self.group_initial_cov("within", w)
            for i in range(lay.n_regions):
                sl = lay.within_block(w, i)
                p0[sl, sl] = block
        try:
            np.linalg.cholesky(p0)
        except np.linalg.LinAlgError:
            raise ModelError("initial covariance is not positive definite") from None
        return np.zeros(lay.state_dim), p0

    def to_ssm(self) -> GaussianSSM:
        a, q = self.joint_dynamics()
        m0, p0 = self.stationary_initial()
        return GaussianSSM(a, q, self.emission(), self.fa.noise, self.fa.offset, m0, p0)

    def with_params(self, **changes) -> "AdmModel":
        """Copy with replaced fields and a fresh dynamics cache."""
        changes.setdefault("_cache", {})
        return replace(self, **changes)

    # -- simulation ----------------------------------------------------------

    def simulate(self, n_trials: int, seed=None):
        """
        Draw ``n_trials`` independent trials.

        Returns
        -------
        TrialSet
            Observations ``(R, D, T)``.
        ndarray
            Companion states ``(R, T, S)``.
        """
        if n_trials < 1:
            raise ModelError("n_trials must be >= 1")
        rng = np.random.default_rng(seed)
        lay = self.layout
        a, q = self.joint_dynamics()
        _, p0 = self.stationary_initial()
        s = lay.state_dim
        lq = np.linalg.cholesky(q[1:]) if lay.n_steps > 1 else None
        x = np.empty((n_trials, lay.n_steps, s))
        x[:, 0] = rng.standard_normal((n_trials, s)) @ np.linalg.cholesky(p0).T
        for t in range(1, lay.n_steps):
            noise = rng.standard_normal((n_trials, s)) @ lq[t - 1].T
            x[:, t] = x[:, t - 1] @ a[t].T + noise
        e = self.emission()
        eps = rng.standard_normal((n_trials, lay.n_steps, lay.obs_dim)) * np.sqrt(self.fa.noise)
        y = x @ e.T + self.fa.offset + eps
        return TrialSet(y.transpose(0, 2, 1), 1.0, lay.region_dims), x


def step_schedule(n_steps: int, base: float, burst: float, start: int, stop: int) -> np.ndarray:
    """``base`` everywhere except ``burst`` on bins ``start <= t < stop``."""
    out = np.full(n_steps, float(base))
    out[start:stop] = burst
    return out


def two_region_preset(
    seed=0,
    *,
    neurons_per_region: int = 50,
    n_steps: int = 200,
    order: int = 5,
    across_length_scale: float = 5.0,
    within_length_scale: float = 2.5,
    noise_range: tuple[float, float] = (0.5, 1.0),
) -> AdmModel:
    """
    Ground truth for the two-region benchmark.

    Two across groups and one within group.  The forward group has a delay of
    5 bins with a 1-bin burst on bins 30-69; the feedback group mirrors it
    with -5 / -1 on bins 130-169.  Loadings, offsets and noise levels are
    drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    layout = LatentLayout((neurons_per_region,) * 2, 2, 1, order, n_steps)
    fwd = np.zeros((n_steps, 2))
    fwd[:, 1] = step_schedule(n_steps, 5.0, 1.0, 30, 70)
    fb = np.zeros((n_steps, 2))
    fb[:, 1] = step_schedule(n_steps, -5.0, -1.0, 130, 170)
    m = layout.n_groups
    blocks = [rng.normal(size=(neurons_per_region, m)) for _ in range(2)]
    offset = rng.normal(size=layout.obs_dim)
    noise = rng.uniform(*noise_range, size=layout.obs_dim)
    return AdmModel(
        layout,
        (AcrossGroup(fwd, across_length_scale), AcrossGroup(fb, across_length_scale)),
        (WithinGroup(within_length_scale),),
        FaParams.from_blocks(blocks, offset, noise),
    )
