"""Monte Carlo EM for the skew-t-normal variant.

Each variable runs a Gibbs sampler over ``(alpha_i, beta_i, tau_i, gamma_i)``:

1. ``(alpha_i, beta_i) | y_i, tau_i, gamma_i`` is jointly normal; component
   ``k`` of ``alpha_i`` has prior mean ``xi + sigma lam gamma / (tau + lam^2)``
   and variance ``sigma2 / (tau + lam^2)``.
2. ``gamma_ik | alpha_ik ~ TN(lam (alpha - xi) / sigma, 1; (0, inf))``.
3. ``tau_ik | alpha_ik ~ Gamma((nu + 1) / 2, rate=(nu + (alpha - xi)^2 / sigma2) / 2)``.

Steps 2 and 3 are conditionally independent given ``alpha``. Post burn-in
draws are averaged into ``LoadingMoments`` and the pooled ``alpha`` draws are
used to refit the skew-t-normal laws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .basis import SplineBasis
from .dataset import Dataset
from .gaussian import initialize, m_step_gaussian
from .model import (
    Designs,
    LoadingMoments,
    MultiLevelParams,
    NumericalError,
    assemble_designs,
    beta_prior_variance,
    layout,
    loading_design,
    orthogonalize,
    residuals,
)
from .stn import StNParams, _robert_tail, fit_stn_mle, stn_mean

log = logging.getLogger(__name__)

GAUSSIAN_LIMIT_NU = 1e6
_TN_INVERSE_CDF_LIMIT = 0.999


@dataclass
class GibbsConfig:
    """Settings of the Monte Carlo EM loop.

    Attributes
    ----------
    sweeps_S : int
        Gibbs sweeps per MCEM iteration.
    burn_in : int
        Leading sweeps discarded in each MCEM iteration.
    seed : int
        Master seed; variable ``i`` at iteration ``t`` uses the stream
        ``(seed, i, t)``.
    mcem_iterations : int
        Maximum number of MCEM iterations.
    convergence_window : int
        Width ``W`` of the averaging window.
    convergence_rel_change : float
        Converged when the parameter summaries averaged over the last ``W``
        iterations differ from those of the previous ``W`` by less than this
        (relative max-norm, worst block).
    gaussian_limit : bool
        Hold ``lam = 0`` and ``nu = 1e6`` so the loadings are effectively normal.
    """

    sweeps_S: int = 100
    burn_in: int = 20
    seed: int = 0
    mcem_iterations: int = 1000
    convergence_window: int = 50
    convergence_rel_change: float = 1e-3
    gaussian_limit: bool = False
    ridge_penalty_init: float = 1e-4

    def __post_init__(self):
        if self.sweeps_S < 1 or self.burn_in < 0:
            raise ValueError("sweeps_S must be positive and burn_in nonnegative")
        if self.sweeps_S - self.burn_in < 10:
            raise ValueError("need at least 10 post burn-in sweeps")
        if self.mcem_iterations < 1 or self.convergence_window < 1:
            raise ValueError("mcem_iterations and convergence_window must be positive")
        if not self.convergence_rel_change > 0:
            raise ValueError("convergence_rel_change must be positive")


@dataclass
class GibbsState:
    """Current chain values and post burn-in accumulators, padded per variable."""

    alpha: np.ndarray  # (M, K)
    beta: np.ndarray  # (M, R * Lmax)
    tau: np.ndarray  # (M, K)
    gamma: np.ndarray  # (M, K)
    sum_u: np.ndarray = None
    sum_uu: np.ndarray = None
    sum_eps2: np.ndarray = None
    count: int = 0
    alpha_draws: list = field(default_factory=list)

    def reset(self) -> None:
        M, q = self.alpha.shape[0], self.alpha.shape[1] + self.beta.shape[1]
        self.sum_u = np.zeros((M, q))
        self.sum_uu = np.zeros((M, q, q))
        self.sum_eps2 = np.zeros(M)
        self.count = 0
        self.alpha_draws = []

    @property
    def u(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta], axis=1)


def _law_arrays(params: MultiLevelParams):
    stn = params.stn or []
    xi = np.array([s.xi for s in stn], float)
    s2 = np.array([s.sigma2 for s in stn], float)
    lam = np.array([s.lam for s in stn], float)
    nu = np.array([s.nu for s in stn], float)
    return xi, s2, lam, nu


@dataclass
class _Context:
    """Per-iteration quantities shared by all sweeps."""

    ZtZ: np.ndarray
    Ztr: np.ndarray
    Z: np.ndarray
    r: np.ndarray
    sigma2: np.ndarray
    beta_var: np.ndarray
    xi: np.ndarray
    s2: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    variable_ids: tuple


def _context(params: MultiLevelParams, designs: Designs) -> _Context:
    if params.variant != "stn":
        raise ValueError("the Gibbs sampler requires the skew-t-normal variant")
    Z = loading_design(params, designs)
    r = residuals(params, designs)
    xi, s2, lam, nu = _law_arrays(params)
    return _Context(
        ZtZ=np.einsum("inq,inr->iqr", Z, Z),
        Ztr=np.einsum("inq,in->iq", Z, r),
        Z=Z,
        r=r,
        sigma2=params.sigma2,
        beta_var=beta_prior_variance(params, designs),
        xi=xi,
        s2=s2,
        lam=lam,
        nu=nu,
        variable_ids=designs.variable_ids,
    )


def _truncated_standard_normal(a, u, rngs):
    """Like ``stn.truncated_standard_normal`` with one generator per row."""
    out = np.empty(a.shape)
    tail = ndtr(a) >= _TN_INVERSE_CDF_LIMIT
    easy = ~tail
    out[easy] = -ndtri(u[easy] * ndtr(-a[easy]))
    for i, k in zip(*np.nonzero(tail)):
        out[i, k] = _robert_tail(float(a[i, k]), rngs[i])
    return out


def _sweep(ctx: _Context, state: GibbsState, z, u, g, rngs) -> None:
    """One Gibbs sweep for all variables given pre-drawn random numbers.

    ``z`` are standard normals ``(M, q)``, ``u`` uniforms ``(M, K)`` and ``g``
    standard gamma draws ``(M, K)`` with shape ``(nu + 1) / 2``.
    """
    K = state.alpha.shape[1]
    w = state.tau + ctx.lam**2
    sig = np.sqrt(ctx.s2)
    mu_a = ctx.xi + sig * ctx.lam * state.gamma / w
    prior_mean = np.concatenate([mu_a, np.zeros_like(ctx.beta_var)], axis=1)
    s = np.sqrt(np.concatenate([ctx.s2 / w, ctx.beta_var], axis=1))
    q = s.shape[1]
    H = s[:, :, None] * ctx.ZtZ * s[:, None, :] + ctx.sigma2[:, None, None] * np.eye(q)
    try:
        Lc = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        for i in range(H.shape[0]):
            if np.any(np.linalg.eigvalsh(H[i]) <= 0):
                raise NumericalError(
                    f"conditional covariance is not positive definite for variable "
                    f"{ctx.variable_ids[i]!r}"
                ) from None
        raise NumericalError("conditional covariance is not positive definite") from None
    c = s * (ctx.Ztr - np.einsum("iqr,ir->iq", ctx.ZtZ, prior_mean))
    cond_mean = prior_mean + s * np.linalg.solve(H, c[..., None])[..., 0]
    noise = np.linalg.solve(np.swapaxes(Lc, 1, 2), z[..., None])[..., 0]
    draw = cond_mean + np.sqrt(ctx.sigma2)[:, None] * s * noise
    state.alpha = draw[:, :K]
    state.beta = draw[:, K:]

    dev = (state.alpha - ctx.xi) / sig
    state.gamma = ctx.lam * dev + _truncated_standard_normal(-ctx.lam * dev, u, rngs)
    rate = 0.5 * (ctx.nu + dev**2)
    state.tau = g / rate


def _accumulate(ctx: _Context, state: GibbsState) -> None:
    u = state.u
    state.sum_u += u
    state.sum_uu += u[:, :, None] * u[:, None, :]
    e = ctx.r - np.einsum("inq,iq->in", ctx.Z, u)
    state.sum_eps2 += np.einsum("in,in->i", e, e)
    state.count += 1
    state.alpha_draws.append(state.alpha.copy())


def variable_rngs(seed: int, M: int, iteration: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, i, iteration]) for i in range(M)]


def gibbs_sweep(
    state: GibbsState,
    params: MultiLevelParams,
    designs: Designs,
    rngs: list[np.random.Generator],
) -> GibbsState:
    """Run one full sweep in place, drawing random numbers from ``rngs``."""
    ctx = _context(params, designs)
    K, q = state.alpha.shape[1], state.alpha.shape[1] + state.beta.shape[1]
    z = np.stack([rg.standard_normal(q) for rg in rngs])
    u = np.stack([rg.random(K) for rg in rngs])
    g = np.stack([rg.standard_gamma((ctx.nu + 1) / 2) for rg in rngs]) if K else np.zeros((len(rngs), 0))
    _sweep(ctx, state, z, u, g, rngs)
    return state


def initial_state(params: MultiLevelParams, designs: Designs, alpha=None, beta=None) -> GibbsState:
    lay = layout(params, designs)
    M = designs.M
    alpha = np.zeros((M, lay.K)) if alpha is None else np.asarray(alpha, float).reshape(M, lay.K)
    if beta is None:
        beta = np.zeros((M, lay.R * lay.Lmax))
    beta = np.asarray(beta, float).reshape(M, -1)
    xi, s2, lam, _ = _law_arrays(params)
    gamma = np.maximum(np.abs(lam * (alpha - xi) / np.sqrt(s2)), 0.5) if lay.K else np.zeros((M, 0))
    state = GibbsState(alpha=alpha, beta=beta, tau=np.ones((M, lay.K)), gamma=gamma)
    state.reset()
    return state


def mc_e_step(
    params: MultiLevelParams,
    designs: Designs,
    config: GibbsConfig,
    state: GibbsState,
    iteration: int = 0,
) -> tuple[LoadingMoments, np.ndarray]:
    """Run ``S`` sweeps per variable and average the post burn-in draws.

    Returns the Monte Carlo moments and the post burn-in ``alpha`` draws
    with shape ``(S - burn_in, M, K)``. ``state`` is updated in place and
    can seed the next iteration.
    """
    ctx = _context(params, designs)
    M = designs.M
    K = state.alpha.shape[1]
    q = K + state.beta.shape[1]
    S = config.sweeps_S
    rngs = variable_rngs(config.seed, M, iteration)
    shape = (ctx.nu + 1) / 2
    Z = np.empty((S, M, q))
    U = np.empty((S, M, K))
    G = np.empty((S, M, K))
    for i, rg in enumerate(rngs):
        Z[:, i] = rg.standard_normal((S, q))
        U[:, i] = rg.random((S, K))
        G[:, i] = rg.standard_gamma(shape, size=(S, K))
    state.reset()
    for s in range(S):
        _sweep(ctx, state, Z[s], U[s], G[s], rngs)
        if s >= config.burn_in:
            _accumulate(ctx, state)
    n = state.count
    mean = state.sum_u / n
    second = state.sum_uu / n
    moments = LoadingMoments(
        mean=mean,
        second=0.5 * (second + np.swapaxes(second, 1, 2)),
        eps2=state.sum_eps2 / n,
        layout=layout(params, designs),
        n_rep=designs.n_rep.copy(),
        L=params.L,
    )
    return moments, np.stack(state.alpha_draws)


def _shift_alpha(moments: LoadingMoments, m: np.ndarray) -> LoadingMoments:
    """Moments of ``(alpha - m, beta)`` from those of ``(alpha, beta)``."""
    K = moments.layout.K
    q = moments.mean.shape[1]
    shift = np.zeros(q)
    shift[:K] = m
    new = moments.copy()
    mu = moments.mean
    new.mean = mu - shift
    new.second = (
        moments.second
        - mu[:, :, None] * shift[None, None, :]
        - shift[None, :, None] * mu[:, None, :]
        + np.outer(shift, shift)
    )
    return new


def _free(config: GibbsConfig) -> tuple[str, ...]:
    return ("xi", "sigma2") if config.gaussian_limit else ("xi", "sigma2", "lam", "nu")


def _refit_laws(params, alpha_draws, config):
    laws = []
    for k, law in enumerate(params.stn):
        laws.append(fit_stn_mle(alpha_draws[..., k].ravel(), law, free=_free(config), min_samples=0))
    return laws


def _recentre(params, moments, alpha_draws):
    m = np.array([stn_mean(s) for s in params.stn])
    params.stn = [s.shifted(-mk) for s, mk in zip(params.stn, m)]
    params.theta_mu = params.theta_mu + params.Theta_alpha @ m
    return params, _shift_alpha(moments, m), alpha_draws - m


def m_step_stn(
    moments: LoadingMoments,
    alpha_draws: np.ndarray,
    designs: Designs,
    params: MultiLevelParams,
    config: GibbsConfig | None = None,
) -> MultiLevelParams:
    """Refit the skew-t-normal laws to the draws, recentre, then run the ECM blocks.

    After the laws are refitted, each component's mean ``m_k`` is moved from
    ``xi_k`` into ``theta_mu`` (``theta_mu += Theta_alpha m``) so that the
    loadings keep zero mean; the remaining blocks use the Gaussian updates
    with the shifted moments.
    """
    config = config or GibbsConfig()
    new = params.copy()
    if new.K:
        new.stn = _refit_laws(new, alpha_draws, config)
        new, moments, _ = _recentre(new, moments, alpha_draws)
    return m_step_gaussian(moments, designs, new, update_variable_law=False)


def alpha_second_moments(moments: LoadingMoments) -> np.ndarray:
    K = moments.layout.K
    return np.diagonal(moments.second, axis1=1, axis2=2)[:, :K].mean(axis=0)


def summaries(params: MultiLevelParams, moments: LoadingMoments | None = None) -> dict[str, np.ndarray]:
    """Identified parameter summaries used for convergence and trace plots."""
    out = {"theta_mu": np.asarray(params.theta_mu, float).ravel(), "sigma2": params.sigma2.copy()}
    if params.K:
        d = alpha_second_moments(moments) if moments is not None else np.array([s.sigma2 for s in params.stn])
        out["variable_cov"] = (params.Theta_alpha * d) @ params.Theta_alpha.T
        out["variable_cov"] = out["variable_cov"].ravel()
        out["stn_shape"] = np.array([[s.lam, s.nu] for s in params.stn]).ravel()
    rep = [(t * d) @ t.T for t, d in zip(params.Theta_beta, params.D_beta)]
    out["replicate_cov"] = np.concatenate([x.ravel() for x in rep])
    return out


def _window_change(history: list[dict], W: int) -> float:
    recent, prev = history[-W:], history[-2 * W : -W]
    worst = 0.0
    for key in recent[0]:
        a = np.mean([h[key] for h in recent], axis=0)
        b = np.mean([h[key] for h in prev], axis=0)
        if a.size == 0:
            continue
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)))
    return worst


@dataclass
class StNTraceRow:
    iteration: int
    block: str
    summary_statistic: str
    value: float


def _trace_rows(t: int, params: MultiLevelParams, change: float) -> list[StNTraceRow]:
    rows = [
        StNTraceRow(t, "theta_mu", "norm", float(np.linalg.norm(params.theta_mu))),
        StNTraceRow(t, "sigma2", "mean", float(np.mean(params.sigma2))),
        StNTraceRow(t, "D_beta", "mean_total", float(np.mean([d.sum() for d in params.D_beta]))),
    ]
    for k, s in enumerate(params.stn or []):
        for name, val in s.to_dict().items():
            rows.append(StNTraceRow(t, f"stn[{k}]", name, float(val)))
    rows.append(StNTraceRow(t, "convergence", "window_rel_change", change))
    return rows


@dataclass
class StNFit:
    """Result of the MCEM fit; unpacks as ``(params, trace)``."""

    params: MultiLevelParams
    moments: LoadingMoments
    alpha_draws: np.ndarray
    trace: list[StNTraceRow]
    converged: bool
    iterations: int
    designs: Designs = field(repr=False)

    def __iter__(self):
        return iter((self.params, self.trace))


def _orthogonalize_stn(params, moments, alpha_draws, config):
    """Orthogonalise using loading second moments, rotate the draws and refit the laws."""
    Ta_old = params.Theta_alpha
    out, moments = orthogonalize(params, moments, alpha_variance=alpha_second_moments(moments))
    if params.K:
        Ra = out.Theta_alpha.T @ Ta_old
        alpha_draws = alpha_draws @ Ra.T
        nu0 = GAUSSIAN_LIMIT_NU if config.gaussian_limit else 10.0
        laws = []
        for k in range(out.K):
            x = alpha_draws[..., k].ravel()
            init = StNParams(float(x.mean()), max(float(x.var()), 1e-12), 0.0, nu0)
            laws.append(fit_stn_mle(x, init, free=_free(config), min_samples=0))
        out.stn = laws
        out, moments, alpha_draws = _recentre(out, moments, alpha_draws)
    return out, moments, alpha_draws


def fit_multilevel_stn(
    ds: Dataset | Designs,
    basis: SplineBasis | None,
    K: int,
    L,
    config: GibbsConfig | None = None,
    *,
    init: MultiLevelParams | None = None,
) -> StNFit:
    """Fit the skew-t-normal multi-level model by Monte Carlo EM.

    Each iteration runs the Gibbs sampler (warm-started from the previous
    chain state), refits the skew-t-normal laws by simplex maximum
    likelihood, recentres them and applies the conditional M-step updates.
    Loadings and PCs are orthogonalised once at the end.
    """
    config = config or GibbsConfig()
    designs = ds if isinstance(ds, Designs) else assemble_designs(ds, basis)
    if init is None:
        params, loads = initialize(designs, K, L, config.ridge_penalty_init, variant="stn")
        alpha0, beta0 = loads.alpha, loads.beta.reshape(designs.M, -1)
    else:
        params, alpha0, beta0 = init.copy(), None, None
    if config.gaussian_limit:
        params.stn = [StNParams(s.xi, s.sigma2, 0.0, GAUSSIAN_LIMIT_NU) for s in params.stn]
    state = initial_state(params, designs, alpha0, beta0)
    W = config.convergence_window
    history: list[dict] = []
    trace: list[StNTraceRow] = []
    converged = False
    t = 0
    moments = draws = None
    for t in range(1, config.mcem_iterations + 1):
        moments, draws = mc_e_step(params, designs, config, state, t)
        params = m_step_stn(moments, draws, designs, params, config)
        history.append(summaries(params, moments))
        change = _window_change(history, W) if len(history) >= 2 * W else float("nan")
        trace.extend(_trace_rows(t, params, change))
        if change < config.convergence_rel_change:
            converged = True
            break
    if not converged:
        log.warning("MCEM stopped after %d iterations without meeting the convergence rule", t)
    # final Monte Carlo moments under the last parameters, then orthogonalise
    moments, draws = mc_e_step(params, designs, config, state, t + 1)
    params, moments, draws = _orthogonalize_stn(params, moments, draws, config)
    return StNFit(params, moments, draws, trace, converged, t, designs)
