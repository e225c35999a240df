"""EM/ECM fitting of the Gaussian multi-level model and the single-level baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import SplineBasis
from .dataset import Dataset
from .model import (
    SIGMA2_FLOOR,
    Designs,
    LoadingMoments,
    MultiLevelParams,
    NumericalError,
    assemble_designs,
    gaussian_posterior,
    layout,
    loading_design,
    orthogonalize,
    per_variable_loglik,
    prior_variance,
    residuals,
)
from .stn import StNError, StNParams, fit_stn_mle

log = logging.getLogger(__name__)


class RankError(ValueError):
    """Requested ranks are infeasible for the basis."""


@dataclass
class EMConfig:
    """Settings for the Gaussian EM fitter.

    Attributes
    ----------
    max_iterations : int
    loglik_rel_tolerance : float
        Stop when the relative change of the marginal log-likelihood falls
        below this value.
    orthogonalize_each_iteration : bool
        Orthogonalise after every M-step instead of only at convergence.
    ridge_penalty_init : float
        Ridge penalty of the replicate-level initial regressions, relative to
        the average diagonal of ``B'B``.
    """

    max_iterations: int = 500
    loglik_rel_tolerance: float = 1e-8
    orthogonalize_each_iteration: bool = False
    ridge_penalty_init: float = 1e-4

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.loglik_rel_tolerance > 0:
            raise ValueError("loglik_rel_tolerance must be positive")
        if self.ridge_penalty_init < 0:
            raise ValueError("ridge_penalty_init must be nonnegative")


@dataclass
class InitialLoadings:
    alpha: np.ndarray  # (M, K)
    beta: np.ndarray  # (M, R, Lmax)


@dataclass
class TraceRow:
    iteration: int
    loglik: float
    delta: float


@dataclass
class GaussianFit:
    """Result of a Gaussian fit; unpacks as ``(params, moments, trace)``."""

    params: MultiLevelParams
    moments: LoadingMoments
    trace: list[TraceRow]
    converged: bool
    iterations: int
    designs: Designs = field(repr=False)

    def __iter__(self):
        return iter((self.params, self.moments, self.trace))

    @property
    def loglik(self) -> float:
        return self.trace[-1].loglik


def _ranks(L, M: int) -> list[int]:
    if np.isscalar(L):
        return [int(L)] * M
    L = [int(x) for x in L]
    if len(L) != M:
        raise RankError(f"expected {M} replicate-level ranks, got {len(L)}")
    return L


def _check_ranks(K: int, L: list[int], p: int) -> None:
    if K < 0 or K > p:
        raise RankError(f"variable-level rank K={K} must lie in [0, p={p}]")
    bad = [x for x in L if x < 0 or x > p]
    if bad:
        raise RankError(f"replicate-level rank {bad[0]} must lie in [0, p={p}]")


def _ridge_solve(A: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    """Batched ``(A + ridge * mean diag(A) I)^-1 b``; pseudo-inverse when ridge is 0."""
    p = A.shape[-1]
    if ridge > 0:
        scale = np.trace(A, axis1=-2, axis2=-1) / p
        scale = np.where(scale > 0, scale, 1.0)
        A = A + (ridge * scale)[..., None, None] * np.eye(p)
        return np.linalg.solve(A, b[..., None])[..., 0]
    return np.einsum("...pq,...q->...p", np.linalg.pinv(A, hermitian=True), b)


def _stn_from_samples(x: np.ndarray) -> StNParams:
    """Initial skew-t-normal law for a loading column (falls back to moments)."""
    x = np.asarray(x, float)
    sd = float(np.std(x))
    if not sd > 0:
        return StNParams(0.0, 1e-12 if sd == 0 else 1.0, 0.0, 30.0)
    init = StNParams(float(np.mean(x)), sd**2, 0.0, 10.0)
    try:
        return fit_stn_mle(x, init, min_samples=0, max_iterations=500)
    except StNError:
        return init


def initialize(
    designs: Designs,
    K: int,
    L,
    ridge: float = 1e-4,
    *,
    variant: str = "gaussian",
    free_mean: bool = False,
) -> tuple[MultiLevelParams, InitialLoadings]:
    """Starting values by successive least-squares fits and PCA.

    A spline is fitted to the pooled data; per-variable least-squares
    coefficients are decomposed by PCA for the variable level; per-replicate
    ridge fits to what remains are decomposed per variable for the replicate
    level; the final residual variance gives ``sigma2``.

    Parameters
    ----------
    designs : Designs
    K : int
        Variable-level rank.
    L : int or sequence of int
        Replicate-level ranks.
    ridge : float
        Relative ridge penalty for the replicate-level regressions.
    variant : {'gaussian', 'stn'}
        For ``'stn'`` a skew-t-normal law is fitted to each loading column.
    free_mean : bool
        Give every variable its own mean coefficients (single-level model).
    """
    M, p = designs.M, designs.p
    L = _ranks(L, M)
    _check_ranks(K, L, p)
    Lmax = max(L, default=0)

    A = designs.BtB.sum(axis=0)
    evals = np.linalg.eigvalsh(A)
    if evals[0] <= 1e-10 * max(evals[-1], 1e-300):
        raise NumericalError(
            "grand-mean least-squares system is rank deficient; use fewer knots"
        )
    theta_gm = np.linalg.solve(A, designs.Bty.sum(axis=0))

    C = _ridge_solve(designs.BtB, designs.Bty, 0.0)  # (M, p)
    if free_mean:
        theta_mu = C.copy()
        Theta_alpha = np.zeros((p, 0))
        alpha = np.zeros((M, 0))
        K = 0
    else:
        cbar = C.mean(axis=0)
        Cc = C - cbar
        cov = Cc.T @ Cc / M
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        Theta_alpha = V[:, np.argsort(w)[::-1][:K]]
        alpha = Cc @ Theta_alpha
        theta_mu = cbar if M > 1 else theta_gm
    D_alpha = np.mean(alpha**2, axis=0) if K else np.zeros(0)

    fitted_var = np.einsum("ip,inp->in", C, designs.B)
    r = (designs.y - fitted_var) * designs.mask
    Btr_rep = np.einsum("inr,inp,in->irp", designs.onehot, designs.B, r)
    Dcoef = _ridge_solve(designs.BtB_rep, Btr_rep, ridge) * designs.rep_mask[:, :, None]

    Theta_beta, D_beta = [], []
    beta = np.zeros((M, designs.R, Lmax))
    for i in range(M):
        d = Dcoef[i, : designs.n_rep[i]]
        S = d.T @ d / len(d)
        w, V = np.linalg.eigh(0.5 * (S + S.T))
        Tb = V[:, np.argsort(w)[::-1][: L[i]]]
        b = d @ Tb
        Theta_beta.append(Tb)
        D_beta.append(np.mean(b**2, axis=0))
        beta[i, : designs.n_rep[i], : L[i]] = b

    Th = np.zeros((M, p, Lmax))
    for i in range(M):
        Th[i, :, : L[i]] = Theta_beta[i]
    rep_coef = np.einsum("ipl,irl->irp", Th, beta)
    fit_rep = np.einsum("inr,irp,inp->in", designs.onehot, rep_coef, designs.B)
    resid = (r - fit_rep) * designs.mask
    sigma2 = np.maximum(np.einsum("in,in->i", resid, resid) / designs.n_obs, SIGMA2_FLOOR)

    params = MultiLevelParams(
        theta_mu=theta_mu,
        Theta_alpha=Theta_alpha,
        Theta_beta=Theta_beta,
        D_beta=D_beta,
        sigma2=sigma2,
        D_alpha=D_alpha if variant == "gaussian" else None,
        stn=[_stn_from_samples(alpha[:, k]) for k in range(K)] if variant == "stn" else None,
    )
    return params, InitialLoadings(alpha=alpha, beta=beta)


# --- E-step ---------------------------------------------------------------------


def e_step_gaussian(params: MultiLevelParams, designs: Designs) -> LoadingMoments:
    """Exact conditional moments of the loadings under the Gaussian variant.

    The returned object also carries the per-variable marginal
    log-likelihood of ``params`` as ``moments.loglik``.
    """
    if params.variant != "gaussian":
        raise ValueError("e_step_gaussian requires the Gaussian variant")
    Z = loading_design(params, designs)
    r = residuals(params, designs)
    post = gaussian_posterior(
        Z, prior_variance(params, designs), r, params.sigma2, designs.n_obs
    )
    eps2 = post.eps2
    second = post.cov + post.mean[:, :, None] * post.mean[:, None, :]
    moments = LoadingMoments(
        mean=post.mean,
        second=0.5 * (second + np.swapaxes(second, 1, 2)),
        eps2=np.maximum(eps2, 0.0),
        layout=layout(params, designs),
        n_rep=designs.n_rep.copy(),
        L=params.L,
    )
    moments.loglik = per_variable_loglik(params, designs, post)
    return moments


# --- M-step ---------------------------------------------------------------------


def _solve(A, b, what: str, designs: Designs | None = None, idx=None):
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        if A.ndim == 3 and designs is not None:
            for k in range(A.shape[0]):
                if np.linalg.matrix_rank(A[k]) < A.shape[-1]:
                    vid = designs.variable_ids[idx[k] if idx is not None else k]
                    raise NumericalError(
                        f"singular normal equations in the {what} update for variable {vid!r}"
                    ) from None
        raise NumericalError(f"singular normal equations in the {what} update") from None


def update_D_alpha(moments: LoadingMoments) -> np.ndarray:
    K = moments.layout.K
    return np.diagonal(moments.second, axis1=1, axis2=2)[:, :K].mean(axis=0)


def update_D_beta(moments: LoadingMoments) -> list[np.ndarray]:
    lay = moments.layout
    diag = np.diagonal(moments.second, axis1=1, axis2=2)[:, lay.K :]
    diag = diag.reshape(len(moments.L), lay.R, lay.Lmax).sum(axis=1) / moments.n_rep[:, None]
    return [diag[i, : moments.L[i]].copy() for i in range(len(moments.L))]


def update_sigma2(moments: LoadingMoments, designs: Designs) -> np.ndarray:
    return np.maximum(moments.eps2 / designs.n_obs, SIGMA2_FLOOR)


def m_step_gaussian(
    moments: LoadingMoments,
    designs: Designs,
    params: MultiLevelParams,
    *,
    update_variable_law: bool = True,
) -> MultiLevelParams:
    """One ECM pass over all parameter blocks.

    Order: ``D_alpha``, ``D_beta_i``, ``sigma2_i``, ``theta_mu``, each column
    of ``Theta_alpha``, each column of ``Theta_beta_i``. Every block is
    maximised once given the latest values of the others; cross terms use the
    joint second moments. The mean and variable-level loading updates weight
    variables by ``1 / sigma2_i``.

    With ``update_variable_law=False`` the ``D_alpha`` / skew-t-normal block
    is left untouched (the skew-t-normal fitter updates it separately).
    """
    new = params.copy()
    m, S = moments.mean, moments.second
    lay = moments.layout
    K, Lmax, R = lay.K, lay.Lmax, lay.R
    M, p = designs.M, designs.p

    if update_variable_law and new.variant == "gaussian" and K:
        new.D_alpha = update_D_alpha(moments)
    new.D_beta = update_D_beta(moments)
    new.sigma2 = update_sigma2(moments, designs)
    w = 1.0 / new.sigma2

    # theta_mu given the loadings
    Z = loading_design(new, designs)
    Zm = np.einsum("inq,iq->in", Z, m)
    BtZm = np.einsum("inp,in->ip", designs.B, Zm)
    if new.free_mean:
        new.theta_mu = _solve(designs.BtB, designs.Bty - BtZm, "theta_mu", designs)
    else:
        A = np.einsum("i,ipq->pq", w, designs.BtB)
        b = np.einsum("i,ip->p", w, designs.Bty - BtZm)
        new.theta_mu = _solve(A, b, "theta_mu")
    mu = new.mean_coefficients()
    Bt_r = designs.Bty - np.einsum("ipq,iq->ip", designs.BtB, mu)  # B'(y - B theta_mu)

    # Theta_alpha, one column at a time
    if K:
        Th_b, _ = new.padded_beta()
        BT = np.einsum("inp,ipl->inl", designs.B, Th_b)
        Zb = (designs.onehot[:, :, :, None] * BT[:, :, None, :]).reshape(M, -1, R * Lmax)
        BtZb = np.einsum("inp,inq->ipq", designs.B, Zb)  # (M, p, R*Lmax)
        Ta = new.Theta_alpha
        for k in range(K):
            s_kk = S[:, k, k]
            weight = np.dot(w, s_kk)
            if not weight > 0:
                continue
            A = np.einsum("i,ipq->pq", w * s_kk, designs.BtB)
            others = np.delete(np.arange(K), k)
            cross = np.einsum("pk,ik->ip", Ta[:, others], S[:, others, k])
            b_i = (
                m[:, k : k + 1] * Bt_r
                - np.einsum("ipq,iq->ip", designs.BtB, cross)
                - np.einsum("ipq,iq->ip", BtZb, S[:, K:, k])
            )
            Ta[:, k] = _solve(A, np.einsum("i,ip->p", w, b_i), f"theta_alpha[{k}]")
        new.Theta_alpha = Ta

    # Theta_beta, one column at a time within each variable
    if Lmax:
        Th_b, _ = new.padded_beta()
        Bt_r_rep = designs.Bty_rep - np.einsum("irpq,iq->irp", designs.BtB_rep, mu)
        Sa_b = S[:, :K, K:]  # (M, K, R*Lmax)
        Ta = new.Theta_alpha
        Lvec = np.array(new.L)
        for l in range(Lmax):
            idx = lay.beta_index(l)
            s_ll = S[:, idx, idx]  # (M, R)
            A = np.einsum("ir,irpq->ipq", s_ll, designs.BtB_rep)
            b = np.einsum("ir,irp->ip", m[:, idx], Bt_r_rep)
            if K:
                ta_s = np.einsum("pk,ikr->irp", Ta, Sa_b[:, :, idx - K])
                b -= np.einsum("irpq,irq->ip", designs.BtB_rep, ta_s)
            for l2 in range(Lmax):
                if l2 == l:
                    continue
                c = S[:, lay.beta_index(l2), idx]  # (M, R)
                b -= np.einsum("irpq,iq,ir->ip", designs.BtB_rep, Th_b[:, :, l2], c)
            active = np.flatnonzero((Lvec > l) & (s_ll.sum(axis=1) > 0))
            if active.size:
                Th_b[active, :, l] = _solve(
                    A[active], b[active], f"theta_beta[{l}]", designs, active
                )
        new.Theta_beta = [Th_b[i, :, : new.L[i]].copy() for i in range(M)]
    return new


# --- fitters --------------------------------------------------------------------


def _finish(params, designs, trace, converged, iterations):
    params, _ = orthogonalize(params)
    moments = e_step_gaussian(params, designs)
    return GaussianFit(params, moments, trace, converged, iterations, designs)


def fit_multilevel_gaussian(
    ds: Dataset | Designs,
    basis: SplineBasis | None,
    K: int,
    L,
    config: EMConfig | None = None,
    *,
    init: MultiLevelParams | None = None,
) -> GaussianFit:
    """Fit the Gaussian multi-level model by EM.

    Iterates until the relative change of the marginal log-likelihood drops
    below ``config.loglik_rel_tolerance``; the fitted PCs are orthogonalised
    at the end (and optionally after each M-step).

    Parameters
    ----------
    ds : Dataset or Designs
        Data; a ``Designs`` object skips re-evaluating the basis.
    basis : SplineBasis
        Needed only when ``ds`` is a ``Dataset``.
    K : int
    L : int or sequence of int
    config : EMConfig, optional
    init : MultiLevelParams, optional
        Starting values (e.g. a previous fit); default uses ``initialize``.
    """
    config = config or EMConfig()
    designs = ds if isinstance(ds, Designs) else assemble_designs(ds, basis)
    if init is None:
        params, _ = initialize(designs, K, L, config.ridge_penalty_init)
    else:
        params = init.copy()
        _check_ranks(params.K, params.L, designs.p)
    moments = e_step_gaussian(params, designs)
    ll = float(moments.loglik.sum())
    trace = [TraceRow(0, ll, float("nan"))]
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        params = m_step_gaussian(moments, designs, params)
        if config.orthogonalize_each_iteration:
            params, _ = orthogonalize(params)
        moments = e_step_gaussian(params, designs)
        ll_new = float(moments.loglik.sum())
        delta = (ll_new - ll) / max(abs(ll), 1e-300)
        trace.append(TraceRow(it, ll_new, delta))
        ll = ll_new
        if abs(delta) < config.loglik_rel_tolerance:
            converged = True
            break
    if not converged:
        log.warning("EM stopped after %d iterations without converging", it)
    return _finish(params, designs, trace, converged, it)


def _take(params: MultiLevelParams, idx) -> MultiLevelParams:
    idx = np.atleast_1d(idx)
    return MultiLevelParams(
        theta_mu=params.theta_mu[idx],
        Theta_alpha=params.Theta_alpha,
        Theta_beta=[params.Theta_beta[i] for i in idx],
        D_beta=[params.D_beta[i] for i in idx],
        sigma2=params.sigma2[idx],
        D_alpha=params.D_alpha,
    )


def fit_singlelevel_gaussian(
    ds: Dataset | Designs,
    basis: SplineBasis | None,
    L=1,
    config: EMConfig | None = None,
) -> GaussianFit:
    """Fit every variable independently with its own mean and replicate PCs.

    This is the multi-level machinery with ``K = 0`` and a free mean per
    variable. Variables are processed in one batch, but each keeps its own
    convergence state, so results do not depend on which other variables
    are fitted alongside.

    The returned trace holds the summed log-likelihood over variables.
    """
    config = config or EMConfig()
    designs = ds if isinstance(ds, Designs) else assemble_designs(ds, basis)
    params, _ = initialize(designs, 0, L, config.ridge_penalty_init, free_mean=True)
    M = designs.M
    moments = e_step_gaussian(params, designs)
    ll = moments.loglik.copy()
    trace = [TraceRow(0, float(ll.sum()), float("nan"))]
    active = np.ones(M, dtype=bool)
    it = 0
    for it in range(1, config.max_iterations + 1):
        idx = np.flatnonzero(active)
        sub_d = designs.subset(idx)
        sub_p = _take(params, idx)
        sub_m = e_step_gaussian(sub_p, sub_d)
        sub_p = m_step_gaussian(sub_m, sub_d, sub_p)
        if config.orthogonalize_each_iteration:
            sub_p, _ = orthogonalize(sub_p)
        new_ll = per_variable_loglik(sub_p, sub_d)
        for a, i in enumerate(idx):
            params.theta_mu[i] = sub_p.theta_mu[a]
            params.Theta_beta[i] = sub_p.Theta_beta[a]
            params.D_beta[i] = sub_p.D_beta[a]
            params.sigma2[i] = sub_p.sigma2[a]
        delta = (new_ll - ll[idx]) / np.maximum(np.abs(ll[idx]), 1e-300)
        prev_total = float(ll.sum())
        ll[idx] = new_ll
        total = float(ll.sum())
        trace.append(TraceRow(it, total, (total - prev_total) / max(abs(prev_total), 1e-300)))
        active[idx[np.abs(delta) < config.loglik_rel_tolerance]] = False
        if not active.any():
            break
    converged = not active.any()
    if not converged:
        log.warning("%d variables did not converge in %d iterations", active.sum(), it)
    return _finish(params, designs, trace, converged, it)
