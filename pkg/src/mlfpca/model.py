"""Shared model state for the multi-level reduced-rank FPCA model.

Per variable ``i`` the observations stack as

    y_i = B_i theta_mu + B_i Theta_alpha alpha_i + Btilde_i Thetatilde_beta_i beta_i + eps_i

Computations are batched over variables on zero-padded arrays. The loading
vector of variable ``i`` is laid out as ``u_i = [alpha_i (K), beta_i]`` where
``beta_i`` has ``R * Lmax`` slots, replicate ``j`` component ``l`` sitting at
``K + j * Lmax + l``. Slots for absent replicates or components carry zero
prior variance and therefore zero posterior moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag

from .basis import SplineBasis, evaluate
from .dataset import Dataset
from .stn import StNParams

SIGMA2_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """Raised when a linear-algebra step fails (singular or non-PD matrices)."""


@dataclass(frozen=True)
class Designs:
    """Zero-padded design arrays for all variables.

    Shapes use ``M`` variables, ``N`` = max observations per variable,
    ``R`` = max replicates per variable and ``p`` basis functions.
    """

    variable_ids: tuple[str, ...]
    replicate_ids: tuple[tuple[str, ...], ...]
    y: np.ndarray  # (M, N)
    mask: np.ndarray  # (M, N) bool
    times: np.ndarray  # (M, N)
    B: np.ndarray  # (M, N, p)
    rep: np.ndarray  # (M, N) replicate slot of each row
    rep_mask: np.ndarray  # (M, R) bool
    n_obs: np.ndarray  # (M,)
    n_rep: np.ndarray  # (M,)
    BtB: np.ndarray = field(repr=False)  # (M, p, p)
    Bty: np.ndarray = field(repr=False)  # (M, p)
    BtB_rep: np.ndarray = field(repr=False)  # (M, R, p, p)
    Bty_rep: np.ndarray = field(repr=False)  # (M, R, p)
    onehot: np.ndarray = field(repr=False)  # (M, N, R)

    @property
    def M(self) -> int:
        return self.y.shape[0]

    @property
    def R(self) -> int:
        return self.rep_mask.shape[1]

    @property
    def p(self) -> int:
        return self.B.shape[2]

    def B_i(self, i: int) -> np.ndarray:
        return self.B[i, self.mask[i]]

    def y_i(self, i: int) -> np.ndarray:
        return self.y[i, self.mask[i]]

    def blocks(self, i: int) -> list[np.ndarray]:
        """Per-replicate basis matrices ``B_ij`` for variable ``i``."""
        rows = self.mask[i]
        return [self.B[i, rows & (self.rep[i] == j)] for j in range(self.n_rep[i])]

    def Btilde_i(self, i: int) -> np.ndarray:
        return block_diag(*self.blocks(i))

    def subset(self, idx) -> "Designs":
        idx = np.atleast_1d(np.asarray(idx))
        return Designs(
            variable_ids=tuple(self.variable_ids[k] for k in idx),
            replicate_ids=tuple(self.replicate_ids[k] for k in idx),
            **{
                name: getattr(self, name)[idx]
                for name in (
                    "y", "mask", "times", "B", "rep", "rep_mask", "n_obs", "n_rep",
                    "BtB", "Bty", "BtB_rep", "Bty_rep", "onehot",
                )
            },
        )


def assemble_designs(ds: Dataset, basis: SplineBasis) -> Designs:
    """Evaluate the basis at every observation time and pad across variables.

    Rows of each variable are ordered by replicate (dataset order) then time,
    matching ``VariablePanel.y``.
    """
    blocks = [
        [(r.times, r.values, evaluate(basis, r.times)) for r in var.replicates] for var in ds
    ]
    rep_ids = [[r.replicate_id for r in var.replicates] for var in ds]
    return designs_from_blocks(blocks, ds.variable_ids, rep_ids)


def designs_from_blocks(blocks, variable_ids=None, replicate_ids=None) -> Designs:
    """Build padded designs from ``blocks[i][j] = (times, y, B)``.

    ``B`` is the ``N_ij x p`` basis matrix of replicate ``j`` of variable
    ``i``; replicates may have no observations.
    """
    M = len(blocks)
    p = next(np.shape(b[2])[1] for var in blocks for b in var)
    N = max(max(sum(len(b[1]) for b in var) for var in blocks), 1)
    R = max(len(var) for var in blocks)
    y = np.zeros((M, N))
    times = np.zeros((M, N))
    mask = np.zeros((M, N), dtype=bool)
    B = np.zeros((M, N, p))
    rep = np.zeros((M, N), dtype=int)
    rep_mask = np.zeros((M, R), dtype=bool)
    for i, var in enumerate(blocks):
        row = 0
        for j, (t, v, Bij) in enumerate(var):
            n = len(v)
            sl = slice(row, row + n)
            y[i, sl] = v
            times[i, sl] = t
            B[i, sl] = Bij
            rep[i, sl] = j
            mask[i, sl] = True
            row += n
        rep_mask[i, : len(var)] = True
    onehot = ((rep[:, :, None] == np.arange(R)) & mask[:, :, None]).astype(float)
    if variable_ids is None:
        variable_ids = [f"v{i}" for i in range(M)]
    if replicate_ids is None:
        replicate_ids = [[f"r{j}" for j in range(len(var))] for var in blocks]
    return Designs(
        variable_ids=tuple(variable_ids),
        replicate_ids=tuple(tuple(r) for r in replicate_ids),
        y=y,
        mask=mask,
        times=times,
        B=B,
        rep=rep,
        rep_mask=rep_mask,
        n_obs=mask.sum(axis=1),
        n_rep=rep_mask.sum(axis=1),
        BtB=np.einsum("inp,inq->ipq", B, B),
        Bty=np.einsum("inp,in->ip", B, y),
        BtB_rep=np.einsum("inr,inp,inq->irpq", onehot, B, B),
        Bty_rep=np.einsum("inr,inp,in->irp", onehot, B, y),
        onehot=onehot,
    )


@dataclass
class MultiLevelParams:
    """All model parameters.

    ``theta_mu`` is a p-vector for the multi-level model, or an ``(M, p)``
    array of free per-variable means for the single-level baseline.
    Exactly one of ``D_alpha`` (Gaussian variant) and ``stn`` (skew-t-normal
    variant) describes the variable-level loadings; the skew-t-normal variant
    may additionally carry ``D_alpha`` as a record of component variances.
    """

    theta_mu: np.ndarray
    Theta_alpha: np.ndarray  # (p, K)
    Theta_beta: list[np.ndarray]  # per variable (p, L_i)
    D_beta: list[np.ndarray]  # per variable (L_i,)
    sigma2: np.ndarray  # (M,)
    D_alpha: np.ndarray | None = None  # (K,)
    stn: list[StNParams] | None = None

    @property
    def variant(self) -> str:
        return "stn" if self.stn is not None else "gaussian"

    @property
    def K(self) -> int:
        return self.Theta_alpha.shape[1]

    @property
    def p(self) -> int:
        return self.Theta_alpha.shape[0]

    @property
    def M(self) -> int:
        return len(self.sigma2)

    @property
    def L(self) -> list[int]:
        return [t.shape[1] for t in self.Theta_beta]

    @property
    def free_mean(self) -> bool:
        return np.ndim(self.theta_mu) == 2

    def mean_coefficients(self) -> np.ndarray:
        """Grand-mean coefficients broadcast to ``(M, p)``."""
        return np.broadcast_to(self.theta_mu, (self.M, self.p))

    def copy(self) -> "MultiLevelParams":
        return MultiLevelParams(
            theta_mu=np.array(self.theta_mu, dtype=float),
            Theta_alpha=np.array(self.Theta_alpha, dtype=float),
            Theta_beta=[np.array(t, dtype=float) for t in self.Theta_beta],
            D_beta=[np.array(d, dtype=float) for d in self.D_beta],
            sigma2=np.array(self.sigma2, dtype=float),
            D_alpha=None if self.D_alpha is None else np.array(self.D_alpha, dtype=float),
            stn=None if self.stn is None else list(self.stn),
        )

    def padded_beta(self) -> tuple[np.ndarray, np.ndarray]:
        """``Theta_beta`` as ``(M, p, Lmax)`` and ``D_beta`` as ``(M, Lmax)``."""
        Lmax = max(self.L, default=0)
        Th = np.zeros((self.M, self.p, Lmax))
        D = np.zeros((self.M, Lmax))
        for i, (t, d) in enumerate(zip(self.Theta_beta, self.D_beta)):
            Th[i, :, : t.shape[1]] = t
            D[i, : len(d)] = d
        return Th, D

    def blocks(self) -> dict[str, np.ndarray]:
        """Flat view of all parameter blocks, used for change monitoring."""
        out = {
            "theta_mu": np.ravel(self.theta_mu),
            "Theta_alpha": np.ravel(self.Theta_alpha),
            "Theta_beta": np.concatenate([t.ravel() for t in self.Theta_beta] or [np.zeros(0)]),
            "D_beta": np.concatenate([d.ravel() for d in self.D_beta] or [np.zeros(0)]),
            "sigma2": np.ravel(self.sigma2),
        }
        if self.stn is not None:
            out["stn"] = np.array([[s.xi, s.sigma2, s.lam, s.nu] for s in self.stn]).ravel()
        elif self.D_alpha is not None:
            out["D_alpha"] = np.ravel(self.D_alpha)
        return out


@dataclass(frozen=True)
class Layout:
    K: int
    R: int
    Lmax: int

    @property
    def q(self) -> int:
        return self.K + self.R * self.Lmax

    def beta_index(self, l: int) -> np.ndarray:
        """Slots of component ``l`` for every replicate."""
        return self.K + np.arange(self.R) * self.Lmax + l


def layout(params: MultiLevelParams, designs: Designs) -> Layout:
    return Layout(params.K, designs.R, max(params.L, default=0))


def loading_design(params: MultiLevelParams, designs: Designs) -> np.ndarray:
    """``Z_i = [B_i Theta_alpha, Btilde_i Thetatilde_beta_i]`` padded to ``(M, N, q)``."""
    lay = layout(params, designs)
    Za = designs.B @ params.Theta_alpha  # (M, N, K)
    Th, _ = params.padded_beta()
    BT = np.einsum("inp,ipl->inl", designs.B, Th)  # (M, N, Lmax)
    Zb = designs.onehot[:, :, :, None] * BT[:, :, None, :]
    Zb = Zb.reshape(designs.M, designs.y.shape[1], lay.R * lay.Lmax)
    return np.concatenate([Za, Zb], axis=2)


def beta_prior_variance(params: MultiLevelParams, designs: Designs) -> np.ndarray:
    """Prior variances of the replicate-level slots, ``(M, R * Lmax)``."""
    _, D = params.padded_beta()
    var = designs.rep_mask[:, :, None] * D[:, None, :]
    return var.reshape(designs.M, -1)


def prior_variance(params: MultiLevelParams, designs: Designs) -> np.ndarray:
    """Diagonal prior covariance of ``u_i`` under the Gaussian variant, ``(M, q)``."""
    if params.D_alpha is None:
        raise ValueError("Gaussian prior variance requires D_alpha")
    Da = np.broadcast_to(np.asarray(params.D_alpha, float), (designs.M, params.K))
    return np.concatenate([Da, beta_prior_variance(params, designs)], axis=1)


def residuals(params: MultiLevelParams, designs: Designs) -> np.ndarray:
    """``y_i - B_i theta_mu`` (zero on padding)."""
    r = designs.y - np.einsum("inp,ip->in", designs.B, params.mean_coefficients())
    return r * designs.mask


@dataclass
class _Posterior:
    mean: np.ndarray  # (M, q)
    cov: np.ndarray  # (M, q, q)
    eps2: np.ndarray  # (M,) E[|r - Z u|^2 | r]
    logdet_V: np.ndarray  # (M,)
    quad: np.ndarray  # (M,) r' V^-1 r


def gaussian_posterior(Z, prior_var, r, sigma2, n_obs=None) -> _Posterior:
    """Posterior of ``u`` in ``r = Z u + eps``, ``u ~ N(0, diag(prior_var))``.

    Uses the full SVD ``Z diag(prior_var)^(1/2) = U diag(a) W'`` so that every
    quantity is a sum of nonnegative terms in ``a^2 + sigma2``; this stays
    accurate when ``sigma2`` is tiny relative to the loading variance and
    allows zero prior variances. Rows of ``Z`` and ``r`` beyond ``n_obs``
    (zero padding) are excluded from the log-determinant.
    """
    M, N, q = Z.shape
    s = np.sqrt(np.maximum(prior_var, 0.0))
    A = Z * s[:, None, :]
    U, a, Wt = np.linalg.svd(A, full_matrices=True)
    k = a.shape[1]
    s2 = np.asarray(sigma2, float)[:, None]
    aN = np.zeros((M, N))
    aN[:, :k] = a
    denom = aN**2 + s2  # (M, N)
    ur = np.einsum("inj,in->ij", U, r)
    quad = np.sum(ur**2 / denom, axis=1)
    n_pad = 0 if n_obs is None else N - np.asarray(n_obs)
    logdet = np.sum(np.log(denom), axis=1) - n_pad * np.log(sigma2)
    # loading space: W diag(.) W' with q entries, zero singular values beyond k
    coef = a / denom[:, :k] * ur[:, :k]  # (M, k)
    W = np.swapaxes(Wt, 1, 2)  # (M, q, q)
    mean = s * np.einsum("iqk,ik->iq", W[:, :, :k], coef)
    aq = np.zeros((M, q))
    aq[:, :k] = a
    shrink = s2 / (aq**2 + s2)  # (M, q)
    cov = np.einsum("iqj,ij,irj->iqr", W, shrink, W)
    cov = s[:, :, None] * cov * s[:, None, :]
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    resid = np.sum((ur * s2 / denom) ** 2, axis=1)
    trace = np.sum(a**2 * s2 / denom[:, :k], axis=1)
    return _Posterior(mean=mean, cov=cov, eps2=resid + trace, logdet_V=logdet, quad=quad)


@dataclass
class LoadingMoments:
    """Conditional moments of the loadings given the data, padded per variable.

    ``mean`` is ``E[u_i | y_i]`` and ``second`` is ``E[u_i u_i' | y_i]``;
    ``eps2`` is ``E[eps_i' eps_i | y_i]``.
    """

    mean: np.ndarray
    second: np.ndarray
    eps2: np.ndarray
    layout: Layout
    n_rep: np.ndarray
    L: list[int]
    loglik: np.ndarray | None = None  # per variable, Gaussian E-step only

    @property
    def alpha(self) -> np.ndarray:
        return self.mean[:, : self.layout.K]

    @property
    def beta(self) -> np.ndarray:
        """Posterior mean replicate loadings, ``(M, R, Lmax)``."""
        lay = self.layout
        return self.mean[:, lay.K :].reshape(self.mean.shape[0], lay.R, lay.Lmax)

    def variable(self, i: int) -> tuple[np.ndarray, np.ndarray, float]:
        """Unpadded ``(mean, second moment, E[eps'eps])`` for variable ``i``."""
        lay = self.layout
        keep = list(range(lay.K)) + [
            lay.K + j * lay.Lmax + l for j in range(self.n_rep[i]) for l in range(self.L[i])
        ]
        keep = np.array(keep, dtype=int)
        return self.mean[i, keep], self.second[i][np.ix_(keep, keep)], float(self.eps2[i])

    def copy(self) -> "LoadingMoments":
        return replace(self, mean=self.mean.copy(), second=self.second.copy(), eps2=self.eps2.copy())


def marginal_covariance(params: MultiLevelParams, i: int, designs: Designs) -> np.ndarray:
    """Dense ``V_i`` for the Gaussian variant."""
    if params.variant != "gaussian":
        raise ValueError("the skew-t-normal variant has no closed-form marginal covariance")
    Bi = designs.B_i(i)
    Bt = designs.Btilde_i(i)
    n = designs.n_rep[i]
    Ta = params.Theta_alpha
    Tb = block_diag(*[params.Theta_beta[i]] * n) if params.L[i] else np.zeros((Bt.shape[1], 0))
    Db = np.tile(params.D_beta[i], n)
    V = (
        Bi @ Ta @ np.diag(params.D_alpha) @ Ta.T @ Bi.T
        + Bt @ Tb @ np.diag(Db) @ Tb.T @ Bt.T
        + params.sigma2[i] * np.eye(Bi.shape[0])
    )
    return 0.5 * (V + V.T)


def per_variable_loglik(params: MultiLevelParams, designs: Designs, post: _Posterior | None = None):
    """Gaussian marginal log-likelihood of each variable (loading-space path)."""
    if post is None:
        post = gaussian_posterior(
            loading_design(params, designs),
            prior_variance(params, designs),
            residuals(params, designs),
            params.sigma2,
            designs.n_obs,
        )
    N = designs.n_obs
    return -0.5 * (N * math.log(2 * math.pi) + post.logdet_V + post.quad)


def gaussian_marginal_loglik(params: MultiLevelParams, designs: Designs, dense: bool = False) -> float:
    """Sum over variables of ``log MVN(y_i; B_i theta_mu, V_i)``."""
    if params.variant != "gaussian":
        raise ValueError("marginal likelihood is only available for the Gaussian variant")
    if not dense:
        return float(np.sum(per_variable_loglik(params, designs)))
    total = 0.0
    mu = params.mean_coefficients()
    for i in range(designs.M):
        V = marginal_covariance(params, i, designs)
        r = designs.y_i(i) - designs.B_i(i) @ mu[i]
        try:
            Lc = np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"V_i is not positive definite for variable {designs.variable_ids[i]!r}"
            ) from exc
        w = np.linalg.solve(Lc, r)
        total += -0.5 * (
            len(r) * math.log(2 * math.pi) + 2 * np.log(np.diag(Lc)).sum() + w @ w
        )
    return float(total)


# --- orthogonalisation ---------------------------------------------------------


def _sign_fix(Q: np.ndarray) -> np.ndarray:
    if Q.size == 0:
        return Q
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs


def _eigen_rotate(Theta: np.ndarray, d: np.ndarray):
    """Leading eigenpairs of ``Theta diag(d) Theta'`` and the loading rotation."""
    k = Theta.shape[1]
    if k == 0:
        return Theta.copy(), np.asarray(d, float).copy(), np.zeros((0, 0))
    C = Theta @ np.diag(d) @ Theta.T
    C = 0.5 * (C + C.T)
    evals, evecs = np.linalg.eigh(C)
    order = np.argsort(evals)[::-1][:k]
    Q = _sign_fix(evecs[:, order])
    lam = np.clip(evals[order], 0.0, None)
    # new loadings = Q' Theta old loadings keeps Theta u invariant on span(Q)
    return Q, lam, Q.T @ Theta


def orthogonalize(
    params: MultiLevelParams,
    moments: LoadingMoments | None = None,
    alpha_variance: np.ndarray | None = None,
) -> tuple[MultiLevelParams, LoadingMoments | None]:
    """Replace each level's ``Theta`` by eigenvectors of ``Theta D Theta'``.

    ``D`` is ``D_alpha``/``D_beta_i`` for the Gaussian variant. For the
    skew-t-normal variant ``alpha_variance`` (mean loading second moments)
    plays the role of ``D_alpha``. Eigenvalues become the new ``D`` in
    non-increasing order; each eigenvector is signed so its largest-magnitude
    entry is positive. When ``moments`` is given the loadings are rotated so
    that ``Theta u`` is unchanged.
    """
    out = params.copy()
    d_alpha = alpha_variance if alpha_variance is not None else params.D_alpha
    if d_alpha is None:
        raise ValueError("orthogonalize needs D_alpha or alpha_variance")
    Qa, la, Ra = _eigen_rotate(params.Theta_alpha, np.asarray(d_alpha, float))
    out.Theta_alpha = Qa
    out.D_alpha = la
    rotations = []
    for i in range(params.M):
        Qb, lb, Rb = _eigen_rotate(params.Theta_beta[i], params.D_beta[i])
        out.Theta_beta[i] = Qb
        out.D_beta[i] = lb
        rotations.append(Rb)
    if moments is None:
        return out, None

    lay = moments.layout
    T = np.zeros((params.M, lay.q, lay.q))
    T[:, : lay.K, : lay.K] = Ra
    for i, Rb in enumerate(rotations):
        Li = Rb.shape[0]
        for j in range(moments.n_rep[i]):
            s = lay.K + j * lay.Lmax
            T[i, s : s + Li, s : s + Li] = Rb
    new = moments.copy()
    new.mean = np.einsum("iqr,ir->iq", T, moments.mean)
    new.second = T @ moments.second @ np.swapaxes(T, 1, 2)
    return out, new


# --- curves ----------------------------------------------------------------------


@dataclass
class FittedCurves:
    """Variable and replicate curves on the fine grid.

    ``variable`` is ``(M, G)``; ``replicate`` is ``(M, R, G)`` with
    ``replicate_mask`` flagging real replicates.
    """

    grid: np.ndarray
    variable_ids: tuple[str, ...]
    replicate_ids: tuple[tuple[str, ...], ...]
    variable: np.ndarray
    replicate: np.ndarray
    replicate_mask: np.ndarray
    grand_mean: np.ndarray | None = None


def extract_curves(
    params: MultiLevelParams,
    alpha: np.ndarray,
    beta: np.ndarray,
    basis: SplineBasis,
    designs: Designs,
) -> FittedCurves:
    """Variable curves ``B(theta_mu + Theta_alpha alpha_i)`` and replicate curves.

    ``alpha`` is ``(M, K)``; ``beta`` is ``(M, R, Lmax)`` (zero-padded).
    """
    Bg = basis.B
    coef = params.mean_coefficients() + np.asarray(alpha, float).reshape(params.M, params.K) @ params.Theta_alpha.T
    var_curves = coef @ Bg.T
    Th, _ = params.padded_beta()
    beta = np.asarray(beta, float)
    rep_coef = np.einsum("ipl,irl->irp", Th, beta) if beta.size else np.zeros((params.M, designs.R, params.p))
    rep_curves = var_curves[:, None, :] + rep_coef @ Bg.T
    rep_curves = rep_curves * designs.rep_mask[:, :, None]
    grand = None if params.free_mean else Bg @ params.theta_mu
    return FittedCurves(
        grid=basis.grid.copy(),
        variable_ids=designs.variable_ids,
        replicate_ids=designs.replicate_ids,
        variable=var_curves,
        replicate=rep_curves,
        replicate_mask=designs.rep_mask.copy(),
        grand_mean=grand,
    )
