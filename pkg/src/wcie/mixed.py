"""Linear mixed-effects models fitted by maximum likelihood.

Model for subject ``i``::

    y_i = X_i beta + Z_i b_i + eps_i,   b_i ~ N(0, B),   eps_i ~ N(0, sigma^2 I)

The optimizer works on the profiled likelihood: with the relative
covariance ``Lambda = B / sigma^2 = L L^T`` fixed, ``beta`` and ``sigma^2``
have closed forms, so only the lower-triangular entries of ``L`` are
searched.  ``L`` is left unconstrained: any ``L`` gives a valid ``Lambda``,
and a log-scale diagonal would let a variance that wanders towards zero get
stuck there with a vanishing gradient.
Fixed effects and random-effect modes come from per-subject sufficient
statistics (``Z'Z``, ``Z'X``, ``Z'y``); the penalized residual sum of squares
and the gradient terms are then evaluated on the records themselves, which
keeps the objective accurate when ``sigma`` is tiny next to the random
effects and ``Lambda`` is huge.

The full parameter vector, used for the observed information and for
parametric draws, is ``phi = (beta, log sigma, vech(chol B))`` with the
lower triangle of the Cholesky factor listed row by row.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from .data import LongitudinalDataset
from .splines import SplineBasis

log = logging.getLogger(__name__)

COLLINEARITY_LIMIT = 1e10
GTOL = 1e-5


class ConvergenceError(RuntimeError):
    """The likelihood optimizer did not converge."""


class CollinearityError(ValueError):
    """The fixed-effects design is rank deficient or nearly so."""


# ---------------------------------------------------------------------------
# design rules


class Design:
    """Maps a design frame (``time`` plus named covariates) to a matrix.

    Terms:

    ``"1"``
        intercept column
    ``"time"``
        the time variable
    ``"spline"``
        the non-constant columns of ``basis`` evaluated at time
    ``"name"``
        covariate ``name``
    ``"name:time"``
        covariate ``name`` multiplied by time
    """

    def __init__(self, terms: Sequence[str], basis: SplineBasis | None = None):
        self.terms = tuple(terms)
        self.basis = basis
        if "spline" in self.terms and basis is None:
            raise ValueError("a 'spline' term needs a basis")

    def __repr__(self) -> str:
        return f"Design({list(self.terms)!r}, basis={self.basis!r})"

    def __eq__(self, other):
        return isinstance(other, Design) and self.terms == other.terms and self.basis == other.basis

    @property
    def names(self) -> list[str]:
        out = []
        for term in self.terms:
            if term == "spline":
                out += [f"spline{k}" for k in range(1, self.basis.dimension)]
            else:
                out.append(term)
        return out

    def __call__(self, frame: Mapping[str, np.ndarray]) -> np.ndarray:
        t = np.asarray(frame["time"], dtype=float)
        cols = []
        for term in self.terms:
            if term == "1":
                cols.append(np.ones_like(t)[:, None])
            elif term == "time":
                cols.append(t[:, None])
            elif term == "spline":
                cols.append(self.basis(t)[:, 1:])
            elif term.endswith(":time"):
                cols.append((_column(frame, term[:-5]) * t)[:, None])
            else:
                cols.append(_column(frame, term)[:, None])
        if not cols:
            return np.zeros((t.size, 0))
        return np.hstack(cols)


def _column(frame, name) -> np.ndarray:
    try:
        return np.asarray(frame[name], dtype=float)
    except KeyError:
        raise KeyError(f"design references unknown column {name!r}") from None


@dataclass(frozen=True)
class MixedModelSpec:
    """Fixed- and random-effects design rules; random covariance is unstructured."""

    fixed: Design
    random: Design

    @property
    def n_fixed(self) -> int:
        return len(self.fixed.names)

    @property
    def n_random(self) -> int:
        return len(self.random.names)

    @property
    def n_params(self) -> int:
        q = self.n_random
        return self.n_fixed + 1 + q * (q + 1) // 2


# ---------------------------------------------------------------------------
# parameter coding


def chol_to_lower(v: np.ndarray, q: int) -> np.ndarray:
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = v
    return L


def canonical_lower(L: np.ndarray) -> np.ndarray:
    """Flip column signs so the diagonal is non-negative (``L L^T`` unchanged)."""
    sign = np.where(np.diag(L) < 0, -1.0, 1.0)
    return L * sign


def psd_cholesky(B: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``L`` with non-negative diagonal and ``L L^T = B``.

    Zero pivots (singular ``B``) leave the rest of their column at zero.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    try:
        return np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        pass
    q = B.shape[0]
    L = np.zeros((q, q))
    thresh = tol * max(1.0, float(np.max(np.abs(np.diag(B)))))
    for j in range(q):
        d = B[j, j] - L[j, :j] @ L[j, :j]
        if d <= thresh:
            if d < -1e3 * thresh:
                raise np.linalg.LinAlgError("matrix is not positive semidefinite")
            continue
        L[j, j] = np.sqrt(d)
        L[j + 1 :, j] = (B[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def encode_params(beta, sigma: float, B) -> np.ndarray:
    """``(beta, sigma, B) -> phi = (beta, log sigma, vech(chol B))``."""
    q = np.atleast_2d(B).shape[0]
    return np.concatenate([np.asarray(beta, float), [np.log(sigma)], psd_cholesky(B)[np.tril_indices(q)]])


def decode_params(phi, p: int, q: int) -> tuple[np.ndarray, float, np.ndarray]:
    """``phi -> (beta, sigma, B)``; any ``phi`` yields sigma > 0 and B positive semidefinite."""
    phi = np.asarray(phi, dtype=float)
    L = chol_to_lower(phi[p + 1 :], q)
    return phi[:p].copy(), float(np.exp(phi[p])), L @ L.T


def _factor(B: np.ndarray) -> np.ndarray:
    """Any ``F`` with ``F F^T = B`` for a PSD ``B``."""
    try:
        return np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh((B + B.T) / 2)
        return V * np.sqrt(np.clip(w, 0.0, None))


# ---------------------------------------------------------------------------
# results


@dataclass
class MixedModelFit:
    """Maximum-likelihood fit.

    ``param_cov`` is the inverse observed information for ``phi`` (fixed
    effects, log residual SD, row-wise lower Cholesky entries of ``B``).
    The Cholesky scale keeps the information finite when a variance
    component sits on the boundary.
    """

    beta: np.ndarray
    B: np.ndarray
    sigma: float
    loglik: float
    param_cov: np.ndarray
    blups: dict[str, np.ndarray]
    fixed_names: list[str]
    random_names: list[str]
    n_obs: int
    n_subjects: int
    converged: bool = True
    n_iter: int = 0
    relative_chol: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_params(self) -> int:
        q = len(self.random_names)
        return len(self.beta) + 1 + q * (q + 1) // 2

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    @property
    def phi(self) -> np.ndarray:
        if self.sigma <= 0:
            raise ValueError("degenerate fit has no unconstrained parameter vector")
        return encode_params(self.beta, self.sigma, self.B)

    @property
    def beta_cov(self) -> np.ndarray:
        p = len(self.beta)
        return self.param_cov[:p, :p]

    def natural_cov(self) -> np.ndarray:
        """Delta-method covariance of ``(beta, sigma, vech(B))``."""
        p, q = len(self.beta), len(self.random_names)
        phi = self.phi
        J = _jacobian(lambda v: _natural(v, p, q), phi)
        return J @ self.param_cov @ J.T


def _natural(phi, p, q):
    beta, sigma, B = decode_params(phi, p, q)
    return np.concatenate([beta, [sigma], B[np.tril_indices(q)]])


def _jacobian(fun, x, rel=1e-6):
    x = np.asarray(x, float)
    f0 = fun(x)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = rel * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return J


# ---------------------------------------------------------------------------
# engine


class LinearMixedModel:
    """Sufficient-statistic engine for one response vector and design.

    Records may be in any order; they are grouped by ``groups``.  Fixed
    effects columns are rescaled to unit root-mean-square internally.
    """

    def __init__(self, y, X, Z, groups):
        y = np.asarray(y, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        groups = np.asarray(groups, dtype=object)
        n = y.size
        if X.shape[0] != n or Z.shape[0] != n or groups.size != n:
            raise ValueError("y, X, Z and groups must have the same number of rows")
        if n < X.shape[1]:
            raise CollinearityError(f"{n} observations cannot identify {X.shape[1]} fixed effects")
        # canonical record order (subject, then response and design values) so
        # that any permutation of the input gives bit-identical statistics
        ids, code = np.unique(groups, return_inverse=True)
        order = np.lexsort((*Z.T[::-1], *X.T[::-1], y, code))
        starts = np.flatnonzero(np.r_[True, np.diff(code[order]) != 0])
        y, X, Z = y[order], X[order], Z[order]
        scale = np.sqrt(np.mean(X**2, axis=0))
        if np.any(scale == 0):
            raise CollinearityError("fixed design has an all-zero column")
        check_collinearity(X)
        Xs = X / scale
        # statistics of the response centred on its least-squares fit: the
        # profiled residual is unchanged and far less prone to cancellation
        self._beta0 = np.linalg.lstsq(Xs, y, rcond=None)[0]
        yc = y - Xs @ self._beta0
        self.ids = ids
        self.n, self.p, self.q = n, X.shape[1], Z.shape[1]
        self.scale = scale
        self.G = np.add.reduceat(Z[:, :, None] * Z[:, None, :], starts)
        self.ZX = np.add.reduceat(Z[:, :, None] * Xs[:, None, :], starts)
        self.Zy = np.add.reduceat(Z * yc[:, None], starts)
        self._Gsum = self.G.sum(axis=0)
        self.XtX = Xs.T @ Xs
        self.Xty = Xs.T @ yc
        self.yty = float(yc @ yc)
        self._y, self._Xs = y, Xs
        self._yc, self._Z = yc, Z
        self._code = code[order]
        self._starts = starts
        self._tril = np.tril_indices(self.q)

    @property
    def n_subjects(self) -> int:
        return self.ids.size

    @property
    def n_params(self) -> int:
        return self.p + 1 + self.q * (self.q + 1) // 2

    # -- building blocks --------------------------------------------------

    def _factorize(self, L: np.ndarray):
        """``logdet(M)`` and ``C^-1`` for ``M = I + L' G L = C C'`` per subject."""
        M = np.eye(self.q) + L.T @ self.G @ L
        C = np.linalg.cholesky(M)
        logdet = 2.0 * np.log(np.diagonal(C, axis1=1, axis2=2)).sum()
        return logdet, np.linalg.inv(C)

    def _normal_equations(self, L: np.ndarray, Ci: np.ndarray):
        """``A = X' V^-1 X`` and ``c = X' V^-1 y`` (times sigma^2) for ``Lambda = L L'``."""
        p = self.p
        W = Ci @ L.T
        WZX = (W @ self.ZX).reshape(-1, p)
        WZy = (W @ self.Zy[..., None]).reshape(-1)
        return self.XtX - WZX.T @ WZX, self.Xty - WZX.T @ WZy

    def _modes(self, L, beta_s, Ci):
        """Random-effect modes at ``beta_s`` (shift from the centring fit).

        Returns the spherical modes ``u`` (``b = L u``), the record residuals
        ``r = y - X beta - Z L u``, the penalized residual sum
        ``|r|^2 + |u|^2`` and the per-subject ``G L M^-1``.
        """
        Minv = np.swapaxes(Ci, 1, 2) @ Ci
        Ze = self.Zy - self.ZX @ beta_s
        u = (Minv @ (Ze @ L)[..., None])[..., 0]
        r = self._yc - self._Xs @ beta_s - np.einsum("nq,nq->n", self._Z, (u @ L.T)[self._code])
        pwrss = float(r @ r + np.sum(u * u))
        return u, r, pwrss, self.G @ L @ Minv

    def _SL(self, L, u, r, GLMinv, sigma2):
        """``S L`` where ``S = d(-2 loglik)/dLambda`` at the current modes."""
        Zr = np.add.reduceat(self._Z * r[:, None], self._starts)
        return GLMinv.sum(axis=0) - (Zr.T @ u) / sigma2

    # -- profiled objective ----------------------------------------------

    def profiled(self, theta):
        """``-loglik`` profiled over beta and sigma, and its gradient in ``theta``."""
        # line searches may probe absurd steps; report those as infeasible
        if not np.all(np.isfinite(theta)) or np.max(np.abs(theta), initial=0.0) > 1e8:
            return np.inf, np.zeros_like(theta)
        L = chol_to_lower(theta, self.q)
        try:
            logdet, Ci = self._factorize(L)
            beta_s = _spd_solve(*self._normal_equations(L, Ci))
            u, r, pwrss, GLMinv = self._modes(L, beta_s, Ci)
        except (np.linalg.LinAlgError, CollinearityError):
            return np.inf, np.zeros_like(theta)
        if not pwrss > 0 or not np.isfinite(logdet):
            return np.inf, np.zeros_like(theta)
        sigma2 = pwrss / self.n
        f = 0.5 * (self.n * np.log(2 * np.pi * sigma2) + self.n + logdet)
        return f, self._SL(L, u, r, GLMinv, sigma2)[self._tril]

    def profiled_estimates(self, theta):
        L = canonical_lower(chol_to_lower(theta, self.q))
        Ci = self._factorize(L)[1]
        beta_s = _spd_solve(*self._normal_equations(L, Ci))
        sigma2 = self._modes(L, beta_s, Ci)[2] / self.n
        sigma = np.sqrt(sigma2)
        phi_s = np.concatenate([self._beta0 + beta_s, [np.log(sigma)], (sigma * L)[self._tril]])
        return phi_s

    # -- full objective ---------------------------------------------------

    def to_scaled(self, phi):
        phi = np.array(phi, dtype=float, copy=True)
        phi[: self.p] *= self.scale
        return phi

    def from_scaled(self, phi_s):
        phi = np.array(phi_s, dtype=float, copy=True)
        phi[: self.p] /= self.scale
        return phi

    def negloglik_scaled(self, phi_s):
        """``-loglik`` and gradient over the full scaled parameter vector."""
        p, n = self.p, self.n
        beta_s = phi_s[:p] - self._beta0
        log_sigma = phi_s[p]
        sigma2 = np.exp(2 * log_sigma)
        LB = chol_to_lower(phi_s[p + 1 :], self.q)
        L = LB / np.sqrt(sigma2)
        logdet, Ci = self._factorize(L)
        u, r, Q, GLMinv = self._modes(L, beta_s, Ci)
        f = 0.5 * (n * np.log(2 * np.pi) + 2 * n * log_sigma + logdet + Q / sigma2)
        SL = self._SL(L, u, r, GLMinv, sigma2)
        g_beta = -(self._Xs.T @ r) / sigma2
        g_ls = n - Q / sigma2 - np.sum(SL * L)
        g_B = (SL / np.sqrt(sigma2))[self._tril]
        return f, np.concatenate([g_beta, [g_ls], g_B])

    def loglik(self, phi) -> float:
        """Marginal log-likelihood at ``phi`` given in original units."""
        return -self.negloglik_scaled(self.to_scaled(phi))[0]

    def observed_information(self, phi_s):
        """Hessian of ``-loglik`` on the scaled problem.

        The fixed-effect block is exact (``A / sigma^2``); columns for the
        variance parameters are central differences of the analytic gradient.
        """
        k, p = phi_s.size, self.p
        H = np.empty((k, k))
        sigma2 = np.exp(2 * phi_s[p])
        L = chol_to_lower(phi_s[p + 1 :], self.q) / np.sqrt(sigma2)
        H[:p, :p] = self._normal_equations(L, self._factorize(L)[1])[0] / sigma2
        for j in range(p, k):
            h = 1e-5 * max(1.0, abs(phi_s[j]))
            e = np.zeros(k)
            e[j] = h
            H[:, j] = (self.negloglik_scaled(phi_s + e)[1] - self.negloglik_scaled(phi_s - e)[1]) / (2 * h)
        H[p:, :p] = H[:p, p:].T
        return (H + H.T) / 2

    # -- prediction -------------------------------------------------------

    def blups(self, beta, sigma, B) -> np.ndarray:
        """Conditional means of the random effects, one row per ``ids`` entry."""
        beta_s = np.asarray(beta, float) * self.scale - self._beta0
        Ze = self.Zy - np.einsum("nqp,p->nq", self.ZX, beta_s)
        return blup_from_stats(self.G, Ze, sigma, B)

    # -- fitting ----------------------------------------------------------

    def _start(self):
        q = self.q
        mean_sq = np.einsum("nii->i", self.G) / self.n
        lam = 1.0 / np.where(mean_sq > 0, mean_sq, 1.0) / q
        return np.diag(np.sqrt(lam))[self._tril]

    def _exact_fit(self):
        beta = np.linalg.lstsq(self._Xs, self._y, rcond=None)[0]
        resid = self._y - self._Xs @ beta
        tol = 1e-10 * (1.0 + np.sqrt(np.mean(self._y**2)))
        if np.sqrt(np.mean(resid**2)) <= tol:
            return beta
        return None

    def fit(self, theta0=None, maxiter: int = 2000, restart_seed: int = 0):
        """Maximize the likelihood; returns a dict of scaled-scale results."""
        exact = self._exact_fit()
        if exact is not None:
            warnings.warn("fixed effects reproduce the response exactly; variance components set to 0")
            return dict(degenerate=True, beta_s=exact, theta=None, n_iter=0)
        start = self._start() if theta0 is None else np.asarray(theta0, float)
        res = self._minimize(start, maxiter)
        if not res["converged"]:
            rng = np.random.default_rng(restart_seed)
            log.info("restarting optimizer from a perturbed start")
            res2 = self._minimize(res["x"] + rng.normal(0.0, 0.5, res["x"].size), maxiter)
            if res2["f"] <= res["f"] or res2["converged"]:
                res = res2
        if not res["converged"]:
            raise ConvergenceError(
                f"likelihood optimizer did not converge (max |grad| = {res['gmax']:.3g})"
            )
        return dict(degenerate=False, theta=res["x"], f=res["f"], n_iter=res["nit"], trace=res["trace"])

    def _minimize(self, start, maxiter):
        trace = []
        res = optimize.minimize(
            self.profiled,
            start,
            jac=True,
            method="BFGS",
            options=dict(gtol=GTOL, maxiter=maxiter),
            callback=lambda xk: trace.append(self.profiled(xk)[0]),
        )
        x = res.x
        f, g = self.profiled(x)
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        # BFGS may stop on lost precision right at the optimum; accept when the
        # gradient criterion or the relative objective stall criterion holds
        stalled = len(trace) >= 2 and abs(trace[-2] - trace[-1]) <= 1e-9 * max(1.0, abs(f))
        # when the entries of L are huge (tiny sigma) the absolute gradient
        # test is out of reach; the Newton decrement is scale-free
        decrement = float(g @ res.hess_inv @ g) if g.size and res.nit > 0 else np.inf
        converged = np.isfinite(f) and (
            gmax < GTOL or (stalled and gmax < 1e3 * GTOL) or (res.nit < maxiter and 0 <= decrement < 1e-6)
        )
        return dict(x=x, f=f, gmax=gmax, converged=bool(converged), nit=res.nit, trace=trace)


def blup_from_stats(G, Ze, sigma, B) -> np.ndarray:
    """``B Z'(Z B Z' + s^2 I)^{-1} e`` from ``G = Z'Z`` and ``Ze = Z'e`` per subject.

    Uses ``F (s^2 I + F'GF)^{-1} F' Z'e`` with ``F F' = B``, which stays
    valid when ``B`` is singular.
    """
    q = G.shape[1]
    F = _factor(np.atleast_2d(B))
    FtG = np.einsum("ji,njk->nik", F, G)
    M = sigma**2 * np.eye(q) + FtG @ F
    rhs = np.einsum("ji,nj->ni", F, Ze)
    try:
        w = np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        w = np.einsum("nij,nj->ni", np.linalg.pinv(M), rhs)
    return np.einsum("ij,nj->ni", F, w)


def _spd_solve(A, b):
    try:
        C = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise CollinearityError("X' V^-1 X is not positive definite") from None
    return np.linalg.solve(C.T, np.linalg.solve(C, b))


def design_condition(X: np.ndarray) -> float:
    """Condition number of ``X`` after scaling columns to unit norm."""
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        return np.inf
    s = np.linalg.svd(X / norms, compute_uv=False)
    return np.inf if s[-1] == 0 else float(s[0] / s[-1])


def check_collinearity(X: np.ndarray, names: Sequence[str] | None = None) -> None:
    cond = design_condition(X)
    if not cond <= COLLINEARITY_LIMIT:
        what = "" if names is None else f" (columns: {', '.join(names)})"
        raise CollinearityError(f"fixed design is collinear, condition number {cond:.3g}{what}")


def _safe_inverse(H: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(H)
    if w[0] <= 1e-10 * max(abs(w[-1]), 1e-300):
        warnings.warn("observed information is not positive definite; using a pseudo-inverse")
        keep = w > 1e-10 * abs(w[-1])
        inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
        return (V * inv_w) @ V.T
    cov = (V / w) @ V.T
    return (cov + cov.T) / 2


# ---------------------------------------------------------------------------
# public operations


def _arrays(spec: MixedModelSpec, data: LongitudinalDataset):
    frame = data.frame()
    return data.value, spec.fixed(frame), spec.random(frame), data.subject


def build_model(spec: MixedModelSpec, data: LongitudinalDataset) -> LinearMixedModel:
    y, X, Z, groups = _arrays(spec, data)
    try:
        return LinearMixedModel(y, X, Z, groups)
    except CollinearityError as exc:
        raise CollinearityError(f"{exc} [{', '.join(spec.fixed.names)}]") from None


def log_likelihood(spec: MixedModelSpec, params, data: LongitudinalDataset) -> float:
    """Marginal Gaussian log-likelihood at ``params = phi`` (original units)."""
    return build_model(spec, data).loglik(params)


def fit_lmm(
    spec: MixedModelSpec,
    data: LongitudinalDataset,
    start: MixedModelFit | None = None,
    compute_cov: bool = True,
) -> MixedModelFit:
    """Maximum-likelihood fit with observed-information covariance and BLUPs.

    ``start`` warm-starts the variance search from a previous fit of the
    same model structure.
    """
    model = build_model(spec, data)
    return fit_model(model, spec.fixed.names, spec.random.names, start=start, compute_cov=compute_cov)


def fit_model(model: LinearMixedModel, fixed_names, random_names, start=None, compute_cov=True) -> MixedModelFit:
    theta0 = None
    if start is not None and start.relative_chol is not None:
        theta0 = start.relative_chol[np.tril_indices(start.relative_chol.shape[0])]
    res = model.fit(theta0)
    p, q = model.p, model.q
    if res["degenerate"]:
        beta = res["beta_s"] / model.scale
        B = np.zeros((q, q))
        return MixedModelFit(
            beta=beta,
            B=B,
            sigma=0.0,
            loglik=np.inf,
            param_cov=np.zeros((model.n_params, model.n_params)),
            blups={sid: np.zeros(q) for sid in model.ids},
            fixed_names=list(fixed_names),
            random_names=list(random_names),
            n_obs=model.n,
            n_subjects=model.n_subjects,
        )
    phi_s = model.profiled_estimates(res["theta"])
    if compute_cov:
        H = model.observed_information(phi_s)
        cov_s = _safe_inverse(H)
        T = np.ones(phi_s.size)
        T[:p] = 1.0 / model.scale
        param_cov = cov_s * np.outer(T, T)
    else:
        param_cov = np.full((phi_s.size, phi_s.size), np.nan)
    phi = model.from_scaled(phi_s)
    beta, sigma, B = decode_params(phi, p, q)
    b = model.blups(beta, sigma, B)
    return MixedModelFit(
        beta=beta,
        B=B,
        sigma=sigma,
        loglik=-res["f"],
        param_cov=param_cov,
        blups=dict(zip(model.ids, b)),
        fixed_names=list(fixed_names),
        random_names=list(random_names),
        n_obs=model.n,
        n_subjects=model.n_subjects,
        n_iter=res["n_iter"],
        relative_chol=canonical_lower(chol_to_lower(res["theta"], q)),
    )


def predict_blup(fit: MixedModelFit, spec: MixedModelSpec, subject_records: LongitudinalDataset) -> np.ndarray:
    """Random-effect prediction for one subject from its own records.

    Dense evaluation of ``B Z'(Z B Z' + s^2 I)^{-1}(y - X beta)``.
    """
    if len(subject_records) == 0:
        raise ValueError("subject has no observations")
    frame = subject_records.frame()
    X, Z = spec.fixed(frame), spec.random(frame)
    resid = subject_records.value - X @ fit.beta
    V = Z @ fit.B @ Z.T + fit.sigma**2 * np.eye(len(resid))
    try:
        C = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(V) / V.shape[0]
        try:
            C = np.linalg.cholesky(V + jitter * np.eye(V.shape[0]))
        except np.linalg.LinAlgError:
            if not np.any(fit.B):
                return np.zeros(Z.shape[1])
            raise np.linalg.LinAlgError("marginal covariance is not invertible") from None
    w = np.linalg.solve(C.T, np.linalg.solve(C, resid))
    return fit.B @ Z.T @ w
