"""Extended Kalman filter over learned (or hand-written) state-space models.

A filter model exposes ``f(x, u)`` and ``h(x, u)`` written with the
autodiff operators, so the Jacobians ``F = df/dx`` and ``H = dh/dx`` come
from the tape. Models with a conic state constraint may also expose
``project(x, u)``, the autoencoder round trip used to pull an estimate back
into the feasible cone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import nssm


class FilterError(RuntimeError):
    pass


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float)
        n = len(self.mean)
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} does not match a {n}-dim mean")

    def check(self, tol=1e-10):
        asym = float(np.abs(self.cov - self.cov.T).max()) if self.cov.size else 0.0
        if asym > tol * max(1.0, float(np.abs(self.cov).max())):
            raise FilterError(f"covariance asymmetric by {asym:.3e}")
        lo = float(np.linalg.eigvalsh(self.cov).min())
        if lo < -tol * max(1.0, float(np.abs(self.cov).max())):
            raise FilterError(f"covariance has negative eigenvalue {lo:.3e}")
        return self

    @property
    def sigma3(self):
        return 3.0 * np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass
class NoiseModel:
    Qw: np.ndarray
    Qeta: np.ndarray

    def __post_init__(self):
        self.Qw = np.atleast_2d(np.asarray(self.Qw, dtype=float))
        self.Qeta = np.atleast_2d(np.asarray(self.Qeta, dtype=float))
        for name, Q in (("Qw", self.Qw), ("Qeta", self.Qeta)):
            if Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T, atol=1e-12):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(Q).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")

    @classmethod
    def diagonal(cls, qw, qeta, n_x, n_y):
        return cls(np.eye(n_x) * qw, np.eye(n_y) * qeta)


class LinearModel:
    """``x+ = A x + B u``, ``y = C x + D u``."""

    def __init__(self, A, C, B=None, D=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        n_x, n_y = self.A.shape[0], self.C.shape[0]
        self.B = np.zeros((n_x, 0)) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        self.D = np.zeros((n_y, self.B.shape[1])) if D is None else np.atleast_2d(np.asarray(D, dtype=float))

    def f(self, x, u):
        out = ad.matmul(self.A, x)
        return out + self.B @ np.asarray(u, dtype=float).reshape(-1) if self.B.shape[1] else out

    def h(self, x, u):
        out = ad.matmul(self.C, x)
        return out + self.D @ np.asarray(u, dtype=float).reshape(-1) if self.D.shape[1] else out


class NssmFilterModel:
    """Filter model backed by a Case II NSSM (physical units).

    ``f`` is ``P_x D_x A E``, ``h`` the measurement path ``P_y D_y E`` (or
    its curl-free gradient form), and ``project`` the autoencoder round
    trip ``P_x D_x E``.
    """

    def __init__(self, model: nssm.NssmCase2, weights):
        self.model = model
        self.weights = weights.detach()

    def f(self, x, u):
        return nssm.transition_map(self.model, self.weights, x, u)

    def h(self, x, u):
        return nssm.measurement_map(self.model, self.weights, x, u)

    def project(self, x, u):
        return nssm.reconstruct_state(self.model, self.weights, x, u)


def _eval(fn, x, u):
    return np.asarray(ad.value_of(fn(np.asarray(x, dtype=float), u)), dtype=float).reshape(-1)


def jacobians(model, x_post, u, x_prior=None):
    """``F = df/dx`` at the posterior mean and ``H = dh/dx`` at the prior mean."""
    x_prior = x_post if x_prior is None else x_prior
    F = ad.jacobian(lambda x: model.f(x, u), np.asarray(x_post, dtype=float))
    H = ad.jacobian(lambda x: model.h(x, u), np.asarray(x_prior, dtype=float))
    return np.atleast_2d(F), np.atleast_2d(H)


def _symmetrize(P, where):
    scale = max(1.0, float(np.abs(P).max()))
    asym = float(np.abs(P - P.T).max())
    if asym > 1e-9 * scale:
        raise FilterError(f"{where}: covariance asymmetric by {asym:.3e} before symmetrization")
    return 0.5 * (P + P.T)


def time_update(belief: GaussianBelief, u, model, noise: NoiseModel) -> GaussianBelief:
    """Prior ``(f(x+, u), F P+ F^T + Qw)``."""
    mean = _eval(model.f, belief.mean, u)
    if not np.all(np.isfinite(mean)):
        raise FilterError("time update produced a non-finite state")
    F = np.atleast_2d(ad.jacobian(lambda x: model.f(x, u), belief.mean))
    P = F @ belief.cov @ F.T + noise.Qw
    return GaussianBelief(mean, _symmetrize(P, "time update"))


def measurement_update(prior: GaussianBelief, y, u, model, noise: NoiseModel, return_innovation=False):
    """Posterior from one measurement.

    The gain ``K = P H^T S^{-1}`` comes from a Cholesky solve with the
    innovation covariance ``S = H P H^T + Qeta``.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    y_hat = _eval(model.h, prior.mean, u)
    H = np.atleast_2d(ad.jacobian(lambda x: model.h(x, u), prior.mean))
    S = H @ prior.cov @ H.T + noise.Qeta
    S = 0.5 * (S + S.T)
    try:
        cf = scipy.linalg.cho_factor(S)
    except (np.linalg.LinAlgError, ValueError):
        raise FilterError(f"innovation covariance is singular (condition number {np.linalg.cond(S):.3e})") from None
    K = scipy.linalg.cho_solve(cf, H @ prior.cov).T
    innov = y - y_hat
    mean = prior.mean + K @ innov
    P = (np.eye(len(mean)) - K @ H) @ prior.cov
    post = GaussianBelief(mean, _symmetrize(P, "measurement update"))
    return (post, innov) if return_innovation else post


def project_estimate(posterior: GaussianBelief, u, model) -> GaussianBelief:
    """Replace the mean by the model's projection; the covariance is kept."""
    if not hasattr(model, "project"):
        raise FilterError("model has no projection operator")
    return GaussianBelief(_eval(model.project, posterior.mean, u), posterior.cov.copy())


@dataclass
class FilterResult:
    means: np.ndarray
    covs: np.ndarray
    prior_means: np.ndarray
    prior_covs: np.ndarray
    innovation_norms: np.ndarray
    dt: float = 1.0
    x_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def sigma3(self):
        return 3.0 * np.sqrt(np.clip(np.diagonal(self.covs, axis1=1, axis2=2), 0.0, None))

    def cumulative_error(self) -> float:
        """``sum_k |x_k - x_hat_k|`` over the run."""
        if self.x_true is None:
            raise ValueError("no ground-truth state attached")
        return float(np.linalg.norm(self.x_true - self.means, axis=1).sum())

    def rmse(self) -> float:
        if self.x_true is None:
            raise ValueError("no ground-truth state attached")
        return float(np.sqrt(np.mean((self.x_true - self.means) ** 2)))

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n = self.means.shape[1]
        header = ["time"]
        if self.x_true is not None:
            header += [f"x{i}" for i in range(n)]
        header += [f"xhat{i}" for i in range(n)] + [f"sigma3_{i}" for i in range(n)] + ["innovation_norm"]
        s3 = self.sigma3
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.means)):
                row = [k * self.dt]
                if self.x_true is not None:
                    row += list(self.x_true[k])
                row += list(self.means[k]) + list(s3[k]) + [self.innovation_norms[k]]
                w.writerow([repr(float(v)) for v in row])
        return path


def run_filter(model, noise: NoiseModel, x0: GaussianBelief, U, Y, project: bool = False,
               x_true=None, dt: float = 1.0) -> FilterResult:
    """Filter a measurement stream.

    ``x0`` is the prior at step 0. Each step applies the measurement update
    with ``Y[k]``, the optional projection, then the time update with
    ``U[k]`` to form the next prior.
    """
    Y = np.asarray(Y, dtype=float)
    if len(Y) == 0:
        raise ValueError("empty measurement stream")
    Y = Y.reshape(len(Y), -1)
    U = np.asarray(U, dtype=float).reshape(len(Y), -1)
    prior = x0
    means, covs, pm, pc, innov = [], [], [], [], []
    for k in range(len(Y)):
        pm.append(prior.mean)
        pc.append(prior.cov)
        post, nu = measurement_update(prior, Y[k], U[k], model, noise, return_innovation=True)
        if project:
            post = project_estimate(post, U[k], model)
        means.append(post.mean)
        covs.append(post.cov)
        innov.append(float(np.linalg.norm(nu)))
        if k + 1 < len(Y):
            prior = time_update(post, U[k], model, noise)
    return FilterResult(np.asarray(means), np.asarray(covs), np.asarray(pm), np.asarray(pc),
                        np.asarray(innov), dt, None if x_true is None else np.asarray(x_true, dtype=float))


def kalman_filter_reference(A, C, Qw, Qeta, x0, P0, Y, B=None, U=None):
    """Textbook linear Kalman filter with explicit inverses, used as an oracle."""
    x, P = np.array(x0, dtype=float), np.array(P0, dtype=float)
    means, covs = [], []
    n = len(x)
    for k in range(len(Y)):
        S = C @ P @ C.T + Qeta
        K = P @ C.T @ np.linalg.inv(S)
        x = x + K @ (Y[k] - C @ x)
        P = (np.eye(n) - K @ C) @ P
        means.append(x.copy())
        covs.append(P.copy())
        x = A @ x + (B @ U[k] if B is not None else 0.0)
        P = A @ P @ A.T + Qw
    return np.asarray(means), np.asarray(covs)
