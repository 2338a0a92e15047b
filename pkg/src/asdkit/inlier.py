"""Inlier models on embeddings: a full-covariance Gaussian mixture fitted by EM, and local outlier factor.

Both follow the scikit-learn estimator protocol. ``anomaly_score`` returns
higher values for more anomalous inputs; ``score_samples`` is its negation
(sklearn convention: higher = more normal).
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
COLLAPSE_WEIGHT = 1e-12
LRD_EPS = 1e-10


class InlierModelError(ValueError):
    pass


def kmeans_plusplus(X: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of k-means++ seeds (D^2 sampling)."""
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            # remaining points coincide with chosen seeds
            candidates = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(candidates)) if candidates.size else int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return np.asarray(idx)


def _gaussian_log_density(X, mean, chol_lower):
    diff = solve_triangular(chol_lower, (X - mean).T, lower=True)
    maha = np.sum(diff**2, axis=0)
    log_det = 2.0 * np.sum(np.log(np.diag(chol_lower)))
    return -0.5 * (X.shape[1] * LOG_2PI + log_det + maha)


class GaussianMixtureScorer(OutlierMixin, BaseEstimator):
    """Gaussian mixture fitted by EM; the anomaly score is the negative log-likelihood.

    Parameters
    ----------
    n_components : int
        Number of mixture components.
    covariance_type : {"full", "diag"}
    reg : float
        Diagonal jitter, relative to the mean per-feature variance of the fit set.
    tol : float
        Stop when the average log-likelihood improves by less than this.
    max_iter : int
    random_state : int
        Seed for k-means++ initialization.
    """

    def __init__(self, n_components=1, covariance_type="full", reg=1e-6, tol=1e-6, max_iter=200, random_state=0):
        self.n_components = n_components
        self.covariance_type = covariance_type
        self.reg = reg
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    # -- internals --------------------------------------------------------
    def _cholesky(self, cov):
        if self.covariance_type == "diag":
            return np.diag(np.sqrt(np.diag(cov)))
        return cho_factor(cov, lower=True)[0] * np.tri(cov.shape[0])

    def _log_joint(self, X, weights, means, chols):
        return np.column_stack(
            [np.log(w) + _gaussian_log_density(X, m, c) for w, m, c in zip(weights, means, chols)]
        )

    def _m_step(self, X, resp):
        nk = resp.sum(axis=0)
        weights = nk / X.shape[0]
        means = (resp.T @ X) / np.maximum(nk, np.finfo(float).tiny)[:, None]
        covs = []
        for k in range(resp.shape[1]):
            diff = X - means[k]
            cov = (resp[:, k, None] * diff).T @ diff / max(nk[k], np.finfo(float).tiny)
            if self.covariance_type == "diag":
                cov = np.diag(np.diag(cov))
            cov = cov + self.jitter_ * np.eye(X.shape[1])
            covs.append(0.5 * (cov + cov.T))
        return weights, means, np.asarray(covs)

    def _init_params(self, X, rng):
        seeds = kmeans_plusplus(X, self.n_components, rng)
        d = cdist(X, X[seeds], "sqeuclidean")
        labels = np.argmin(d, axis=1)
        resp = np.zeros((X.shape[0], self.n_components))
        resp[np.arange(X.shape[0]), labels] = 1.0
        return self._m_step(X, resp)

    # -- estimator API ----------------------------------------------------
    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, dim = X.shape
        p = int(self.n_components)
        if p < 1:
            raise InlierModelError("n_components must be >= 1")
        if n < p:
            raise InlierModelError(f"need at least {p} points for {p} components, got {n}")
        if self.covariance_type not in ("full", "diag"):
            raise InlierModelError(f"unknown covariance_type {self.covariance_type!r}")
        rng = np.random.default_rng(self.random_state)
        scale = float(np.mean(np.var(X, axis=0)))
        self.jitter_ = self.reg * (scale if scale > 0 else 1.0)

        weights, means, covs = self._init_params(X, rng)
        history = []
        reseeded = False
        converged = False
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            chols = [self._cholesky(c) for c in covs]
            log_joint = self._log_joint(X, weights, means, chols)
            log_norm = logsumexp(log_joint, axis=1)
            avg_ll = float(log_norm.mean())
            if history and avg_ll - history[-1] < self.tol:
                history.append(avg_ll)
                converged = True
                break
            history.append(avg_ll)
            resp = np.exp(log_joint - log_norm[:, None])
            weights, means, covs = self._m_step(X, resp)
            collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
            if collapsed.size:
                if reseeded:
                    raise InlierModelError(f"mixture components {collapsed.tolist()} collapsed twice")
                reseeded = True
                logger.warning("re-seeding collapsed components %s", collapsed.tolist())
                data_cov = np.cov(X.T, bias=True).reshape(dim, dim) + self.jitter_ * np.eye(dim)
                for k in collapsed:
                    means[k] = X[int(rng.integers(n))]
                    covs[k] = data_cov
                weights = np.full(p, 1.0 / p)
                history = []
        self.weights_ = weights
        self.means_ = means
        self.covariances_ = covs
        self.chol_ = np.asarray([self._cholesky(c) for c in covs])
        self.log_likelihood_history_ = np.asarray(history)
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.reseeded_ = reseeded
        self.n_features_in_ = dim
        return self

    def log_likelihood(self, X) -> np.ndarray:
        check_is_fitted(self, "means_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InlierModelError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return logsumexp(self._log_joint(X, self.weights_, self.means_, self.chol_), axis=1)

    def anomaly_score(self, X) -> np.ndarray:
        return -self.log_likelihood(X)

    def score_samples(self, X):
        return self.log_likelihood(X)

    def predict_proba(self, X):
        check_is_fitted(self, "means_")
        lj = self._log_joint(check_array(X, dtype=np.float64), self.weights_, self.means_, self.chol_)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def arrays_(self) -> dict:
        return {"weights": self.weights_, "means": self.means_, "covariances": self.covariances_}

    def _restore(self, arrays: dict, extra: dict):
        self.weights_ = arrays["weights"]
        self.means_ = arrays["means"]
        self.covariances_ = arrays["covariances"]
        self.chol_ = np.asarray([self._cholesky(c) for c in self.covariances_])
        self.n_features_in_ = self.means_.shape[1]
        self.jitter_ = extra.get("jitter", 0.0)
        self.log_likelihood_history_ = np.asarray(extra.get("history", []))
        self.n_iter_ = extra.get("n_iter", 0)
        self.converged_ = extra.get("converged", True)
        self.reseeded_ = extra.get("reseeded", False)

    def _extra(self) -> dict:
        return {"jitter": self.jitter_, "history": self.log_likelihood_history_.tolist(), "n_iter": self.n_iter_,
                "converged": self.converged_, "reseeded": self.reseeded_}


class LOFScorer(OutlierMixin, BaseEstimator):
    """Local outlier factor of query points against a fixed reference set.

    Neighborhoods contain exactly ``n_neighbors`` points; equal distances are
    broken by reference index. A query is never part of the reference set,
    and reference points exclude themselves when their own k-distance and
    local reachability density are computed.
    """

    def __init__(self, n_neighbors=20):
        self.n_neighbors = n_neighbors

    @staticmethod
    def _knn(dist: np.ndarray, k: int) -> np.ndarray:
        return np.argsort(dist, axis=1, kind="stable")[:, :k]

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        k = int(self.n_neighbors)
        if k < 1:
            raise InlierModelError("n_neighbors must be >= 1")
        if X.shape[0] <= k:
            raise InlierModelError(f"need more than {k} reference points, got {X.shape[0]}")
        dist = cdist(X, X)
        np.fill_diagonal(dist, np.inf)
        nbrs = self._knn(dist, k)
        rows = np.arange(X.shape[0])[:, None]
        k_dist = dist[rows, nbrs][:, -1]
        reach = np.maximum(k_dist[nbrs], dist[rows, nbrs])
        self.reference_points_ = X
        self.neighbors_ = nbrs
        self.k_distance_ = k_dist
        self.lrd_ = 1.0 / (reach.mean(axis=1) + LRD_EPS)
        self.degenerate_ = bool(np.any(k_dist == 0))
        if self.degenerate_:
            warnings.warn("reference points with zero k-distance; reachability densities are epsilon-guarded",
                          RuntimeWarning)
        self.n_features_in_ = X.shape[1]
        return self

    def anomaly_score(self, X) -> np.ndarray:
        check_is_fitted(self, "lrd_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InlierModelError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        dist = cdist(X, self.reference_points_)
        nbrs = self._knn(dist, int(self.n_neighbors))
        rows = np.arange(X.shape[0])[:, None]
        reach = np.maximum(self.k_distance_[nbrs], dist[rows, nbrs])
        lrd_q = 1.0 / (reach.mean(axis=1) + LRD_EPS)
        return self.lrd_[nbrs].mean(axis=1) / lrd_q

    def score_samples(self, X):
        return -self.anomaly_score(X)

    def arrays_(self) -> dict:
        return {"reference_points": self.reference_points_}

    def _restore(self, arrays: dict, extra: dict):
        self.fit(arrays["reference_points"])

    def _extra(self) -> dict:
        return {"degenerate": self.degenerate_}


# ---------------------------------------------------------------------------
# Functional entry points


def gmm_fit(embeddings, p: int, seed: int = 0, **kwargs) -> GaussianMixtureScorer:
    return GaussianMixtureScorer(n_components=p, random_state=seed, **kwargs).fit(embeddings)


def gmm_score(model: GaussianMixtureScorer, e) -> np.ndarray | float:
    e = np.asarray(e, dtype=np.float64)
    out = model.anomaly_score(np.atleast_2d(e))
    return float(out[0]) if e.ndim == 1 else out


def lof_fit(embeddings, k: int) -> LOFScorer:
    return LOFScorer(n_neighbors=k).fit(embeddings)


def lof_score(model: LOFScorer, e) -> np.ndarray | float:
    e = np.asarray(e, dtype=np.float64)
    out = model.anomaly_score(np.atleast_2d(e))
    return float(out[0]) if e.ndim == 1 else out


def make_inlier(kind: str, param: int, seed: int = 0, covariance_type: str = "full"):
    if kind == "gmm":
        return GaussianMixtureScorer(n_components=param, covariance_type=covariance_type, random_state=seed)
    if kind == "lof":
        return LOFScorer(n_neighbors=param)
    raise InlierModelError(f"unknown inlier model {kind!r}")


# ---------------------------------------------------------------------------
# Persistence: float64 blob + JSON header


def save_inlier(model, path, fit_set=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = model.arrays_()
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    kind = "gmm" if isinstance(model, GaussianMixtureScorer) else "lof"
    header = {
        "type": kind,
        "params": model.get_params(),
        "p": model.n_components if kind == "gmm" else model.n_neighbors,
        "dims": int(model.n_features_in_),
        "fit_set_sha256": None if fit_set is None else hashlib.sha256(np.ascontiguousarray(fit_set, dtype="<f8").tobytes()).hexdigest(),
        "arrays": entries,
        "extra": model._extra(),
    }
    path.with_name(path.name + ".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path


def load_inlier(path):
    path = Path(path)
    header = json.loads(path.with_name(path.name + ".json").read_text())
    blob = path.read_bytes()
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=int))
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    cls = GaussianMixtureScorer if header["type"] == "gmm" else LOFScorer
    model = cls(**header["params"])
    model._restore(arrays, header["extra"])
    return model
