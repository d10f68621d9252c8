"""
Input reduction: normalization, elimination of constant and linearly dependent columns
through the correlation matrix, then projection onto a principal component basis.

Standard deviations use the population (1/N) convention so that the correlation matrix
of normalized data has an exactly unit diagonal.
"""
import json
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np
from scipy.linalg import eigh
from sklearn.preprocessing import StandardScaler

from osfp.encoder import FeatureVector
from osfp.exceptions import DatasetError, SchemaMismatchError


logger = logging.getLogger(__name__)

PIPELINE_VERSION = 1
RETENTION_SLACK = 1e-12
DIAGONAL_TOLERANCE = 1e-6


def _as_matrix(data):
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"data must be a 2-D matrix, got shape {X.shape}")
    return X


def normalize_fit(data):
    """
    Column means and population standard deviations from a fitted StandardScaler.

    Returns:
        (mu, sigma); constant columns have sigma exactly 0
    """
    X = _as_matrix(data)
    if X.shape[0] == 0:
        raise ValueError("data is empty")
    if X.shape[0] < 2:
        raise ValueError("normalize_fit needs at least 2 rows")
    scaler = StandardScaler().fit(X)
    mu = scaler.mean_.copy()
    sigma = np.sqrt(scaler.var_)
    sigma[sigma <= 1e-12 * np.maximum(1.0, np.abs(mu))] = 0.0
    return mu, sigma


def _scaler(mu, sigma):
    scaler = StandardScaler()
    scaler.mean_ = np.asarray(mu, dtype=np.float64)
    scaler.var_ = np.asarray(sigma, dtype=np.float64) ** 2
    scaler.scale_ = np.where(scaler.var_ > 0, np.asarray(sigma, dtype=np.float64), 1.0)
    scaler.n_features_in_ = len(scaler.mean_)
    scaler.n_samples_seen_ = 0
    return scaler


def normalize_apply(data, mu, sigma):
    """(x - mu) / sigma per column; constant columns map to 0."""
    X = _as_matrix(data)
    if X.shape[1] != len(mu):
        raise ValueError(f"expected {len(mu)} columns, got {X.shape[1]}")
    Z = _scaler(mu, sigma).transform(X)
    Z[:, np.asarray(sigma) == 0] = 0.0
    return Z


def correlation_matrix(data):
    """
    R = E[X_i X_j] for normalized columns. All-zero columns (constants after
    normalization) are allowed and get a zero row and column.
    """
    Z = _as_matrix(data)
    if Z.shape[0] == 0:
        raise ValueError("data is empty")
    R = Z.T @ Z / Z.shape[0]
    diag = np.diag(R).copy()
    live = np.any(Z != 0, axis=0)
    if np.any(np.abs(diag[live] - 1.0) > DIAGONAL_TOLERANCE):
        worst = int(np.flatnonzero(live)[np.argmax(np.abs(diag[live] - 1.0))])
        raise ValueError(f"data is not normalized: column {worst} has E[x^2] = {diag[worst]:.6g}")
    R = np.clip((R + R.T) / 2.0, -1.0, 1.0)
    idx = np.flatnonzero(live)
    R[idx, idx] = 1.0
    return R


def eliminate_dependent(R, sigma, threshold=0.999):
    """
    Drop constant columns, then keep the lowest-index column of every group whose
    pairwise |correlation| reaches ``threshold``.

    Returns:
        list of kept column indices, increasing
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"dependence threshold must be in (0, 1], got {threshold}")
    R = np.asarray(R, dtype=np.float64)
    kept = []
    for j in range(R.shape[0]):
        if sigma[j] == 0:
            continue
        if kept and np.any(np.abs(R[kept, j]) >= threshold):
            continue
        kept.append(j)
    return kept


class PcaFit(NamedTuple):
    basis: np.ndarray
    explained_variance_ratio: float
    eigenvalues: np.ndarray


def _order_and_orient(values, vectors):
    dominant = np.argmax(np.abs(vectors), axis=0)
    order = sorted(range(len(values)), key=lambda i: (-values[i], dominant[i]))
    values = values[order]
    vectors = vectors[:, order].copy()
    for i in range(vectors.shape[1]):
        j = np.argmax(np.abs(vectors[:, i]))
        if vectors[j, i] < 0:
            vectors[:, i] = -vectors[:, i]
    return values, vectors


def pca_fit(data, retention=0.98):
    """
    Principal components of the covariance of ``data``.

    Args:
        data: reduced, normalized matrix (rows are samples)
        retention: fraction of total variance the basis must keep, in (0, 1]
    Returns:
        PcaFit with the basis (columns ordered by descending eigenvalue, largest-magnitude
        coordinate positive), the retained variance share and all eigenvalues
    """
    if not 0.0 < retention <= 1.0:
        raise ValueError(f"retention must be in (0, 1], got {retention}")
    Z = _as_matrix(data)
    n, m = Z.shape
    if m == 0:
        raise ValueError("no columns to decompose")
    if n < m:
        logger.warning(f"PCA on {n} rows and {m} columns; covariance is rank deficient")
    Zc = Z - Z.mean(axis=0)
    C = Zc.T @ Zc / n
    values, vectors = eigh(C)
    values = np.clip(values, 0.0, None)
    values, vectors = _order_and_orient(values, vectors)
    cumulative = np.cumsum(values)
    if cumulative[-1] <= 0:
        raise ValueError("data has zero total variance")
    share = cumulative / cumulative[-1]
    k = min(int(np.searchsorted(share, retention - RETENTION_SLACK)) + 1, m)
    return PcaFit(vectors[:, :k], float(share[k - 1]), values)


def jacobi_eigh(A, tol=1e-15, max_sweeps=100):
    """
    Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns:
        (eigenvalues ascending, eigenvectors as columns)
    """
    A = np.array(A, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p, row_q = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                vec_p, vec_q = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vec_p - s * vec_q
                V[:, q] = s * vec_p + c * vec_q
    values = np.diag(A).copy()
    order = np.argsort(values, kind="stable")
    return values[order], V[:, order]


@dataclass(frozen=True)
class ReductionPipeline:
    mu: np.ndarray
    sigma: np.ndarray
    kept_columns: Tuple[int, ...]
    basis: np.ndarray
    explained_variance_ratio: float
    schema_hash: str
    retention: float = 0.98
    dependence_threshold: float = 0.999

    @property
    def n_original(self):
        return len(self.mu)

    @property
    def n_kept(self):
        return len(self.kept_columns)

    @property
    def k(self):
        return self.basis.shape[1]

    def dimensions(self):
        return f"{self.n_original} → {self.n_kept} → {self.k}"

    def transform_many(self, X):
        X = _as_matrix(X)
        if X.shape[1] != self.n_original:
            raise ValueError(f"expected {self.n_original} columns, got {X.shape[1]}")
        return normalize_apply(X, self.mu, self.sigma)[:, list(self.kept_columns)] @ self.basis

    def to_dict(self):
        return {
            "version": PIPELINE_VERSION,
            "schema_hash": self.schema_hash,
            "retention": self.retention,
            "dependence_threshold": self.dependence_threshold,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "kept_columns": list(self.kept_columns),
            "basis": self.basis.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != PIPELINE_VERSION:
            raise DatasetError(f"unsupported pipeline version {d.get('version')}")
        basis = np.asarray(d["basis"], dtype=np.float64).reshape(len(d["kept_columns"]), -1)
        return cls(
            np.asarray(d["mu"], dtype=np.float64),
            np.asarray(d["sigma"], dtype=np.float64),
            tuple(int(i) for i in d["kept_columns"]),
            basis,
            float(d["explained_variance_ratio"]),
            d["schema_hash"],
            float(d["retention"]),
            float(d["dependence_threshold"]),
        )


def transform(pipeline, v):
    """Project one FeatureVector (or raw array) onto the pipeline's basis."""
    if isinstance(v, FeatureVector):
        if v.schema_hash != pipeline.schema_hash:
            raise SchemaMismatchError(pipeline.schema_hash, v.schema_hash, "feature vector")
        v = v.values
    return pipeline.transform_many(np.asarray(v, dtype=np.float64)[None, :])[0]


def fit_pipeline(X, schema_hash, retention=0.98, dependence_threshold=0.999, name=""):
    """
    Normalize, eliminate dependent columns and fit PCA on one training subset.

    Raises:
        DatasetError: when no column survives elimination
    """
    X = _as_matrix(X)
    mu, sigma = normalize_fit(X)
    Z = normalize_apply(X, mu, sigma)
    R = correlation_matrix(Z)
    kept = eliminate_dependent(R, sigma, dependence_threshold)
    if not kept:
        raise DatasetError(f"{name or 'pipeline'}: every column is constant on the training data")
    pca = pca_fit(Z[:, kept], retention)
    pipeline = ReductionPipeline(
        mu, sigma, tuple(kept), pca.basis, pca.explained_variance_ratio, schema_hash,
        float(retention), float(dependence_threshold),
    )
    logger.info(f"{name or 'pipeline'} dimensions {pipeline.dimensions()} (variance kept {pipeline.explained_variance_ratio:.4f})")
    return pipeline


def save_pipeline(pipeline, fn):
    with open(fn, "w") as fid:
        json.dump(pipeline.to_dict(), fid)


def load_pipeline(fn):
    with open(fn) as fid:
        return ReductionPipeline.from_dict(json.load(fid))
