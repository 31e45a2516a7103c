"""Embedding post-processing: normalization, cosine neighbors, 2-D projection, TSV export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, DataError


class ZeroRowWarning(UserWarning):
    """Rows with zero norm cannot be normalized and were left as zeros."""


def normalize_rows(E: np.ndarray) -> np.ndarray:
    """Scale every nonzero row to unit L2 norm; zero rows stay zero (with a warning)."""
    E = np.asarray(E, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero row(s) left unnormalized", ZeroRowWarning, stacklevel=2)
    return E / np.where(norms == 0, 1.0, norms)


def cosine_matrix(E: np.ndarray, queries: Sequence[int]) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroRowWarning)
        U = normalize_rows(E)
    return U[np.asarray(queries)] @ U.T


def nearest_neighbors(E: np.ndarray, query_id: int, k: int, ids: Optional[Sequence[int]] = None
                      ) -> List[Tuple[int, float]]:
    """Top-``k`` rows by cosine similarity to ``query_id``, excluding the query.

    ``ids`` labels the rows (defaults to row positions); ties go to the smaller id.
    """
    E = np.asarray(E)
    n = E.shape[0]
    labels = np.arange(n) if ids is None else np.asarray(ids)
    if len(labels) != n:
        raise ContractError(f"{len(labels)} ids for {n} rows")
    hit = np.flatnonzero(labels == query_id)
    if len(hit) != 1:
        raise ContractError(f"unknown query id {query_id}")
    if not 0 < k < n:
        raise ContractError(f"k must satisfy 0 < k < {n}, got {k}")
    q = int(hit[0])
    sims = cosine_matrix(E, [q])[0]
    others = np.delete(np.arange(n), q)
    order = np.lexsort((labels[others], -sims[others]))[:k]
    return [(int(labels[others[i]]), float(sims[others[i]])) for i in order]


def pca_2d(E: np.ndarray, iters: int = 5000, tol: float = 1e-12, seed: int = 0) -> np.ndarray:
    """Project mean-centered rows onto the top two principal directions.

    Directions come from orthogonal iteration on the covariance matrix; each
    is signed so that its largest-magnitude component is positive.
    """
    X = np.asarray(E, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("pca_2d needs a matrix with at least 2 rows")
    if X.shape[1] < 2:
        raise ContractError(f"pca_2d needs at least 2 columns, got {X.shape[1]}")
    X = X - X.mean(axis=0)
    C = X.T @ X
    V = principal_directions(C, 2, iters, tol, seed)
    return X @ V


def principal_directions(C: np.ndarray, r: int, iters: int = 5000, tol: float = 1e-12, seed: int = 0) -> np.ndarray:
    """Leading ``r`` eigenvectors of a symmetric PSD matrix by orthogonal iteration."""
    d = C.shape[0]
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, r)))
    for _ in range(iters):
        Z, R = np.linalg.qr(C @ Q)
        # QR sign ambiguity would otherwise make the iterate flip between steps
        Z = Z * np.where(np.diag(R) < 0, -1.0, 1.0)
        done = np.abs(Z - Q).max() < tol
        Q = Z
        if done:
            break
    # Rayleigh-Ritz on the converged subspace orders the two directions
    w, S = np.linalg.eigh(Q.T @ C @ Q)
    Q = Q @ S[:, ::-1]
    for j in range(r):
        col = Q[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            Q[:, j] = -col
    return Q


def explained_variance(E: np.ndarray, coords: np.ndarray) -> np.ndarray:
    X = np.asarray(E, dtype=np.float64)
    return (coords ** 2).sum(axis=0) / (X.shape[0] - 1)


@dataclass
class EmbeddingExport:
    """Rows of one embedding table (pad row removed) keyed by external ids."""

    kind: str
    keys: List[str]
    matrix: np.ndarray
    metadata: Dict[str, List[str]] = field(default_factory=dict)
    missing_metadata: int = 0

    def __post_init__(self):
        if self.kind not in ("user", "content"):
            raise ConfigError(f"kind must be 'user' or 'content', got {self.kind!r}")
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.keys):
            raise ContractError(f"{len(self.keys)} keys for a matrix of shape {self.matrix.shape}")
        for col, vals in self.metadata.items():
            if len(vals) != len(self.keys):
                raise ContractError(f"metadata column {col!r} has {len(vals)} values for {len(self.keys)} rows")


def export_from_table(table: np.ndarray, key_list: Sequence[Optional[str]], kind: str) -> EmbeddingExport:
    """Drop the padding row 0 and attach the external keys."""
    table = np.asarray(table)
    if table.shape[0] != len(key_list):
        raise ContractError(f"table has {table.shape[0]} rows but vocabulary has {len(key_list)} entries")
    return EmbeddingExport(kind, [str(k) for k in key_list[1:]], table[1:].copy())


def join_metadata(exp: EmbeddingExport, path, key_column: Optional[str] = None) -> EmbeddingExport:
    """Attach columns from a TSV side file keyed by entity key; unmatched rows get blanks."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty metadata file") from None
        key_col = header.index(key_column) if key_column else 0
        table = {row[key_col]: row for row in reader if row}
    cols = [c for i, c in enumerate(header) if i != key_col]
    meta = {c: [] for c in cols}
    missing = 0
    for key in exp.keys:
        row = table.get(key)
        if row is None:
            missing += 1
        for i, c in enumerate(header):
            if i != key_col:
                meta[c].append(row[i] if row is not None and i < len(row) else "")
    return EmbeddingExport(exp.kind, exp.keys, exp.matrix, {**exp.metadata, **meta}, missing)


def write_export(exp: EmbeddingExport, path, coords: Optional[np.ndarray] = None) -> None:
    """TSV with ``id, key, metadata..., values``; ``coords`` replaces the raw vectors."""
    values = exp.matrix if coords is None else np.asarray(coords)
    prefix = "x" if coords is None else "pc"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "key", *exp.metadata, *(f"{prefix}{j}" for j in range(values.shape[1]))])
        for i, key in enumerate(exp.keys):
            # repr of the float64 value of a float32 is exact, so reload is lossless
            w.writerow([i + 1, key, *(exp.metadata[c][i] for c in exp.metadata),
                        *(repr(float(v)) for v in values[i])])


def read_export(path, kind: str = "content", dtype=np.float32) -> EmbeddingExport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        raise DataError(f"{path}: missing header")
    header = rows[0]
    vcols = [i for i, c in enumerate(header) if i >= 2 and (c.startswith("x") or c.startswith("pc"))
             and c.lstrip("xpc").isdigit()]
    mcols = [i for i in range(2, len(header)) if i not in vcols]
    keys = [r[1] for r in rows[1:]]
    mat = np.array([[float(r[i]) for i in vcols] for r in rows[1:]], dtype=dtype).reshape(len(keys), len(vcols))
    meta = {header[i]: [r[i] for r in rows[1:]] for i in mcols}
    return EmbeddingExport(kind, keys, mat, meta)
