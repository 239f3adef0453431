"""Block-diagonal factorizations for the sparse matrices T = M + C D C^T.

Every built-in penalty couples at most two dual coordinates, so T splits into
many tiny independent blocks.  The partition is computed once from the
sparsity pattern of ``|M| + |C||C|^T`` and reused every iteration.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import FactorizationError

PIVOT_RTOL = 1e-14


def as_csr(X, shape=None):
    if X is None:
        return sp.csr_matrix(shape)
    if sp.issparse(X):
        return X.tocsr()
    return sp.csr_matrix(np.asarray(X, dtype=float))


def to_dense(X) -> np.ndarray:
    if sp.issparse(X):
        return X.toarray()
    return np.asarray(X, dtype=float)


class BlockStructure:
    """Partition of ``range(n)`` into the connected components of a pattern.

    Blocks of equal size are grouped so they can be factorized as one
    batched ``(nblocks, k, k)`` array.
    """

    def __init__(self, pattern):
        pattern = as_csr(pattern)
        n = pattern.shape[0]
        self.size = n
        if n == 0:
            self.labels = np.zeros(0, dtype=int)
            self.groups = {}
            return
        ncomp, labels = connected_components(pattern, directed=False)
        sizes = np.bincount(labels, minlength=ncomp)
        order = np.argsort(labels, kind="stable")
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        pos = np.empty(n, dtype=int)
        pos[order] = np.arange(n) - np.repeat(starts, sizes)

        local = np.empty(ncomp, dtype=int)
        self.groups = {}
        for k in np.unique(sizes):
            blocks = np.flatnonzero(sizes == k)
            local[blocks] = np.arange(blocks.size)
            idx = order[starts[blocks][:, None] + np.arange(k)[None, :]]
            self.groups[int(k)] = idx
        self.labels = labels
        self._pos = pos
        self._block_size = sizes[labels]
        self._local = local[labels]

    @classmethod
    def for_penalty(cls, M, C):
        M = as_csr(M)
        C = as_csr(C)
        K = M.shape[0]
        absC = abs(C)
        pattern = abs(M) + absC @ absC.T + sp.identity(K, format="csr")
        return cls(pattern)

    @property
    def max_block(self) -> int:
        return max(self.groups, default=0)

    def gather(self, T) -> dict:
        """Scatter the entries of sparse ``T`` into dense per-group blocks."""
        T = sp.coo_matrix(T)
        if T.nnz and np.any(self.labels[T.row] != self.labels[T.col]):
            raise ValueError("matrix couples coordinates across blocks")
        out = {}
        ksize = self._block_size[T.row]
        for k, idx in self.groups.items():
            arr = np.zeros((idx.shape[0], k, k))
            mask = ksize == k
            rows, cols = T.row[mask], T.col[mask]
            np.add.at(arr, (self._local[rows], self._pos[rows], self._pos[cols]), T.data[mask])
            out[k] = arr
        return out

    def factor(self, T, rtol: float = PIVOT_RTOL) -> "BlockFactor":
        return BlockFactor(self, self.gather(T), rtol)

    def assembler(self, M, C) -> "CongruenceAssembler":
        return CongruenceAssembler(self, M, C)

    def min_eigenvalues(self, T) -> np.ndarray:
        """Smallest eigenvalue of every block (one entry per block)."""
        vals = []
        for k, arr in self.gather(T).items():
            if k == 1:
                vals.append(arr[:, 0, 0])
            else:
                vals.append(np.linalg.eigvalsh(arr)[:, 0])
        return np.concatenate(vals) if vals else np.zeros(0)


class CongruenceAssembler:
    """Builds the blocks of ``M + C diag(d) C^T`` for many ``d`` without sparse products.

    Every product ``C[i, l] C[j, l]`` lands in a fixed block position, so the
    scatter pattern is computed once.
    """

    def __init__(self, structure: BlockStructure, M, C):
        self.structure = structure
        self.base = structure.gather(as_csr(M))
        C = sp.csc_matrix(as_csr(C))
        self._plan = {}
        if C.shape[1] == 0 or C.nnz == 0:
            return
        ii, jj, ll, vv = [], [], [], []
        counts = np.diff(C.indptr)
        for cnt in np.unique(counts[counts > 0]):
            cols = np.flatnonzero(counts == cnt)
            at = C.indptr[cols][:, None] + np.arange(cnt)
            rows, vals = C.indices[at], C.data[at]
            ii.append(np.repeat(rows, cnt, axis=1).ravel())
            jj.append(np.tile(rows, (1, cnt)).ravel())
            vv.append((vals[:, :, None] * vals[:, None, :]).ravel())
            ll.append(np.repeat(cols, cnt * cnt))
        ii, jj, ll, vv = map(np.concatenate, (ii, jj, ll, vv))
        if np.any(structure.labels[ii] != structure.labels[jj]):
            raise ValueError("matrix couples coordinates across blocks")
        ksize = structure._block_size[ii]
        for k in structure.groups:
            mask = ksize == k
            flat = (structure._local[ii[mask]] * k + structure._pos[ii[mask]]) * k \
                + structure._pos[jj[mask]]
            self._plan[k] = (flat, ll[mask], vv[mask])

    def blocks(self, d) -> dict:
        out = {}
        for k, arr in self.base.items():
            if k in self._plan:
                flat, l, v = self._plan[k]
                arr = arr + np.bincount(flat, weights=v * d[l],
                                        minlength=arr.size).reshape(arr.shape)
            out[k] = arr
        return out

    def factor(self, d, rtol: float = PIVOT_RTOL) -> "BlockFactor":
        return BlockFactor(self.structure, self.blocks(d), rtol)


class BlockFactor:
    """Inverse of a symmetric positive definite block-diagonal matrix."""

    def __init__(self, structure: BlockStructure, blocks: dict, rtol: float):
        # Pivots are judged against their own block: blocks never interact, so
        # a tiny block next to a huge one is not a loss of accuracy.
        self.structure = structure
        tiny = np.finfo(float).tiny
        self.inverses = {}
        for k, arr in blocks.items():
            scale = np.max(np.abs(np.diagonal(arr, axis1=1, axis2=2)), axis=1)
            floor = rtol * np.maximum(scale, tiny)
            if k == 1:
                piv = arr[:, 0, 0]
                if np.any(~(piv > floor)) or np.any(~np.isfinite(piv)):
                    raise FactorizationError(
                        f"pivot {piv.min():.3e} below tolerance in block-diagonal factor"
                    )
                self.inverses[k] = 1.0 / piv
                continue
            try:
                chol = np.linalg.cholesky(arr)
            except np.linalg.LinAlgError as exc:
                raise FactorizationError(f"block of size {k} is not positive definite") from exc
            piv = np.diagonal(chol, axis1=1, axis2=2) ** 2
            if np.any(~(piv > floor[:, None])):
                raise FactorizationError(
                    f"pivot {piv.min():.3e} below tolerance in block-diagonal factor"
                )
            self.inverses[k] = np.linalg.inv(arr)

    def solve(self, X) -> np.ndarray:
        """Return ``T^{-1} X`` for a dense vector or matrix ``X``."""
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        for k, idx in self.structure.groups.items():
            inv = self.inverses[k]
            if k == 1:
                rows = idx[:, 0]
                out[rows] = X[rows] * (inv[:, None] if X.ndim == 2 else inv)
            else:
                out[idx] = np.einsum("bij,bj...->bi...", inv, X[idx])
        return out

    def as_sparse(self) -> sp.csr_matrix:
        n = self.structure.size
        rows, cols, vals = [], [], []
        for k, idx in self.structure.groups.items():
            inv = self.inverses[k]
            if k == 1:
                rows.append(idx[:, 0])
                cols.append(idx[:, 0])
                vals.append(inv)
            else:
                rows.append(np.repeat(idx, k, axis=1).ravel())
                cols.append(np.tile(idx, (1, k)).ravel())
                vals.append(inv.ravel())
        if not rows:
            return sp.csr_matrix((n, n))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
