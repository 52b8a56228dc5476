"""Rain-streak memory: M unit-norm prototype items addressed by cosine similarity.

``read`` is differentiable (softmax over items, weighted average of items).
``update`` is a state transition without gradients: softmax over queries,
add the weighted query sum to each item, renormalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

EPS = 1e-12


@dataclass
class MemoryBank:
    items: np.ndarray  # (M, C), unit rows

    def __post_init__(self):
        if self.items.ndim != 2:
            raise DimensionError("memory items must be an (M, C) array")

    @property
    def M(self) -> int:
        return self.items.shape[0]

    @property
    def C(self) -> int:
        return self.items.shape[1]

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.items.copy())

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.items, axis=1)


@dataclass
class ReadResult:
    alpha: Tensor  # (K, M), rows sum to 1
    retrieved: Tensor  # (K, C)


def init_memory(M: int, C: int, seed: int, dtype=np.float64) -> MemoryBank:
    if M < 1 or C < 1:
        raise ContractError(f"memory needs M >= 1 and C >= 1, got M={M}, C={C}")
    rng = np.random.default_rng(seed)
    items = rng.uniform(-1.0, 1.0, size=(M, C))
    # a draw of exactly zero is measure-zero but would break normalization
    items[np.linalg.norm(items, axis=1) == 0, 0] = 1.0
    items /= np.linalg.norm(items, axis=1, keepdims=True)
    return MemoryBank(items.astype(dtype))


def cosine_similarity(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"cosine_similarity: {p.shape} vs {q.shape}")
    return float(p @ q / (np.linalg.norm(p) * np.linalg.norm(q) + EPS))


def similarity_matrix(queries: Tensor, items: Tensor) -> Tensor:
    """(K, M) matrix of cosine similarities d(p_m, q^k)."""
    if queries.ndim != 2 or items.ndim != 2:
        raise DimensionError("queries and items must be 2-D")
    if queries.shape[1] != items.shape[1]:
        raise DimensionError(f"query dim {queries.shape[1]} != item dim {items.shape[1]}")
    dots = ad.matmul(queries, ad.transpose(items, (1, 0)))
    qn = ad.vector_norm(queries, axis=1)  # (K, 1)
    pn = ad.reshape(ad.vector_norm(items, axis=1), (1, -1))  # (1, M)
    return dots / (qn * pn + EPS)


def read(memory: MemoryBank | Tensor, queries: Tensor) -> ReadResult:
    """Address the memory with K queries of dimension C.

    ``memory`` may be a bank (items treated as constants) or a Tensor of items
    when gradients w.r.t. the items are wanted.
    """
    items = memory if isinstance(memory, Tensor) else Tensor(memory.items)
    queries = ad.as_tensor(queries)
    if queries.ndim != 2 or queries.shape[0] < 1:
        raise ContractError("read needs at least one query")
    alpha = ad.softmax(similarity_matrix(queries, items), axis=1)
    return ReadResult(alpha=alpha, retrieved=ad.matmul(alpha, items))


def update_weights(memory: MemoryBank, queries: np.ndarray) -> np.ndarray:
    """(K, M) weights with the softmax taken over queries (column-stochastic)."""
    with ad.no_grad():
        sims = similarity_matrix(Tensor(queries), Tensor(memory.items)).data
    z = sims - sims.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def update(memory: MemoryBank, queries) -> MemoryBank:
    """Return a new bank with p_m <- normalize(p_m + sum_k beta^{k,m} q^k)."""
    q = queries.data if isinstance(queries, Tensor) else np.asarray(queries)
    if q.ndim != 2 or q.shape[0] < 1:
        raise ContractError("update needs at least one query")
    if q.shape[1] != memory.C:
        raise DimensionError(f"query dim {q.shape[1]} != memory dim {memory.C}")
    beta = update_weights(memory, q)
    new = memory.items + beta.T @ q
    norm = np.linalg.norm(new, axis=1, keepdims=True)
    # an item cancelled exactly by its update keeps its previous direction
    new = np.where(norm > 0, new / np.where(norm > 0, norm, 1.0), memory.items)
    return MemoryBank(new.astype(memory.items.dtype))


def query_rows(query_map: Tensor) -> Tensor:
    """(N, C, H, W) -> (N*H*W, C), rows ordered by image, then row-major position."""
    n, c, h, w = query_map.shape
    return ad.reshape(ad.transpose(query_map, (0, 2, 3, 1)), (n * h * w, c))


def rows_to_map(rows: Tensor, shape: tuple) -> Tensor:
    n, c, h, w = shape
    return ad.transpose(ad.reshape(rows, (n, h, w, c)), (0, 3, 1, 2))


def read_map(memory: MemoryBank, query_map: Tensor) -> tuple[Tensor, Tensor]:
    """Read for every spatial query of an NCHW map; returns (retrieved map, alpha (N*H*W, M))."""
    res = read(memory, query_rows(query_map))
    return rows_to_map(res.retrieved, query_map.shape), res.alpha
