"""Streaming kernelized (linear) attention.

Past keys and values are folded into two running sums, ``S = sum phi(k) v^T``
and ``z = sum phi(k)``, so a query costs one matrix-vector product and the
state size never depends on how many tokens were absorbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _alloc
from .errors import EmptyContextError, ShapeError

# Floor for the normalizer; only reachable when r16 rounding flushes phi products.
DENOM_GUARD = 1e-9
_TINY = np.finfo(np.float64).tiny


def feature_map(x) -> np.ndarray:
    """elu(x) + 1, computed in float64 and floored at the smallest normal."""
    x = np.asarray(x, dtype=np.float64)
    phi = np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    return np.maximum(phi, _TINY)


@dataclass
class AttentionState:
    d_k: int
    d_v: int
    S: np.ndarray = field(default=None, repr=False)
    z: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.S is None:
            self.S = np.zeros((self.d_k, self.d_v), dtype=np.float64)
        if self.z is None:
            self.z = np.zeros(self.d_k, dtype=np.float64)
        if self.S.shape != (self.d_k, self.d_v) or self.z.shape != (self.d_k,):
            raise ShapeError("state buffers do not match (d_k, d_v)")

    @property
    def nbytes(self) -> int:
        return self.S.nbytes + self.z.nbytes

    def copy(self) -> "AttentionState":
        return AttentionState(self.d_k, self.d_v, self.S.copy(), self.z.copy(), self.t)


def attn_update(st: AttentionState, k, v) -> AttentionState:
    """Absorb one (key, value) pair into ``st`` in place and return it."""
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if k.size != st.d_k or v.size != st.d_v:
        raise ShapeError(f"expected k[{st.d_k}], v[{st.d_v}], got k[{k.size}], v[{v.size}]")
    fk = feature_map(k)
    outer = np.multiply.outer(fk, v)
    _alloc.note("attn_outer", outer.nbytes)
    st.S += outer
    st.z += fk
    st.t += 1
    return st


def attn_query(st: AttentionState, q) -> np.ndarray:
    if st.t < 1:
        raise EmptyContextError("attention state has no tokens yet")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != st.d_k:
        raise ShapeError(f"query has {q.size} dims, state expects {st.d_k}")
    fq = feature_map(q)
    num = fq @ st.S
    _alloc.note("attn_num", num.nbytes)
    den = max(float(fq @ st.z), DENOM_GUARD)
    return num / den


def attend_causal_batch(Q, K, V) -> np.ndarray:
    """Causal linear attention over a whole sequence.

    Row t of the result equals :func:`attn_query` after absorbing tokens
    0..t. No T x T score matrix is formed; the only temporaries are the
    per-token outer product and the output row.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("Q, K, V must be 2-D (T x d)")
    T = Q.shape[0]
    if K.shape[0] != T or V.shape[0] != T or Q.shape[1] != K.shape[1]:
        raise ShapeError(f"mismatched shapes Q{Q.shape} K{K.shape} V{V.shape}")
    st = AttentionState(K.shape[1], V.shape[1])
    out = np.empty((T, V.shape[1]), dtype=np.float64)
    for t in range(T):
        attn_update(st, K[t], V[t])
        out[t] = attn_query(st, Q[t])
    return out


class MultiHeadState:
    """Independent per-head states over a concatenated head layout."""

    def __init__(self, n_heads: int, d_head: int):
        self.n_heads = n_heads
        self.d_head = d_head
        self.heads = [AttentionState(d_head, d_head) for _ in range(n_heads)]

    @property
    def t(self) -> int:
        return self.heads[0].t

    def step(self, q, k, v) -> np.ndarray:
        h, d = self.n_heads, self.d_head
        q = np.asarray(q).reshape(h, d)
        k = np.asarray(k).reshape(h, d)
        v = np.asarray(v).reshape(h, d)
        out = np.empty((h, d), dtype=np.float64)
        for i, st in enumerate(self.heads):
            attn_update(st, k[i], v[i])
            out[i] = attn_query(st, q[i])
        return out.reshape(-1)
