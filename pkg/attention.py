"""Density-reweighted self-attention.

Scores toward key ``j`` are shifted by ``ln d_j`` before the softmax, which for
integer densities equals attending over ``d_j`` copies of token ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Final, Optional

import torch
import torch.nn.functional as F

MAX_ORACLE_DENSITY: Final = 16
MAX_ORACLE_TOKENS: Final = 256


def _as_tensor(value: Any, dtype: Optional[torch.dtype]) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value if dtype is None else value.to(dtype)
    return torch.as_tensor(value, dtype=dtype or torch.float64)


@dataclass
class AttentionBatch:
    """Queries, keys and values of shape ``(..., N, dim)`` with per-token ``ln d``."""

    queries: torch.Tensor
    keys: torch.Tensor
    values: torch.Tensor
    log_density: torch.Tensor

    def __post_init__(self) -> None:
        q, k, v, log_d = self.queries, self.keys, self.values, self.log_density
        if q.ndim < 2 or q.shape != k.shape:
            raise ValueError(f"queries {tuple(q.shape)} and keys {tuple(k.shape)} must match with shape (..., N, dim)")
        if v.shape[:-1] != q.shape[:-1]:
            raise ValueError(f"values {tuple(v.shape)} must have the same tokens as queries {tuple(q.shape)}")
        if log_d.shape[-1] != q.shape[-2]:
            raise ValueError(f"log_density has {log_d.shape[-1]} tokens, queries have {q.shape[-2]}")
        if q.shape[-2] < 1:
            raise ValueError("attention needs at least one token")
        for name, tensor in (("queries", q), ("keys", k), ("values", v), ("log_density", log_d)):
            if not torch.isfinite(tensor).all():
                raise ValueError(f"{name} must be finite")

    @classmethod
    def from_arrays(
        cls,
        queries: Any,
        keys: Any,
        values: Any,
        log_density: Any,
        dtype: Optional[torch.dtype] = None,
    ) -> AttentionBatch:
        return cls(*(_as_tensor(item, dtype) for item in (queries, keys, values, log_density)))

    @classmethod
    def from_densities(
        cls,
        queries: Any,
        keys: Any,
        values: Any,
        densities: Any,
        dtype: Optional[torch.dtype] = None,
    ) -> AttentionBatch:
        d = _as_tensor(densities, dtype)
        if not torch.isfinite(d).all() or (d <= 0).any():
            raise ValueError("densities must be finite and strictly positive")
        return cls.from_arrays(queries, keys, values, torch.log(d), dtype)

    @property
    def num_tokens(self) -> int:
        return int(self.queries.shape[-2])


def _score_bias(log_density: torch.Tensor) -> torch.Tensor:
    return log_density.unsqueeze(-2)


def attention_weights(batch: AttentionBatch) -> torch.Tensor:
    """Reweighted attention weights ``w'`` with shape ``(..., N, N)``."""
    scale = 1.0 / math.sqrt(batch.queries.shape[-1])
    scores = batch.queries @ batch.keys.transpose(-2, -1) * scale
    return torch.softmax(scores + _score_bias(batch.log_density), dim=-1)


def _sdpa(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    mask: Optional[torch.Tensor],
) -> torch.Tensor:
    if queries.ndim == 4:
        return F.scaled_dot_product_attention(queries, keys, values, attn_mask=mask)
    lead = queries.shape[:-2]
    tokens = queries.shape[-2]
    q = queries.reshape(-1, 1, tokens, queries.shape[-1])
    k = keys.reshape(-1, 1, tokens, keys.shape[-1])
    v = values.reshape(-1, 1, tokens, values.shape[-1])
    if mask is not None:
        mask = mask.expand(*lead, 1, tokens).reshape(-1, 1, 1, tokens)
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    return out.reshape(*lead, tokens, values.shape[-1])


def shifted_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    log_density: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scaled dot-product attention with the ``ln d_j`` shift added to every score row.

    ``log_density`` broadcasts against ``(..., N)``; heads share one shift.
    """
    mask = None if log_density is None else _score_bias(log_density).to(queries.dtype)
    return _sdpa(queries, keys, values, mask)


def reweighted_attention(batch: AttentionBatch) -> torch.Tensor:
    return shifted_attention(batch.queries, batch.keys, batch.values, batch.log_density)


def standard_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    return _sdpa(queries, keys, values, None)


def duplication_oracle(batch: AttentionBatch) -> torch.Tensor:
    """Attention over physically duplicated tokens, read at each token's first copy.

    Only defined for a single sequence of shape ``(N, dim)`` with integer
    densities.
    """
    if batch.queries.ndim != 2:
        raise ValueError("duplication_oracle works on a single (N, dim) sequence")
    densities = torch.exp(batch.log_density)
    counts = torch.round(densities)
    if not torch.allclose(densities, counts, rtol=0.0, atol=1e-9):
        raise ValueError("duplication_oracle requires integer densities")
    counts = counts.to(torch.long)
    if (counts < 1).any() or (counts > MAX_ORACLE_DENSITY).any():
        raise ValueError(f"densities must be integers in [1, {MAX_ORACLE_DENSITY}]")
    total = int(counts.sum())
    if total > MAX_ORACLE_TOKENS:
        raise ValueError(f"duplicated sequence has {total} tokens, limit is {MAX_ORACLE_TOKENS}")

    q = torch.repeat_interleave(batch.queries, counts, dim=0)
    k = torch.repeat_interleave(batch.keys, counts, dim=0)
    v = torch.repeat_interleave(batch.values, counts, dim=0)
    expanded = standard_attention(q, k, v)
    first_copy = torch.cumsum(counts, dim=0) - counts
    return expanded[first_copy]
