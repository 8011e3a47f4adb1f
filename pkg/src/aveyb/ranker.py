"""Split partitioning, MaxSim top-k retrieval and the neural compressor.

Selection (which splits to retrieve) is a discrete decision made on plain
arrays.  The weights applied to the retrieved splits are recomputed on the
tape so gradients flow into the embeddings through both the retrieved
content and its relevance weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .numerics import EPS_NORM, ConfigurationError, Matrix

# scores are clamped here before max-normalisation so weights stay in (0, 1]
SCORE_FLOOR = 1e-12
# below any cosine; marks candidate pad rows inside the max
_NO_MATCH = -2.0


@dataclass(frozen=True)
class SplitPlan:
    seq_len: int
    split_size: int
    num_splits: int
    pad_len: int

    def token_mask(self) -> np.ndarray:
        """``(num_splits, S)`` boolean mask of real (non-pad) positions."""
        flat = np.arange(self.num_splits * self.split_size) < self.seq_len
        return flat.reshape(self.num_splits, self.split_size)


@dataclass
class RankedBlock:
    target_index: int
    retrieved_indices: tuple[int, ...]
    maxsim_scores: tuple[float, ...]
    normalized_weights: tuple[float, ...]
    block: Matrix | None = None
    compressed: Matrix | None = None


def plan_splits(seq_len: int, split_size: int) -> SplitPlan:
    if seq_len < 1 or split_size < 1:
        raise ConfigurationError(f"need N >= 1 and S >= 1, got N={seq_len}, S={split_size}")
    n = -(-seq_len // split_size)
    return SplitPlan(seq_len, split_size, n, n * split_size - seq_len)


def partition(embeddings: Matrix, split_size: int) -> tuple[SplitPlan, Matrix]:
    """Cut ``(..., N, d)`` into ``(..., num_splits, S, d)``, zero-padding the tail."""
    x = nx.as_matrix(embeddings)
    plan = plan_splits(x.rows, split_size)
    if plan.pad_len:
        pad = np.zeros(x.shape[:-2] + (plan.pad_len, x.cols), dtype=x.dtype)
        x = nx.concat([x, Matrix(pad)], axis=-2)
    return plan, x.reshape(x.shape[:-2] + (plan.num_splits, split_size, x.cols))


def unpartition(splits: Matrix, plan: SplitPlan) -> Matrix:
    """Inverse of :func:`partition`: concatenate splits and drop pad rows."""
    lead = splits.shape[:-3]
    flat = splits.reshape(lead + (plan.num_splits * plan.split_size, splits.cols))
    if plan.pad_len:
        flat = flat[(Ellipsis, slice(0, plan.seq_len), slice(None))]
    return flat


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    ok = norm >= EPS_NORM
    return np.where(ok, x / np.where(ok, norm, 1.0), 0.0), ok[..., 0]


def maxsim(query_split, candidate_split) -> float:
    """Sum over query tokens of the best cosine against any candidate token.

    All-zero rows are padding: they add nothing on the query side and are
    never the best match on the candidate side.
    """
    q = np.asarray(getattr(query_split, "data", query_split), dtype=np.float64)
    c = np.asarray(getattr(candidate_split, "data", candidate_split), dtype=np.float64)
    if q.shape[-1] != c.shape[-1]:
        raise ConfigurationError(f"embedding widths differ: {q.shape} vs {c.shape}")
    qn, qok = _unit_rows(q)
    cn, cok = _unit_rows(c)
    if not cok.any():
        return 0.0
    cos = qn @ cn[cok].T
    return float(np.sum(np.where(qok, cos.max(axis=-1), 0.0)))


def maxsim_matrix(splits: np.ndarray, causal: bool = False) -> np.ndarray:
    """All-pairs scores ``[target, candidate]`` for one sequence of splits ``(n, S, d)``.

    With ``causal`` only candidates preceding each target are scored (others are 0).
    """
    splits = np.asarray(splits, dtype=np.float64)
    n, S, d = splits.shape
    unit, ok = _unit_rows(splits)
    flat = unit.reshape(n * S, d)
    cand_ok = ok.reshape(1, n, S)
    scores = np.zeros((n, n))
    for t in range(n):
        stop = t if causal else n
        if stop == 0:
            continue
        cos = (unit[t] @ flat[: stop * S].T).reshape(S, stop, S)
        best = np.where(cand_ok[:, :stop], cos, _NO_MATCH).max(axis=-1)
        best = np.where(best == _NO_MATCH, 0.0, best)
        scores[t, :stop] = np.sum(np.where(ok[t][:, None], best, 0.0), axis=0)
    return scores


def candidates(target: int, num_splits: int, mode: str) -> list[int]:
    if mode == "unidirectional":
        return list(range(target))
    if mode == "bidirectional":
        return [c for c in range(num_splits) if c != target]
    if mode == "off":
        return []
    raise ConfigurationError(f"unknown ranker mode {mode!r}")


def select_topk(target: int, scores: Sequence[float], k: int, mode: str = "unidirectional") -> RankedBlock:
    """Top-``k`` candidates of ``target`` by score, ties to the lower split index.

    ``scores`` holds one entry per split of the sequence (the target's own
    entry is ignored).  Retained scores are divided by the largest retained one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pool = candidates(target, len(scores), mode)
    chosen = sorted(pool, key=lambda c: (-scores[c], c))[:k]
    kept = [float(scores[c]) for c in chosen]
    if chosen:
        top = max(max(kept), SCORE_FLOOR)
        weights = tuple(max(s, SCORE_FLOOR) / top for s in kept)
    else:
        weights = ()
    return RankedBlock(target, tuple(chosen), tuple(kept), weights)


def slot_layout(ranked: RankedBlock, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Slot order for a block: ascending split index, empty slots (-1) at the front."""
    pairs = sorted(zip(ranked.retrieved_indices, ranked.normalized_weights))
    idx = np.full(k, -1, dtype=np.int64)
    w = np.zeros(k)
    for j, (i, wt) in enumerate(pairs):
        idx[k - len(pairs) + j] = i
        w[k - len(pairs) + j] = wt
    return idx, w


def assemble_block(plan: SplitPlan, splits: Matrix, ranked: RankedBlock, k: int) -> Matrix:
    """``(k+1)S x d`` block: weighted retrieved splits, then the current split."""
    splits = nx.as_matrix(splits)
    current = splits[ranked.target_index]
    if k == 0:
        return current
    idx, w = slot_layout(ranked, k)
    zero = Matrix(np.zeros((plan.split_size, splits.cols), dtype=splits.dtype))
    parts = []
    for i, wt in zip(idx, w):
        parts.append(zero if i < 0 else splits[int(i)] * float(wt))
    return nx.concat(parts + [current], axis=-2)


def compress(block: Matrix, P: Matrix, current: Matrix, residual_on: bool = True) -> Matrix:
    """``P @ block``, plus the current split when the residual is on."""
    block, P, current = nx.as_matrix(block), nx.as_matrix(P), nx.as_matrix(current)
    if P.cols != block.rows or P.rows != current.rows or block.cols != current.cols:
        raise ConfigurationError(
            f"compressor shapes do not conform: P {P.shape}, block {block.shape}, "
            f"current {current.shape}")
    with nx.flop_scope("compressor"):
        out = P @ block
        return out + current if residual_on else out


def rank_all(splits: Matrix, config: ModelConfig, P: Matrix | None = None,
             plan: SplitPlan | None = None) -> list[RankedBlock]:
    """One :class:`RankedBlock` per split of a single sequence ``(n, S, d)``."""
    splits = nx.as_matrix(splits)
    n, S = splits.shape[0], splits.shape[1]
    plan = plan or SplitPlan(n * S, S, n, 0)
    k = 0 if config.ranker_mode == "off" else config.k
    scores = maxsim_matrix(splits.data, causal=config.ranker_mode == "unidirectional")
    out = []
    for t in range(n):
        rb = select_topk(t, scores[t], k, config.ranker_mode)
        rb.block = assemble_block(plan, splits, rb, k)
        if P is not None and config.ranker_mode != "off" and config.compression_on:
            rb.compressed = compress(rb.block, P, splits[t], config.residual_on)
        out.append(rb)
    return out


# ---------------------------------------------------------------------------
# batched path used by the model


def retrieval_table(split_data: np.ndarray, k: int, mode: str) -> np.ndarray:
    """Slot indices ``(B, n, k)`` for every split of every sequence (-1 = empty)."""
    B, n = split_data.shape[:2]
    table = np.full((B, n, k), -1, dtype=np.int64)
    if k == 0 or mode == "off":
        return table
    for b in range(B):
        scores = maxsim_matrix(split_data[b], causal=mode == "unidirectional")
        for t in range(n):
            table[b, t], _ = slot_layout(select_topk(t, scores[t], k, mode), k)
    return table


def retrieval_weights(splits: Matrix, table: np.ndarray) -> tuple[Matrix, Matrix]:
    """Gather the retrieved splits and their max-normalised MaxSim weights on the tape.

    Returns ``(candidates (B, n, k, S, d), weights (B, n, k))``.
    """
    B, n, S, d = splits.shape
    ext = nx.concat([splits, Matrix(np.zeros((B, 1, S, d), dtype=splits.dtype))], axis=1)
    fill = np.where(table < 0, n, table)
    cand = ext[(np.arange(B)[:, None, None], fill)]
    qn = nx.row_l2_normalize(splits)
    cn = nx.row_l2_normalize(cand)
    cos = qn.reshape(B, n, 1, S, d) @ nx.transpose(cn)              # (B, n, k, S, S)
    cand_ok = (np.linalg.norm(cand.data, axis=-1) >= EPS_NORM)[..., None, :]
    best = nx.reduce_max(nx.where(cand_ok, cos, _NO_MATCH), axis=-1)  # (B, n, k, S)
    q_ok = (np.linalg.norm(splits.data, axis=-1) >= EPS_NORM)[:, :, None, :]
    has_match = cand_ok.any(axis=-1)
    scores = nx.reduce_sum(nx.where(q_ok & has_match, best, 0.0), axis=-1)
    valid = table >= 0
    pos = nx.clamp_min(nx.where(valid, scores, 0.0), SCORE_FLOOR)
    top = nx.reduce_max(pos, axis=-1, keepdims=True)
    weights = nx.where(valid, pos / top, 0.0)
    return cand, weights


def weighted_blocks(splits: Matrix, table: np.ndarray) -> Matrix:
    """``(B, n, (k+1)S, d)`` blocks built from a retrieval table."""
    B, n, S, d = splits.shape
    k = table.shape[-1]
    if k == 0:
        return splits
    with nx.flop_scope("ranker"):
        cand, weights = retrieval_weights(splits, table)
        scaled = cand * weights.reshape(B, n, k, 1, 1)
    return nx.concat([scaled.reshape(B, n, k * S, d), splits], axis=-2)
