"""
Retrieval and compression, one split at a time
===============================================

A sequence is cut into splits of S tokens.  Each split scores every earlier
split with MaxSim, keeps the best k, scales them by their normalized score and
stacks them in front of itself.  A learned S x (k+1)S matrix then squeezes the
block back down to S rows, so the processor always sees S tokens per split.
"""

import numpy as np

from aveyb import ModelConfig, Rng
from aveyb.numerics import Matrix
from aveyb.ranker import compress, partition, rank_all

# a small problem: 20 tokens of width 4, splits of 4 tokens, top-2 retrieval
cfg = ModelConfig(d=4, m=16, m_h=8, m_t=8, N=20, S=4, k=2)
rng = Rng(0, "demo")
x = Matrix(rng.normal((cfg.N, cfg.d)))
plan, splits = partition(x, cfg.S)
print(f"{plan.num_splits} splits of {plan.split_size} tokens, {plan.pad_len} pad rows")

# plant a copy of split 0 inside split 3 so the ranker has something to find
splits.data[3] = splits.data[0] + 0.01 * rng.child("noise").normal((cfg.S, cfg.d))

# each split looks back at earlier splits only (the unidirectional default)
P = Matrix(rng.child("P").normal((cfg.S, (cfg.k + 1) * cfg.S), 0.1))
blocks = rank_all(splits, cfg, P, plan)
for rb in blocks:
    scores = ", ".join(f"{s:.2f}" for s in rb.maxsim_scores)
    weights = ", ".join(f"{w:.2f}" for w in rb.normalized_weights)
    print(f"split {rb.target_index}: retrieves {list(rb.retrieved_indices)} scores [{scores}] weights [{weights}]")

# the block is (k+1)S x d; empty slots are zero rows at the front
rb = blocks[3]
print("block for split 3 has shape", rb.block.shape, "and compresses to", rb.compressed.shape)

# without the residual the compressed rows are a pure mix of the block
bare = compress(rb.block, P, splits[3], residual_on=False)
print("residual adds back the split exactly:", np.allclose(rb.compressed.data - bare.data, splits.data[3]))
