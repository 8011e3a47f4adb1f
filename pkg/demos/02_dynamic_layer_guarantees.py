"""
What divide-by-sum normalization preserves
==========================================

The dynamic layer mixes tokens with a cosine similarity matrix whose rows are
divided by their sums.  On nonnegative inputs this keeps every row inside the
probability simplex and never reorders which neighbours a token prefers.
"""

import numpy as np

from aveyb import Rng
from aveyb.numerics import Matrix
from aveyb.processor import cosine_similarity, normalize_similarity

rng = Rng(1, "demo")
z = np.maximum(rng.normal((6, 5)), 0.0) ** 2  # the enricher's ReLU^2 output
z[5] = 0.0  # a padding row

S = cosine_similarity(Matrix(z)).data
St = normalize_similarity(Matrix(S), "divide_by_sum", 1e-6).data
np.set_printoptions(precision=3, suppress=True)
print("raw cosine similarity\n", S)
print("row-normalized\n", St)

# rows sum to one up to the epsilon, and the zero row stays zero
print("row sums:", St.sum(axis=1))

# the ranking inside each row is untouched
same_order = all(np.array_equal(np.argsort(-S[i], kind="stable"), np.argsort(-St[i], kind="stable"))
                 for i in range(len(S)))
print("per-row neighbour order preserved:", same_order)

# softmax, by contrast, gives the padding row a uniform distribution
soft = normalize_similarity(Matrix(S), "softmax").data
print("softmax row for the padding token:", soft[5])
