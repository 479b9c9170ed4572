"""Agent attention three ways: two softmaxes, the equivalent feature maps, and the dense N x N matrix.

All three should agree to rounding, and the dense matrix should be row-stochastic.
"""

import numpy as np

from agentattn import agent_attention_pure
from agentattn.attention import equivalent_phi
from agentattn.verify import composed_matrix, random_inputs

rng = np.random.default_rng(0)
inp = random_inputs(rng, 64, 16, 8)

fast = agent_attention_pure(inp)
phi_q, phi_k = equivalent_phi(inp)
via_phi = phi_q @ (phi_k.T @ inp.v)
M = composed_matrix(inp)

print(f"N={inp.N} agents={inp.n} d={inp.d}")
print(f"|fast - phi route|   = {np.max(np.abs(fast - via_phi)):.2e}")
print(f"|fast - dense M @ V| = {np.max(np.abs(fast - M @ inp.v)):.2e}")
print(f"max |row sum - 1|    = {np.max(np.abs(M.sum(axis=1) - 1)):.2e}")
print(f"rank of M <= agents: {np.linalg.matrix_rank(M)} <= {inp.n}")
