"""
One attention layer, three evaluation paths
===========================================

The whole point of the gated-linear layer is that the same mathematical
object can be evaluated three different ways:

  * a recurrent fold   -- O(n) time, O(1) state, what you decode with
  * a chunked scan     -- same numbers, batched into blocks for prefill
  * a quadratic oracle -- materializes the full n x n weight matrix

They have to agree. This script builds one head by hand on random data
and checks that they do.
"""

import numpy as np

from convgla import attention as A

rng = np.random.default_rng(0)
n, d_head, d_feat = 48, 8, 16

# Random projected inputs. In the full model these come out of learned
# projections + conv; here an identity w_phi keeps the demo readable.
# Gates must live strictly inside (0, 1).
w_phi = np.eye(d_feat)
q_dot = A.feature_map(rng.standard_normal((n, d_feat)), w_phi)
k_dot = A.feature_map(rng.standard_normal((n, d_feat)), w_phi)
v = rng.standard_normal((n, d_head))
g = 1.0 / (1.0 + np.exp(-rng.standard_normal((n, d_feat)) - 3.0))

print("gates live in (%.4f, %.4f)" % (g.min(), g.max()))

# Path 1: the recurrent fold, one token at a time.
out_rec, state = A.gla_scan_recurrent(q_dot, k_dot, v, g)

# Path 2: the chunked scan. Chunk size is a throughput knob, not a
# semantics knob -- any value gives the same outputs.
for chunk in (1, 7, 16, n):
    out_chk, _ = A.gla_scan_chunked(q_dot, k_dot, v, g, chunk=chunk)
    gap = np.abs(out_chk - out_rec).max()
    print(f"chunk={chunk:3d}  max |chunked - recurrent| = {gap:.3e}")

# Path 3: the quadratic oracle. It builds the explicit attention-weight
# matrix, so it is slow, but it is also the easiest form to audit.
out_ora = A.gla_parallel_oracle(q_dot, k_dot, v, g)
print("max |oracle - recurrent| =", np.abs(out_ora - out_rec).max())

# A consequence worth seeing once: with normalized positive features the
# first output is exactly the first value vector. No attention to pay
# anywhere else yet, and the normalizer cancels.
print("first token exact:", np.array_equal(out_ora[0], v[0]))

# The recurrent state after n tokens is a (d_feat, d_head) matrix plus a
# (d_feat,) normalizer -- independent of n. That is the entire memory
# footprint of decoding.
print("state shapes:", state.S.shape, state.z.shape)
