"""
Swapping softmax for the linear layer, by distillation
======================================================

A trained softmax model already knows where to look. Rather than training
the gated-linear replacement from scratch, each linear attention layer is
fit to reproduce its softmax counterpart's outputs on the same inputs --
plain per-layer MSE, gradients confined to the new attention parameters.

Here both models are tiny and the teacher is untrained, which is fine:
the student is matching a function, and the loss falling by orders of
magnitude in a few dozen steps is the phenomenon worth seeing.
"""

import numpy as np

from convgla.model import ModelConfig, init_model, student_from_teacher
from convgla.tasks import VOCAB, generate_set
from convgla.training import AdamW, AdamWConfig, distill_step

rng = np.random.default_rng(0)
cfg = ModelConfig(vocab_size=len(VOCAB), d_model=32, n_layers=2, n_heads=2, d_ff=64,
                  max_seq=128, attn_kind="softmax_teacher")
teacher = init_model(rng, cfg)

# A freshly initialized teacher computes nearly-zero attention outputs
# (0.02-scale projections twice over), which makes for a degenerate
# matching target. Inflate its attention weights so there is an actual
# function to chase.
for name, par in teacher.named_parameters().items():
    if ".attn." in name:
        par.data *= 6.0

# The student clones every non-attention weight from the teacher and gets
# fresh gated-linear internals. Only those internals will train.
student = student_from_teacher(np.random.default_rng(1), teacher)
trainable = student.attention_internals()
print("trainable tensors:", len(trainable))

opt = AdamW(trainable, AdamWConfig())
tokens = np.stack([
    np.asarray(s.tokens) for s in generate_set("passkey", 48, seeds=range(4))
])

for step in range(60):
    loss = distill_step(teacher, student, tokens)
    opt.zero_grad()
    loss.backward()
    opt.step(lr=0.05)
    if step % 10 == 0 or step == 59:
        print(f"step {step:3d}  layer-MSE {float(loss.data):.2e}")
