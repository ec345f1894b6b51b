"""From pre-softmax maps to a per-head selection plan, then one ToSA layer."""

import numpy as np

from tosa.attention import block_forward, init_block
from tosa.numerics import Tensor
from tosa.selector import importance_scores, init_selector, predict_attention, select_tokens
from tosa.tosa_layer import SkipScope, ToSALayerParams, tosa_attention

rng = np.random.default_rng(1)
L, D, H = 17, 32, 4
x = Tensor(rng.standard_normal((L, D)))

# A standard layer exposes its scaled QK^T maps, one per head.
first = init_block(rng, D, H)
y, artifacts = block_forward(x, first)
print("pre-softmax maps", artifacts.B.shape)

# The selector predicts the next layer's maps row by row.
selector = init_selector(rng, H)
log_maps = predict_attention(artifacts.B, selector)
scores = importance_scores(log_maps)  # column sums: attention each token receives
plan = select_tokens(scores, ratio=0.5, forced=(0,))
print(f"K = {plan.k} of {L}; head 0 attends {plan.attended[0].tolist()}")

# Skipped tokens bypass attention and are merged back, so every token survives.
second = ToSALayerParams(init_block(rng, D, H), selector, ratio=0.5)
for scope in SkipScope:
    second.scope = scope
    out, inner = tosa_attention(y, second, plan)
    print(f"{scope.value:>20}: output {out.shape}, per-head maps {inner.A.shape}")

# At r = 1 a ToSA layer reproduces the standard layer bit for bit.
full = select_tokens(scores, ratio=1.0, forced=(0,))
second.scope = SkipScope.ATTENTION_ONLY
same = np.array_equal(tosa_attention(y, second, full)[0].data, block_forward(y, second.block)[0].data)
print("r=1 matches the standard layer:", same)
