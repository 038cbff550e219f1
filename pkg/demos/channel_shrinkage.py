"""How the learned threshold thins out the mode-to-mode attention.

    python3 demos/channel_shrinkage.py

Scores below the threshold are zeroed before the row softmax, so as the
threshold rises each row of C' flattens toward uniform weights.
"""
import numpy as np

from stmodes.attention import ChannelAttentionParams, channel_attention
from stmodes.numerics import Tensor

rng = np.random.default_rng(0)
nodes, modes, window = 6, 4, 12
params = ChannelAttentionParams.init(nodes, modes, window, rng)
z = Tensor(rng.standard_normal((1, nodes, modes, window)))

np.set_printoptions(precision=3, suppress=True)
for phi in (0.0, 0.2, 0.5, 2.0):
    c_th, c_norm = channel_attention(z, params, threshold=phi)
    zeros = int(np.sum(c_th.data == 0.0))
    print(f"threshold {phi:<4} zeroed scores {zeros:>2}/{modes * modes}")
    print(c_norm.data[0])
print("learned threshold at initialization:", float(params.threshold().data))
