"""
What goes over the wire
=======================

Compare the uplink message size of raw float updates with one-bit
messages for a small MLP, then round-trip a message through bytes.
"""

import numpy as np

from fedbat.codecs import (
    CodecKind,
    ErrorFeedbackState,
    bench,
    compress,
    from_bytes,
    layer_breakdown,
    to_bytes,
)
from fedbat.tensor import SeededRng

# a 784-128-10 MLP: one flat vector per dense layer, weights then bias
sizes = [784 * 128 + 128, 128 * 10 + 10]
for row in layer_breakdown(sizes):
    print(row)
for row in bench(sizes):
    print(f"{row['codec']:>14}: {row['bytes']:>7} bytes  ratio {row['ratio']:.2f}")

rng = SeededRng(1)
update = [rng.normal_array(d) * 0.01 for d in sizes]

# error feedback keeps what the sign message lost and adds it back next time
state = ErrorFeedbackState.zeros(sizes)
msg, state = compress(CodecKind.default("ef-signsgd"), update, state, round=0, client_id=3)
buf = to_bytes(msg)
back = from_bytes(buf)
print("message bytes:", len(buf))
# signs survive exactly; alpha travels as float32
print("signs match:", all(np.array_equal(a.signs(), b.signs()) for a, b in zip(msg.layers, back.layers)))
print("alpha in memory / on the wire:", msg.layers[0].alpha, back.layers[0].alpha,
      back.layers[0].alpha == np.float32(msg.layers[0].alpha))
print("residual norm after one round:", sum(float(np.linalg.norm(r)) for r in state.residual))
