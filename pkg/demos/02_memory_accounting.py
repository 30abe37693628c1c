"""Stored-activation memory of one training pass, per estimator.

DARTS and SNAS keep every candidate's intermediate activations for the
backward pass (about K times the single model).  The straight-through alpha
pass keeps the sampled candidate's activations plus the K-1 other outputs,
which the bound C1 + (K-1) C2 describes.  Theta steps touch one candidate.
"""
from stnas.metrics import account_memory, large_vocab_c2_bytes
from stnas.supernet import SuperNetwork, preset

print(f"large-vocabulary setting, C2 per device: {large_vocab_c2_bytes() / 1e6:.1f} MB")

for name, batch, T in (("toy", 8, 60), ("desk", 8, 60)):
    m = account_memory(SuperNetwork(preset(name)), batch=batch, T=T)
    single = m.peaks["single"]
    print(f"\n{name}: K={m.K}, batch={batch}, frames={T}")
    for mode, peak in m.peaks.items():
        print(f"  {mode:>8} {peak:>10d} B  {peak / single:5.2f} x single")
    print(f"  C1 + (K-1) C2 = {m.st_bound:.0f} B")
    print(f"  candidates run forward per block (ST alpha pass): {m.forward_per_block['st']}")
    print(f"  candidates run backward per block (ST theta pass): {m.backward_per_block['st_theta']}")
