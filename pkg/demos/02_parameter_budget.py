"""
Parameter budget of the bridge.

A dense map from a flattened (N_m, d_m) representation to an (N_l, d_l) one
needs N_m * d_m * N_l * d_l weights. The prototype bridge needs
d_m * r + r * N_l * N_p + N_p * d_l. This script tabulates both for
foundation-model-sized layers (181 tokens of width 200 feeding a 93-token,
512-wide layer) and for the toy encoders used here.

Run:  python3 demos/02_parameter_budget.py
"""

from modelbridge.bridge import (SEARCH_PROTOTYPES, SEARCH_RANKS, BridgeShapeSpec, bridge_param_count,
                                full_rank_param_count)
from modelbridge.data import DEFAULT_NEW_MODALITY, DEFAULT_OLD_MODALITY
from modelbridge.models import build_encoder

dims = dict(d_in=200, n_out=93, d_out=512)
full = full_rank_param_count(BridgeShapeSpec(**dims, rank=1, n_prototypes=1), n_in=181)
print(f"dense projection, foundation-model dims: {full:,} weights\n")

print("low-rank bridge as a share of the dense projection")
print("rank \\ N_p " + "".join(f"{n:>9d}" for n in SEARCH_PROTOTYPES))
for r in SEARCH_RANKS:
    shares = [bridge_param_count(BridgeShapeSpec(**dims, rank=r, n_prototypes=n)) / full for n in SEARCH_PROTOTYPES]
    print(f"{r:>10d} " + "".join(f"{100 * s:8.3f}%" for s in shares))

# toy encoders: bridge between the new encoder's layer 2 and the old encoder's layer 4
old = build_encoder("attention", DEFAULT_OLD_MODALITY.input_shape, "ecg")
new = build_encoder("conv", DEFAULT_NEW_MODALITY.input_shape, "ppg")
m, l = 2, 4
d_in = new.layer_shapes()[m - 1][1]
n_out, d_out = old.layer_shapes()[l - 1]
spec = BridgeShapeSpec(d_in, n_out, d_out, rank=4, n_prototypes=16)
kd = new.param_count() + (new.layer_shapes()[-1][1] + 1) * 3
print(f"\ntoy setting: bridge {bridge_param_count(spec)} vs KD student {kd} trainable parameters "
      f"({100 * bridge_param_count(spec) / kd:.1f}%)")
