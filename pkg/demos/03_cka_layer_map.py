"""
Layer-by-layer linear CKA between the two encoders.

Prints the full CKA matrix between every new-modality layer and every
old-modality layer on the paired split. The output-position rule picks the
column maximum in the row of the chosen input layer. Rows are computed on
a 512-sample subset, with the same rows used for both encoders.

Run:  python3 demos/03_cka_layer_map.py
"""

import numpy as np

from modelbridge import experiment as ex
from modelbridge.cka import cka_linear
from modelbridge.transfer import prefix_reps

cfg = ex.ExperimentConfig.from_string("""
[data]
samples_per_subject = 120

[models]
teacher_epochs = 6
pretrain_epochs = 6
""")
ctx = ex.prepare_seed(cfg, seed=1)
pair = ctx.splits.pair
rows = np.sort(np.random.default_rng(0).choice(len(pair), size=min(512, len(pair)), replace=False))

new_reps = [prefix_reps(ctx.new, pair.x_new[rows], m) for m in range(1, ctx.new.layer_count + 1)]
old_reps = [prefix_reps(ctx.old, pair.x_old[rows], l) for l in range(1, ctx.old.layer_count + 1)]
table = np.array([[cka_linear(h, g) for g in old_reps] for h in new_reps])

print("CKA (rows: new layers m, columns: old layers l)")
print("      " + "".join(f"  l={l:<5d}" for l in range(1, table.shape[1] + 1)))
for m, row in enumerate(table, start=1):
    print(f"m={m:<3d} " + "".join(f"{v:9.3f}" for v in row) + f"   best l={int(row.argmax()) + 1}")

sel = ex.select_positions(cfg, ctx)
print(f"\nselected positions: m={sel.m}, l={sel.l}")
