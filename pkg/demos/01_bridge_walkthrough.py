"""
Bridge walkthrough: one seed, start to finish.

1. Generate a paired two-modality dataset from a shared latent state and
   split it by subject into old / new / val / pair.
2. Train the old-modality teacher on its labeled split and pretrain the
   new-modality encoder on an unlabeled corpus; freeze both.
3. Choose the bridge input layer by linear probing on teacher pseudo-labels
   and the output layer by linear CKA.
4. Train the low-rank prototype bridge on the paired split only.
5. Evaluate on the held-out new-modality split against the teacher's own
   accuracy on the synchronized old-modality signals.

Epoch counts are cut down so the script finishes in about a minute.
Run:  python3 demos/01_bridge_walkthrough.py
"""

import time

import numpy as np

from modelbridge import experiment as ex
from modelbridge.metrics import balanced_accuracy
from modelbridge.models import predict

cfg = ex.ExperimentConfig.from_string("""
[data]
samples_per_subject = 80

[models]
teacher_epochs = 8
pretrain_epochs = 8

[bridge]
epochs = 15
""")

# ---------------------------------------------------------------- data and models
t0 = time.perf_counter()
ctx = ex.prepare_seed(cfg, seed=0)
print(f"prepared seed 0 in {time.perf_counter() - t0:.1f}s")
for split in ctx.splits:
    print(f"  {split.name:5s} {len(split):5d} samples  subjects {ctx.splits.subject_lists[split.name]}")
print("old encoder layer shapes (tokens, width):", ctx.old.layer_shapes())
print("new encoder layer shapes (tokens, width):", ctx.new.layer_shapes())

# ---------------------------------------------------------------- positions
sel = ex.select_positions(cfg, ctx)
print("\nprobe F1-macro per new layer:", {m: round(s, 3) for m, s in sel.probe_scores.items()})
print("CKA to the chosen layer, per old layer:", {l: round(s, 3) for l, s in sel.cka_scores.items()})
print(f"bridge positions: m={sel.m} (new) -> l={sel.l} (old)")

# ---------------------------------------------------------------- bridge
t0 = time.perf_counter()
model, history = ex.fit_bridge(cfg, ctx)
print(f"\nbridge trained in {time.perf_counter() - t0:.1f}s, "
      f"loss {history['first_loss']:.4f} -> {history['final_loss']:.4f}")
print(f"bridge parameters: {model.trainable_param_count()}  "
      f"(KD student would train {ex.kd_student_param_count(ctx)})")

# ---------------------------------------------------------------- evaluation
test = ctx.splits.new
y = test.eval_labels()
bridged = model.predict_proba(test.x_new).argmax(axis=1)
teacher = predict(ctx.old, ctx.head, test.x_old).argmax(axis=1)
print(f"\nteacher on old-modality test signals : BAcc {balanced_accuracy(y, teacher):.3f}")
print(f"bridged new-modality model           : BAcc {balanced_accuracy(y, bridged):.3f}")
print(f"agreement with teacher predictions   : {np.mean(bridged == teacher):.3f}")
