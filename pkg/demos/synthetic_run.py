"""Train on a synthetic dataset and print the stratified evaluation.

    python demos/synthetic_run.py [seed]

Error segments are planted into smooth noise; short ones oscillate, long
ones are a sustained shift. A small model learns to flag them within a few
dozen epochs on one CPU core.
"""

import sys
import time

from sedmamba.data import SynthConfig, synth_generate
from sedmamba.model import ModelConfig
from sedmamba.training import TrainConfig, evaluate, train_run

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
data = synth_generate(SynthConfig(seed=seed, num_sequences=25))
train, test = data[:20], data[20:]
n_segments = sum(len(s.segments) for s in data)
print(f"{len(train)} train / {len(test)} test sequences, {n_segments} planted segments")

t0 = time.perf_counter()


def show(entry):
    print(f"epoch {entry['epoch']:>3}  loss {entry['train_loss']:.4f}  test AUC {entry['val_auc']:.3f}  "
          f"({time.perf_counter() - t0:.0f}s)")


res = train_run(train, ModelConfig(d_model=64, compression=16),
                TrainConfig(lr=1e-4, epochs=100, seed=seed, target_auc=0.9), val_set=test, on_epoch=show)

report, _ = evaluate(res.model, test)
print()
print(f"frame     AUC {report.frame_auc:.3f}  AP {report.frame_ap:.3f}")
print(f"instance  AUC {report.instance_auc:.3f}  AP {report.instance_ap:.3f}  "
      f"({report.n_error_instances} error instances of {report.n_instances})")
for name, s in (("short", report.short), ("long", report.long)):
    auc = "n/a" if s.auc is None else f"{s.auc:.3f}"
    ap = "n/a" if s.ap is None else f"{s.ap:.3f}"
    print(f"{name:<9} AUC {auc}  AP {ap}  ({s.n_instances} segments)")
