"""
Evaluating a pose prior
=======================

Three views of a trained prior: the KS distance between the densities of
samples and of data, per-joint rotation-vector marginals, and the
augmentation ablation.

Run ``03_train_pose_prior.py`` first and pass its output directory, or let
this script train a small model itself.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from poseflow import data, evaluation
from poseflow.training import TrainConfig, train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else None
out = Path(tempfile.mkdtemp())

if work is not None:
    ckpt = data.load_checkpoint(work / "prior.ckpt")
    ds = data.load_dataset(work / "poses.pose6d")
else:
    ds = data.generate_synthetic(data.default_synthetic_spec(0), 3000)
    ckpt, _ = train(ds, TrainConfig(max_epochs=3, dtype="float32", seed=0))
model = ckpt.model

# Density comparison.  Raw samples sit off the rotation manifold and score
# very differently from data; after Gram-Schmidt they should look like data.
n = min(2000, len(ds.poses))
cmp = evaluation.density_comparison(model, ds, n=n, seed=0)
print("KS, raw samples vs data:           ", round(cmp.ks_raw.statistic, 4))
print("KS, orthonormalized samples vs data:", round(cmp.ks_ortho.statistic, 4))
evaluation.write_density_histogram(cmp, out / "density_hist.csv")

for name, lp in (("raw", cmp.model.raw_logprob), ("ortho", cmp.model.ortho_logprob),
                 ("data", cmp.data_logprob)):
    print(f"  {name:5s} log p quartiles:", np.round(np.percentile(lp, [25, 50, 75]), 1))

# Marginals of one joint as rotation vectors, ready for a scatter plot.
rows = evaluation.marginal_export(model, ds, joint=4, n=1000, seed=0)
evaluation.write_marginals(rows, out / "marginals_joint4.csv")
model_rv = np.array([r[1:] for r in rows if r[0] == "model"])
data_rv = np.array([r[1:] for r in rows if r[0] == "data"])
print("\njoint 4 rotation-vector mean, model:", np.round(model_rv.mean(0), 3),
      " data:", np.round(data_rv.mean(0), 3))

# Ablation: identical runs with and without augmentation.  Orthonormalizing
# a sample should raise its density when the prior was trained augmented.
# Both models need some training before the comparison means anything; this
# takes a minute or two.
small = data.generate_synthetic(data.default_synthetic_spec(0), 5000)
res = evaluation.ablation_run(small, TrainConfig(max_epochs=10, dtype="float32", seed=0), n=1000)
evaluation.write_ablation(res, out / "ablation.csv", out / "ablation.json")
s = res.summary()
print(f"\nfraction with ortho >= raw: augmented {s['augmented_fraction_above_diagonal']:.3f}, "
      f"raw-trained {s['raw_trained_fraction_above_diagonal']:.3f}")
print("outputs in", out)
