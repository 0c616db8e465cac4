# %% [markdown]
# # Attacking without membership labels
#
# The unsupervised attacker has a pool of records of unknown status. An
# encoder-decoder learns to compress each record's white-box signals into one
# number. Thresholding that number with exact 1-D two-means splits the pool.
# The cluster whose gradients are smaller is called "members".

# %%
import numpy as np

from wbmia.attack import (AttackTrainConfig, attack_forward, cluster_membership, train_supervised,
                          train_unsupervised, two_means_threshold)
from wbmia.data import make_split, synth_purchase_like
from wbmia.features import AttackFeatures, extract
from wbmia.metrics import evaluate_predictions
from wbmia.target import TargetConfig, train_target

ds = synth_purchase_like(1600, 150, 10, 0.4, seed=3)
plan = make_split(len(ds), 400, 400, 200, 200, 200, seed=3)
res = train_target(ds, plan, TargetConfig([150, 128, 10], epochs=40), seed=3)
feats = {k: extract([res.final], *ds.subset(getattr(plan, k)))
         for k in ("attack_train_members", "attack_train_nonmembers",
                   "attack_test_members", "attack_test_nonmembers")}
test = AttackFeatures.concat([feats["attack_test_members"], feats["attack_test_nonmembers"]])
truth = np.r_[np.ones(200, bool), np.zeros(200, bool)]

# %%
cfg = AttackTrainConfig(kernels=8, epochs=40)
pool = AttackFeatures.concat([feats["attack_train_members"], feats["attack_train_nonmembers"]])
enc, hist = train_unsupervised(pool, cfg, seed=4)
z = attack_forward(enc, test)[0]
thr, sse = two_means_threshold(z)
pred = cluster_membership(z, test.grad_norm.mean(axis=1))
uns = evaluate_predictions(pred, truth)
print(f"reconstruction loss {hist.loss[0]:.3f} -> {hist.loss[-1]:.3f}; split at {thr:.4f}")
print(f"unsupervised attack accuracy {uns.attack_accuracy:.3f}")

# %% [markdown]
# For reference, the supervised attack on the same features:

# %%
net, _ = train_supervised(feats["attack_train_members"], feats["attack_train_nonmembers"], cfg, seed=4)
sup = evaluate_predictions(attack_forward(net, test)[0] >= 0.5, truth)
print(f"supervised attack accuracy {sup.attack_accuracy:.3f}")
