# %% [markdown]
# # Where the membership signal lives
#
# We train an overfit dense classifier on synthetic purchase-like data and look
# at the white-box signals of training members and of unseen records. Then we
# train the supervised attack on those signals and compare it with an attack
# that only sees the prediction vector.
#
# Run with `python notebooks/01_gradient_leakage.py`; each `# %%` block is a cell.

# %%
import numpy as np

from wbmia.attack import AttackTrainConfig, attack_forward, train_supervised
from wbmia.data import make_split, synth_purchase_like
from wbmia.features import AttackFeatures, FeatureSelection, extract
from wbmia.metrics import evaluate, separated
from wbmia.target import TargetConfig, train_target

ds = synth_purchase_like(1600, 150, 10, 0.4, seed=1)
plan = make_split(len(ds), 400, 400, 200, 200, 200, seed=1)
res = train_target(ds, plan, TargetConfig([150, 128, 10], epochs=40), seed=1)
print(f"train accuracy {res.train_acc[res.best_epoch]:.3f}, test accuracy {res.test_acc[res.best_epoch]:.3f}")

# %% [markdown]
# ## Gradient norms
#
# A member was fitted during training, so its loss gradient is small. A
# non-member's gradient is what the model would still need to learn.

# %%
sel = FeatureSelection()
feats = {k: extract([res.final], *ds.subset(getattr(plan, k)), sel)
         for k in ("attack_train_members", "attack_train_nonmembers",
                   "attack_test_members", "attack_test_nonmembers")}
m = feats["attack_test_members"].last_grad_norm[:, 0]
nm = feats["attack_test_nonmembers"].last_grad_norm[:, 0]
print(f"last-layer gradient norm: members {m.mean():.4f} +- {m.std():.4f}, "
      f"non-members {nm.mean():.4f} +- {nm.std():.4f}, separated: {separated(m, nm)}")

# %% [markdown]
# ## Supervised attack

# %%
cfg = AttackTrainConfig(kernels=8, epochs=40)
net, hist = train_supervised(feats["attack_train_members"], feats["attack_train_nonmembers"], cfg, seed=2)
test = AttackFeatures.concat([feats["attack_test_members"], feats["attack_test_nonmembers"]])
truth = np.r_[np.ones(200, bool), np.zeros(200, bool)]
white = evaluate(attack_forward(net, test)[0], truth)
print(f"white-box attack accuracy {white.attack_accuracy:.3f}, AUC {white.auc:.3f}")

# %% [markdown]
# ## Output-only ablation
#
# Same split, same seed, but the attack sees only the softmax vector.

# %%
only = FeatureSelection.output_only()
bb = {k: extract([res.final], *ds.subset(getattr(plan, k)), only) for k in feats}
net_bb, _ = train_supervised(bb["attack_train_members"], bb["attack_train_nonmembers"], cfg, seed=2)
test_bb = AttackFeatures.concat([bb["attack_test_members"], bb["attack_test_nonmembers"]])
black = evaluate(attack_forward(net_bb, test_bb)[0], truth)
print(f"output-only attack accuracy {black.attack_accuracy:.3f}, AUC {black.auc:.3f}")
