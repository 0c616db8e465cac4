# %% [markdown]
# # Passive and active attacks in federated training
#
# Four participants train a shared model with FedAvg. The server is the
# attacker and targets participant 0. We compare three modes:
#
# * passive observation of the uploads;
# * isolation, where the victim never receives the other participants' work;
# * isolation combined with gradient ascent on the attacked records.
#
# The runs use a reduced configuration so the script finishes in a few minutes.

# %%
import tempfile
from dataclasses import replace

import numpy as np

from wbmia.experiment import run_experiment, scenario_presets

root = tempfile.mkdtemp(prefix="wbmia-fed-")
small = {"participants": 4, "participant_size": 250, "rounds": 12, "local_epochs": 3,
         "attack_train": 60, "attack_test": 60}
accuracy = {}
for name in ("fed-passive-global", "fed-active-isolate", "fed-active-isolate-ascent"):
    base = scenario_presets()[name]
    cfg = replace(base, fed={**base.fed, **small}, observed=[8, 9, 10, 11, 12],
                  dataset={**base.dataset, "n": 2400}, output_dir=f"{root}/{name}")
    doc = run_experiment(cfg)
    accuracy[name] = doc["attack_accuracy"]
    print(f"{name:28s} attack accuracy {doc['attack_accuracy']:.3f}  "
          f"aggregate test accuracy {doc['federation']['aggregate_test_acc']:.3f}")

# %% [markdown]
# Isolation makes the victim's model fit its own data alone, so the gap between
# its members and non-members grows and the attack gets much stronger.
#
# Gradient ascent pushes the loss of every attacked record up before the
# victim trains. The victim's local training then undoes the push only on
# records it holds, so non-members keep a much larger loss. At this scale the
# isolated victim is already close to separable, and the extra damage from
# ascent does not translate into higher attack accuracy. The two active modes
# end up within a couple of test records of each other.

# %%
best = max(accuracy, key=accuracy.get)
print("strongest mode in this run:", best)
print("observed uploads are in", root)
