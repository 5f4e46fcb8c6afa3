"""
How often violations get injected
=================================

Draw many injection plans for a ten-phase workflow and look at what ends
up replaced.
"""

import numpy as np

from policysim.forge import ViolationVariant
from policysim.model import Guideline, GuidelineCategory, VariantKind
from policysim.synth import injection_count, plan_injection

W = GuidelineCategory.WORKFLOW
phases = [Guideline(f"trip__p{i}", f"step {i}", W, phase_index=i) for i in range(1, 11)]
conditions = [Guideline.condition(f"c{j}", f"trigger {j}", f"action {j}") for j in range(3)]

# one accepted variant per guideline is enough to make it replaceable
variants = {g.key: (ViolationVariant(g.key, VariantKind.WORKFLOW_MODIFIED, "wrong"),) for g in phases}
variants.update({c.key: (ViolationVariant(c.key, VariantKind.CONDITION_OMITS_ACTION, "", action="skip"),)
                 for c in conditions})

# %%
# 30 % of the phases, rounded half up, never fewer than one.
print({k: injection_count(k, 0.3) for k in (1, 2, 4, 5, 10, 20)})

# %%
plans = [plan_injection(phases, conditions, variants, seed) for seed in range(5000)]
per_phase = np.zeros(len(phases))
for p in plans:
    for key in p.workflow_replacements:
        per_phase[int(key.split("__p")[1]) - 1] += 1

print("replacements per plan:", {len(p.workflow_replacements) for p in plans})
print("share of plans touching each phase:", np.round(per_phase / len(plans), 3))
print("condition replaced in", np.mean([p.condition_replacement is not None for p in plans]))
