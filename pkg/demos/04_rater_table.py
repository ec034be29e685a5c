"""
Inter-rater comparison
======================

Pairwise Euclidean distances between planned drill sites of several raters,
with bootstrap medians and 80% intervals, as in a reader study. Here three
synthetic experts scatter around the analytic point and the "automatic" plan
is the planner run on ground truth.
"""
# %%
import numpy as np

from kneeplan.evaluation import reference_plan
from kneeplan.metrics import format_rater_table, pairwise_rater_table
from kneeplan.phantom import analytic_schoettle, generate_phantom, random_spec

rng = np.random.default_rng(0)
samples = [generate_phantom(random_spec(s)) for s in range(20)]
truth = np.array([analytic_schoettle(s.meta["phantom_spec"])[0] for s in samples])
spacing = [s.image.mm_per_px for s in samples]

plans = {str(k): truth + rng.normal(0, 1.0 + 0.5 * k, truth.shape) for k in range(1, 4)}
plans["auto"] = np.array([reference_plan(s).p_sp for s in samples])

# %%
rows = pairwise_rater_table(plans, spacing, resamples=2000)
print(format_rater_table(rows))
