"""
Synthetic knees and the Schoettle construction
==============================================

Build a phantom radiograph with known bones, landmarks and cortex line, then
run the geometric planner on its ground truth and compare against the
analytic drill site.
"""
# %%
# A phantom is fully described by a small spec. ``random_spec`` draws the
# shaft angle, condyle size, bone overlap and calibration sphere from a seed.
import numpy as np

from kneeplan.evaluation import ground_truth_roi, reference_plan
from kneeplan.phantom import analytic_schoettle, generate_phantom, random_spec

spec = random_spec(3)
sample = generate_phantom(spec)
print(spec)
print("image", sample.image.shape, "mm/px", round(sample.image.mm_per_px, 4))

# %%
# The line ROI is a ridge of Gaussians along the posterior cortex. Masking
# the femur outline with it and fitting a line gives LM1; perpendiculars
# through the two landmarks give LM2 and LM3.
roi = ground_truth_roi(sample)
print("ROI pixels:", int(roi.sum()))

result = reference_plan(sample)
truth, radius = analytic_schoettle(spec)
print("planned  ", np.round(result.p_sp, 3), "radius", round(result.radius_px, 3))
print("analytic ", np.round(truth, 3), "radius", round(radius, 3))
print("error px ", round(float(np.hypot(*(result.p_sp - truth))), 3))

# %%
# Distances to all three lines agree, which is what makes the point the
# centre of their inner circle.
for name in ("lm1", "lm2", "lm3"):
    print(name, round(float(getattr(result, name).distance(result.p_sp)), 9))

# %%
# The overlay renderer used by ``kneeplan plan`` works on any plan.
from kneeplan.cli import render_overlay  # noqa: E402

render_overlay(sample.image.pixels, sample.annotation.masks, result,
               (sample.annotation.p_blum, sample.annotation.p_tmc)).save("phantom_overlay.png")
print("wrote phantom_overlay.png")
