"""
Train, plan and evaluate
========================

Train the full four-stack network on a handful of phantoms, then plan the
drill site on the training images and print the metric report. Pass the
number of epochs on the command line (default 5; around 50 are needed for
the network to localize landmarks within a couple of pixels, roughly 20
minutes on one CPU core).
"""
# %%
import sys

import numpy as np

from kneeplan.evaluation import evaluate, predict
from kneeplan.phantom import analytic_schoettle, generate_phantom, random_spec
from kneeplan.trainer import ExperimentConfig, TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
specs = [random_spec(s) for s in range(8)]
samples = [generate_phantom(s) for s in specs]

# %%
# The protocol defaults come from ``TrainConfig``; only the epoch count is
# shortened and augmentation is switched off to overfit the eight images.
config = ExperimentConfig(train=TrainConfig(epochs=epochs, augment=False))


def progress(epoch, step, losses, weights):
    if step % 4 == 3:
        print(f"epoch {epoch:3d}  last-HG losses {np.round(losses[-1].numpy(), 5)}  "
              f"weights {np.round(weights[-1].numpy(), 3)}")


result = train(samples, config, progress=progress, out_dir="demo_run")

# %%
preds = [predict(result.network, s) for s in samples]
for spec, s, p in zip(specs, samples, preds):
    truth, _ = analytic_schoettle(spec)
    err = "failed: " + p.error if p.plan is None else f"{np.hypot(*(p.plan.p_sp - truth)):.2f} px"
    print(s.sample_id, "Schoettle", err)

print(evaluate(preds, samples, resamples=1000).render_text())
