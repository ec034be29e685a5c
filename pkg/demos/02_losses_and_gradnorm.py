"""
Overlap-weighted segmentation loss and GradNorm
===============================================

The segmentation loss up-weights pixels covered by more than one bone. The
task weights of each hourglass are tuned so that the gradient each task sends
into the shared features grows with how far that task lags behind.
"""
# %%
import torch

from kneeplan.losses import GradNorm, gradnorm_objective, seg_loss

y = torch.zeros(1, 4, 1, 2)
y[0, 0, 0, 0] = y[0, 2, 0, 0] = 1.0  # femur and tibia overlap at the first pixel
y[0, 1, 0, 1] = 1.0
logits = torch.zeros_like(y)
for beta in (0.0, 0.6, 1.2):
    print(f"beta={beta}: loss {seg_loss(logits, y, beta).item():.4f}")

# %%
# Two tasks with gradient norms 1 and 3 and equal training rates sit a total
# distance of 2 from their common target.
print(gradnorm_objective(torch.tensor([[1.0, 3.0]]), torch.ones(1, 2), alpha=1.0).item())

# %%
# Feed GradNorm a fixed picture: task 2 has a weaker gradient and lags in
# loss. Its weight grows while every row keeps summing to the task count.
gn = GradNorm(num_hourglasses=2)
losses = torch.ones(2, 3)
gn.step(losses, None, grad_norms=torch.ones(2, 3))
for step in range(50):
    gn.step(torch.tensor([[0.5, 0.5, 1.0]] * 2), None,
             grad_norms=torch.tensor([[1.0, 1.0, 0.5]] * 2))
print(gn.w)
print("row sums", gn.w.sum(dim=1))
