"""Overlap-weighted multi-label segmentation loss, heatmap MSE and GradNorm.

Task order everywhere is ``(seg, lm, roi)``; loss and weight matrices are
``(num_hourglasses, num_tasks)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.nn import functional as F


def overlap_map(y: torch.Tensor) -> torch.Tensor:
    """1 where more than one label is set: ``g[b, i, j] = [sum_c y[b, c, i, j] > 1]``.

    ``y`` may hold area fractions in [0, 1]; the sum then exceeds one only
    where at least two structures cover the pixel.
    """
    if not torch.all((y >= 0) & (y <= 1)):
        raise ValueError("ground truth must lie in [0, 1]")
    return (y.sum(dim=1) > 1).to(y.dtype)


def seg_loss(logits: torch.Tensor, y: torch.Tensor, beta: float = 0.6) -> torch.Tensor:
    """Channel-summed BCE, overlap pixels scaled by ``1 + beta``, divided by B*H*W."""
    if logits.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(y.shape)}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    b, _, h, w = y.shape
    weight = (1.0 + beta * overlap_map(y)).unsqueeze(1)
    bce = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    return (weight * bce).sum() / (b * h * w)


def heatmap_loss(pred: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(y.shape)}")
    return ((pred - y) ** 2).mean()


def total_loss(weights: torch.Tensor, losses: torch.Tensor) -> torch.Tensor:
    """Sum over hourglasses and tasks of ``w * L``; no gradient reaches ``w``."""
    if weights.shape != losses.shape:
        raise ValueError(f"weights {tuple(weights.shape)} vs losses {tuple(losses.shape)}")
    return (weights.detach() * losses).sum()


def training_rates(losses: torch.Tensor, initial: torch.Tensor) -> torch.Tensor:
    """Inverse training rate per task, relative to the per-hourglass mean."""
    if torch.any(initial == 0):
        raise ValueError("initial task loss is zero; training rate undefined")
    ratio = losses / initial
    return ratio / ratio.mean(dim=-1, keepdim=True)


def gradnorm_objective(grad_norms: torch.Tensor, rates: torch.Tensor, alpha: float) -> torch.Tensor:
    """``sum_t |G_t - mean(G) * r_t**alpha|`` per row, with the target held constant."""
    target = (grad_norms.mean(dim=-1, keepdim=True) * rates ** alpha).detach()
    return (grad_norms - target).abs().sum(dim=-1)


@dataclass
class TaskWeightMatrix:
    w: torch.Tensor
    initial_losses: torch.Tensor | None = None

    @classmethod
    def ones(cls, num_hourglasses: int, num_tasks: int = 3) -> "TaskWeightMatrix":
        return cls(torch.ones(num_hourglasses, num_tasks, dtype=torch.float64))

    @property
    def num_tasks(self) -> int:
        return self.w.shape[-1]

    def renormalize(self) -> None:
        with torch.no_grad():
            self.w.clamp_(min=1e-6)
            self.w.mul_(self.num_tasks / self.w.sum(dim=-1, keepdim=True))


def _grad_norm(loss: torch.Tensor, params) -> torch.Tensor:
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    sq = sum((g.detach().double() ** 2).sum() for g in grads if g is not None)
    return torch.sqrt(torch.as_tensor(sq, dtype=torch.float64))


class GradNorm:
    """GradNorm with one independent weight row per supervised hourglass.

    For every hourglass ``l`` the gradient norms of the unweighted task losses
    are taken w.r.t. that hourglass' shared bottleneck parameters; since
    ``G = w * ||grad L||`` the objective is differentiated w.r.t. ``w`` with the
    norms held fixed.
    """

    def __init__(self, num_hourglasses: int, num_tasks: int = 3, alpha: float = 1.0,
                 lr: float = 0.025, optimizer: str = "rmsprop", rms_alpha: float = 0.99,
                 eps: float = 1e-8):
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.alpha = alpha
        self.weights = TaskWeightMatrix.ones(num_hourglasses, num_tasks)
        self._param = torch.nn.Parameter(self.weights.w.clone())
        if optimizer == "rmsprop":
            self.optimizer = torch.optim.RMSprop([self._param], lr=lr, alpha=rms_alpha, eps=eps)
        elif optimizer == "sgd":
            self.optimizer = torch.optim.SGD([self._param], lr=lr)
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.last_objective: torch.Tensor | None = None
        self.last_grad_norms: torch.Tensor | None = None

    @property
    def w(self) -> torch.Tensor:
        return self.weights.w

    def state_dict(self) -> dict:
        return {"w": self.w.clone(), "initial_losses": self.weights.initial_losses,
                "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.weights.w = state["w"].clone()
        self.weights.initial_losses = state["initial_losses"]
        with torch.no_grad():
            self._param.copy_(self.weights.w)
        self.optimizer.load_state_dict(state["optimizer"])

    def task_grad_norms(self, task_losses, shared_params) -> torch.Tensor:
        """``||d L[l][t] / d shared_params[l]||`` for every hourglass and task.

        Pass the per-task scalars as nested lists: differentiating an element of
        a stacked tensor would back-propagate zeros through every other loss.
        """
        n_hg, n_t = len(task_losses), len(task_losses[0])
        norms = torch.zeros(n_hg, n_t, dtype=torch.float64)
        for l in range(n_hg):
            for t in range(n_t):
                norms[l, t] = _grad_norm(task_losses[l][t], shared_params[l])
        return norms

    def step(self, task_losses, shared_params, grad_norms: torch.Tensor | None = None) -> TaskWeightMatrix:
        """One weight update from the current ``(L, T)`` task losses.

        ``task_losses`` is a nested ``[l][t]`` list of scalar tensors (or an
        ``(L, T)`` tensor when ``grad_norms`` is supplied);
        ``shared_params[l]`` lists the reference parameters of hourglass ``l``.
        """
        if isinstance(task_losses, torch.Tensor):
            losses = task_losses.detach().double()
        else:
            losses = torch.stack([torch.stack([x.detach() for x in row]) for row in task_losses]).double()
        if self.weights.initial_losses is None:
            self.weights.initial_losses = losses.clone()
        if grad_norms is None:
            grad_norms = self.task_grad_norms(task_losses, shared_params)
        rates = training_rates(losses, self.weights.initial_losses)
        with torch.no_grad():
            self._param.copy_(self.weights.w)
        g = self._param * grad_norms.double()
        objective = gradnorm_objective(g, rates, self.alpha)
        self.optimizer.zero_grad()
        objective.sum().backward()
        self.optimizer.step()
        self.weights.w = self._param.detach().clone()
        self.weights.renormalize()
        self.last_objective = objective.detach()
        self.last_grad_norms = grad_norms.detach()
        return self.weights
