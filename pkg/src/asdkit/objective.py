"""Training objective: product-ID and machine-type BCE losses, mixup and the 1:1 batch sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7


class EmptyTargetError(ValueError):
    """The batch has no target-machine mass, so the product-ID loss is undefined."""


@dataclass
class BatchLabels:
    """Per-sample targets.

    ``t`` is 1 for the target machine type and 0 otherwise; ``y`` holds the
    product one-hot rows (zero rows for non-target samples). Both become
    fractional after mixup.
    """

    t: np.ndarray
    y: np.ndarray
    lambda_mix: np.ndarray | None = None

    @classmethod
    def from_ids(cls, is_target, product_ids, n_ids: int) -> "BatchLabels":
        is_target = np.asarray(is_target, dtype=bool)
        product_ids = np.asarray(product_ids, dtype=int)
        y = np.zeros((len(is_target), n_ids))
        rows = np.flatnonzero(is_target)
        y[rows, product_ids[rows]] = 1.0
        return cls(t=is_target.astype(np.float64), y=y)

    def is_fractional(self) -> bool:
        return bool(np.any((self.t > 0) & (self.t < 1)) or np.any((self.y > 0) & (self.y < 1)))


def _as_tensor(a, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=like.dtype, device=like.device)


def loss_product(product_probs: torch.Tensor, t, y, eps: float = EPS) -> torch.Tensor:
    """Product-ID loss: per-ID binary cross-entropy averaged over target mass.

    Each sample is weighted by its target weight ``t_i``; the sum is divided
    by ``K * sum(t)``.
    """
    t = _as_tensor(t, product_probs) if not torch.is_tensor(t) else t.to(product_probs.dtype)
    y = _as_tensor(y, product_probs) if not torch.is_tensor(y) else y.to(product_probs.dtype)
    total_t = t.sum()
    if not float(total_t) > 0:
        raise EmptyTargetError("batch contains no target-machine samples")
    K = product_probs.shape[1]
    p = product_probs.clamp(eps, 1 - eps)
    bce = y * torch.log(p) + (1 - y) * torch.log(1 - p)
    return -(t[:, None] * bce).sum() / (K * total_t)


def loss_machine(machine_probs: torch.Tensor, t, eps: float = EPS) -> torch.Tensor:
    """Machine-type loss: mean binary cross-entropy of the norm-head output against ``t``."""
    t = _as_tensor(t, machine_probs) if not torch.is_tensor(t) else t.to(machine_probs.dtype)
    q = machine_probs.clamp(eps, 1 - eps)
    return -(t * torch.log(q) + (1 - t) * torch.log(1 - q)).mean()


def loss_total(lp, lm, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return lm + lam * lp


def mixup(x_a, labels_a: BatchLabels, x_b, labels_b: BatchLabels, lam):
    """Convex combination of two aligned batches and their labels.

    ``lam`` is a scalar or one coefficient per sample.
    """
    x_a = np.asarray(x_a)
    x_b = np.asarray(x_b)
    if x_a.shape != x_b.shape:
        raise ValueError(f"batch shapes differ: {x_a.shape} vs {x_b.shape}")
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (x_a.shape[0],))
    lx = lam.reshape((-1,) + (1,) * (x_a.ndim - 1)).astype(x_a.dtype)
    x = lx * x_a + (1 - lx) * x_b
    t = lam * labels_a.t + (1 - lam) * labels_b.t
    y = lam[:, None] * labels_a.y + (1 - lam[:, None]) * labels_b.y
    return x, BatchLabels(t=t, y=y, lambda_mix=lam.copy())


def mixup_batch(x, labels: BatchLabels, rng: np.random.Generator, alpha: float = 0.2):
    """Within-batch mixup: pair each sample with a shuffled partner, one Beta(alpha, alpha) draw per pair."""
    n = len(labels.t)
    perm = rng.permutation(n)
    lam = rng.beta(alpha, alpha, size=n)
    partner = BatchLabels(t=labels.t[perm], y=labels.y[perm])
    return mixup(x, labels, np.asarray(x)[perm], partner, lam)


class BalancedBatchSampler:
    """Yield index batches that are half target machine type, half other types.

    The target half cycles through per-ID shuffled queues in round-robin
    order, so within an epoch every product ID appears within one of its
    equal share. The other half is drawn uniformly from all non-target clips.

    Parameters
    ----------
    machine_types, product_ids : sequences over the candidate clip pool
    target : name of the target machine type
    batch_size : even batch size
    rng : numpy Generator owned by the sampler
    """

    def __init__(self, machine_types, product_ids, target: str, batch_size: int, rng: np.random.Generator):
        if batch_size < 2 or batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
        machine_types = np.asarray(machine_types)
        product_ids = np.asarray(product_ids, dtype=int)
        self.target = target
        self.batch_size = batch_size
        self.rng = rng
        is_target = machine_types == target
        self.target_idx = np.flatnonzero(is_target)
        self.other_idx = np.flatnonzero(~is_target)
        if self.target_idx.size == 0:
            raise ValueError(f"no clips of target machine type {target!r}")
        if self.other_idx.size == 0:
            raise ValueError("outlier exposure needs clips of other machine types")
        self.by_id = {int(k): self.target_idx[product_ids[self.target_idx] == k] for k in np.unique(product_ids[self.target_idx])}
        self._queues = {k: [] for k in self.by_id}
        self._round: list[int] = []

    @property
    def half(self) -> int:
        return self.batch_size // 2

    def batches_per_epoch(self) -> int:
        return int(np.ceil(self.target_idx.size / self.half))

    def _next_target(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if not self._round:
                self._round = [int(k) for k in self.rng.permutation(sorted(self.by_id))]
            k = self._round.pop()
            q = self._queues[k]
            if not q:
                q.extend(self.rng.permutation(self.by_id[k]).tolist())
            out.append(q.pop())
        return out

    def sample_batch(self) -> np.ndarray:
        target = self._next_target(self.half)
        replace = self.other_idx.size < self.half
        other = self.rng.choice(self.other_idx, size=self.half, replace=replace)
        return np.concatenate([np.asarray(target, dtype=int), other.astype(int)])

    def epoch(self):
        for _ in range(self.batches_per_epoch()):
            yield self.sample_batch()

    __iter__ = epoch
