"""Pretext losses and their weighted combinations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Parameter, ShapeError, Tensor

NORM_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    recons: float
    rotation: float
    contrastive: float
    total: float
    effective_weights: tuple[float, float, float]
    total_tensor: Tensor | None = field(default=None, repr=False)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


class UncertaintyWeights:
    """Learnable log-variances ``s_i = log(alpha_i^2)`` for the three tasks."""

    names = ("uncertainty.s1", "uncertainty.s2", "uncertainty.s3")

    def __init__(self, init=(0.0, 0.0, 0.0), dtype=np.float32):
        self.s = [Parameter(np.array(v, dtype=dtype), n) for v, n in zip(init, self.names)]

    def parameters(self) -> list[Parameter]:
        return list(self.s)

    def values(self) -> tuple[float, float, float]:
        return tuple(float(p.data) for p in self.s)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.s}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.s:
            p.data = np.asarray(state[p.name], dtype=p.dtype).reshape(()).copy()


def l1_reconstruction(target, recon: Tensor) -> Tensor:
    """Per-element mean absolute error (per-image l1 / (C·H·W), averaged over the batch)."""
    target = ag.as_tensor(target)
    recon = ag.as_tensor(recon)
    if target.shape != recon.shape:
        raise ShapeError(f"target {target.shape} vs recon {recon.shape}")
    return ag.tabs(target - recon).mean()


def rotation_ce(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true rotation class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    return cross_entropy(logits, labels)


def cross_entropy(logits: Tensor, labels=None, soft_targets=None) -> Tensor:
    n, k = logits.shape
    if soft_targets is None:
        soft_targets = np.zeros((n, k), dtype=logits.dtype)
        soft_targets[np.arange(n), np.asarray(labels)] = 1.0
    logp = ag.log_softmax(logits, axis=-1)
    return -(logp * Tensor(np.asarray(soft_targets, dtype=logits.dtype))).sum() * (1.0 / n)


def l2_normalize(z: Tensor) -> Tensor:
    norm = ag.sqrt((z * z).sum(axis=-1, keepdims=True))
    return z / ag.clamp_min(norm, NORM_FLOOR)


def nt_xent(embeddings: Tensor, pair_index, temperature: float = 0.5) -> Tensor:
    """Normalised temperature-scaled cross-entropy over ``2N`` views.

    Row ``i``'s positive is ``pair_index[i]``; every other row except ``i``
    itself is a negative. The loss averages ``-log`` of the positive's softmax
    share over all ``2N`` anchors.
    """
    m = embeddings.shape[0]
    pair_index = np.asarray(pair_index, dtype=np.int64)
    if not temperature > 0:
        raise ContractError("temperature must be > 0")
    if pair_index.shape != (m,) or np.any(pair_index[pair_index] != np.arange(m)) or np.any(pair_index == np.arange(m)):
        raise ContractError("pair_index must be a fixed-point-free involution over the rows")
    norms = np.sqrt((embeddings.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise ContractError("zero-norm embedding row")
    z = l2_normalize(embeddings)
    sim = ag.matmul(z, z.transpose()) * (1.0 / temperature)
    # a self-similarity offset large enough to vanish under exp, small enough to stay finite
    self_mask = np.eye(m, dtype=embeddings.dtype) * -1e4
    logp = ag.log_softmax(sim + Tensor(self_mask), axis=1)
    pick = np.zeros((m, m), dtype=embeddings.dtype)
    pick[np.arange(m), pair_index] = 1.0
    return -(logp * Tensor(pick)).sum() * (1.0 / m)


def _breakdown(losses, weights, total: Tensor) -> LossBreakdown:
    vals = [0.0 if l is None else float(ag.as_tensor(l).item()) for l in losses]
    return LossBreakdown(vals[0], vals[1], vals[2], total.item(), tuple(float(w) for w in weights), total)


def fixed_weighted_total(l_rec, l_rot, l_con, alpha=(1.0, 1.0, 1.0)) -> LossBreakdown:
    """``alpha1·L_rec + alpha2·L_rot + alpha3·L_con``; a ``None`` loss is a disabled task."""
    if any(a < 0 for a in alpha):
        raise ContractError("scaling factors must be non-negative")
    losses = (l_rec, l_rot, l_con)
    terms = [ag.as_tensor(l) * a for l, a in zip(losses, alpha) if l is not None]
    if not terms:
        raise ContractError("at least one loss term is required")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    weights = [a if l is not None else 0.0 for l, a in zip(losses, alpha)]
    return _breakdown(losses, weights, total)


def uncertainty_total(l_rec, l_rot, l_con, w: UncertaintyWeights) -> LossBreakdown:
    """Learned homoscedastic weighting.

    ``exp(-s1/2)·L_rec + exp(-s2)·L_rot + exp(-s3)·L_con + (s1 + s2 + s3)/2``.
    The l1 reconstruction term uses a Laplace likelihood, hence ``1/alpha``
    rather than ``1/alpha^2``. Disabled tasks (``None``) contribute neither a
    term nor a regulariser, so their ``s`` receives no gradient.
    """
    s1, s2, s3 = w.s
    scales = ((l_rec, s1, 0.5), (l_rot, s2, 1.0), (l_con, s3, 1.0))
    total = None
    weights = []
    for loss, s, k in scales:
        if loss is None:
            weights.append(0.0)
            continue
        loss = ag.as_tensor(loss)
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("non-finite loss passed to uncertainty_total")
        scale = ag.exp(s * -k)
        term = scale * loss + s * 0.5
        total = term if total is None else total + term
        weights.append(float(np.exp(-k * float(s.data))))
    if total is None:
        raise ContractError("at least one loss term is required")
    return _breakdown((l_rec, l_rot, l_con), weights, total)
