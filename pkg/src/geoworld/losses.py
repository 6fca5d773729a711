"""Training objective for the world model.

All losses take tape tensors and return scalar tensors so they can be
back-propagated.  Plain numpy inputs are accepted too (lifted to constants on
a fresh tape), which is handy for evaluating a loss on fixed latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, InvalidArgument
from .geometry import LatentSpaceSpec, metric_code


@dataclass(frozen=True)
class LossWeights:
    temperature: float = 1.0
    hinge: float = 0.5
    entropy_c: float = 1.0
    infonce: float = 1.0
    reward: float = 1.0
    volume: float = 1.0
    disentangle: float = 1.0
    entropy: float = 0.0
    symmetrized: bool = False
    metric: str = "L2"

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be > 0")
        if self.hinge < 0:
            raise InvalidArgument("hinge threshold must be >= 0")
        if not self.entropy_c > 0:
            raise InvalidArgument("entropy constant C must be > 0")
        metric_code(self.metric)


@dataclass
class Batch:
    z_t: ad.Tensor
    z_next: ad.Tensor
    z_hat: ad.Tensor
    delta: ad.Tensor
    r_hat: ad.Tensor  # (M, 1)
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def size(self) -> int:
        return int(self.actions.shape[0])


def _tensors(*xs):
    if any(isinstance(x, ad.Tensor) for x in xs):
        tape = next(x.tape for x in xs if isinstance(x, ad.Tensor))
    else:
        tape = ad.Tape()
    return [x if isinstance(x, ad.Tensor) else tape.const(x) for x in xs]


def rowwise_distance_t(space: LatentSpaceSpec, A, B, metric: str = "L2"):
    """Distance between matching rows of ``A`` and ``B`` (shape ``(n,)``)."""
    A, B = _tensors(A, B)
    diff = ad.sub(A, B)
    if space.has_circle:
        half = np.where(space.circular, 0.5 * space._kmod, 0.0)
        diff = ad.add(ad.wrap_passthrough(ad.add(diff, half), space.moduli), -half)
    if metric_code(metric) == 1:
        return ad.sum_(ad.abs_(diff), axis=1)
    return ad.sqrt(ad.sum_(ad.square(diff), axis=1))


def _group_masks(actions):
    actions = np.asarray(actions)
    n = actions.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    same = actions[:, None] == actions[None, :]
    sizes = same.sum(axis=1)
    # a record alone in its action group contrasts against the whole batch
    if n > 1:
        same[sizes == 1] = True
    groups, inverse, counts = np.unique(actions, return_inverse=True, return_counts=True)
    weights = 1.0 / (len(groups) * counts[inverse])
    return same, weights


def _infonce_from_distances(D, mask, weights, t):
    n = D.shape[0]
    logits = ad.scale(D, -1.0 / t)
    lse = ad.logsumexp(logits, mask)
    diag = np.arange(n)
    pos = ad.gather2d(logits, diag, diag)
    per = ad.sub(lse, pos)
    return ad.sum_(ad.mul(per, per.tape.const(weights)))


def infonce_loss(z_hat, z_next, actions, space: LatentSpaceSpec, metric: str = "L2", t: float = 1.0):
    """Contrastive prediction loss with action-conditioned negatives.

    Record ``i`` scores its prediction against its own next latent (positive)
    and the next latents of the other records sharing its action (negatives).
    The result is the mean over action groups of the per-group mean.
    """
    z_hat, z_next = _tensors(z_hat, z_next)
    mask, weights = _group_masks(actions)
    D = ad.pairwise_distance(z_hat, z_next, space.moduli, space.circular, metric_code(metric))
    return _infonce_from_distances(D, mask, weights, t)


def symmetrized_infonce(z_hat, z_next, actions, space: LatentSpaceSpec, metric: str = "L2", t: float = 1.0):
    """Average of the forward term and the term with roles swapped.

    The second term anchors on each ground-truth next latent and contrasts the
    matching prediction against the other predictions in the action group.
    """
    z_hat, z_next = _tensors(z_hat, z_next)
    mask, weights = _group_masks(actions)
    code = metric_code(metric)
    fwd = ad.pairwise_distance(z_hat, z_next, space.moduli, space.circular, code)
    bwd = ad.pairwise_distance(z_next, z_hat, space.moduli, space.circular, code)
    a = _infonce_from_distances(fwd, mask, weights, t)
    b = _infonce_from_distances(bwd, mask, weights, t)
    return ad.scale(ad.add(a, b), 0.5)


def reward_loss(r_hat, rewards):
    (r_hat,) = _tensors(r_hat)
    target = np.asarray(rewards, dtype=np.float64).reshape(r_hat.shape)
    return ad.mean(ad.square(ad.sub(r_hat, r_hat.tape.const(target))))


def volume_loss(z_next, z_t, space: LatentSpaceSpec, w: float = 0.5):
    """Mean hinge ``max(||z_next - z_t|| - w, 0)`` with wrapped L2 distance."""
    if w < 0:
        raise InvalidArgument("hinge threshold must be >= 0")
    z_next, z_t = _tensors(z_next, z_t)
    dist = rowwise_distance_t(space, z_next, z_t, "L2")
    return ad.mean(ad.relu(ad.add(dist, np.full(dist.shape, -float(w)))))


def disentangle_loss(delta, actions, mask_matrix):
    """Mean over records of the L1 norm of the masked transition components."""
    (delta,) = _tensors(delta)
    mask_matrix = np.asarray(mask_matrix, dtype=np.float64)
    if mask_matrix.ndim != 2 or mask_matrix.shape[1] != delta.shape[1]:
        raise ContractError(
            f"mask matrix {mask_matrix.shape} does not match delta width {delta.shape[1]}"
        )
    actions = np.asarray(actions)
    if actions.size and (actions.min() < 0 or actions.max() >= mask_matrix.shape[0]):
        raise ContractError("action index outside the mask table")
    sel = mask_matrix[actions]
    n = delta.shape[0]
    return ad.scale(ad.sum_(ad.mul(ad.abs_(delta), delta.tape.const(sel))), 1.0 / n)


def entropy_loss(z, space: LatentSpaceSpec, C: float = 1.0, seed: int = 0, n_pairs: Optional[int] = None, metric: str = "L2"):
    """Mean of ``exp(-C * d(z_x, z_y))`` over random distinct pairs of rows."""
    (z,) = _tensors(z)
    n = z.shape[0]
    if n < 2:
        raise ContractError("entropy loss needs at least two latents")
    rng = np.random.default_rng(seed)
    k = n_pairs or n
    i = rng.integers(0, n, size=k)
    j = (i + rng.integers(1, n, size=k)) % n
    dist = rowwise_distance_t(space, ad.take(z, i), ad.take(z, j), metric)
    return ad.mean(ad.exp(ad.scale(dist, -float(C))))


def total_loss(
    batch: Batch,
    space: LatentSpaceSpec,
    weights: LossWeights,
    mask_matrix: np.ndarray,
    entropy_seed: int = 0,
) -> Tuple[ad.Tensor, Dict[str, float]]:
    """Weighted sum of all active terms and the per-term breakdown.

    Breakdown values are the weighted contributions, so they add up to the
    total.
    """
    nce = symmetrized_infonce if weights.symmetrized else infonce_loss
    terms = {
        "infonce": (weights.infonce, lambda: nce(batch.z_hat, batch.z_next, batch.actions, space, weights.metric, weights.temperature)),
        "reward": (weights.reward, lambda: reward_loss(batch.r_hat, batch.rewards)),
        "volume": (weights.volume, lambda: volume_loss(batch.z_next, batch.z_t, space, weights.hinge)),
        "disentangle": (weights.disentangle, lambda: disentangle_loss(batch.delta, batch.actions, mask_matrix)),
        "entropy": (
            weights.entropy,
            lambda: entropy_loss(
                ad.concat([batch.z_t, batch.z_next], axis=0), space, weights.entropy_c, entropy_seed, metric=weights.metric
            ),
        ),
    }
    total = None
    breakdown = {}
    for name, (wt, make) in terms.items():
        if wt == 0.0:
            if name != "entropy":
                breakdown[name] = 0.0
            continue
        term = ad.scale(make(), wt)
        breakdown[name] = float(term.data)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = batch.z_t.tape.const(0.0)
    breakdown["total"] = float(total.data)
    return total, breakdown
