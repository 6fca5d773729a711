"""World-model optimisation: minibatch sampling, clipping, RMSProp with momentum."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .envs import DatasetSplit, TabularMDP, TransitionRecord, records_to_arrays
from .errors import InvalidArgument, NumericalError
from .evaluation import ranking_report
from .losses import Batch, LossWeights, total_loss
from .model import ModelBundle, apply_delta_t, delta_t, encode_t, features_t, reward_t

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "total", "infonce", "reward", "volume", "disentangle")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 50_000
    clip_norm: float = 0.5
    seed: int = 0
    eval_interval: int = 1000
    rho: float = 0.99
    momentum: float = 0.9
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.batch_size < 2:
            raise InvalidArgument("batch_size must be >= 2")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if not self.clip_norm > 0:
            raise InvalidArgument("clip_norm must be > 0")

    @property
    def metric(self) -> str:
        return self.weights.metric


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: Dict[str, np.ndarray], clip_norm: float) -> Dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``clip_norm``."""
    if not clip_norm > 0:
        raise InvalidArgument("clip_norm must be > 0")
    g = global_norm(grads)
    if g <= clip_norm:
        return grads
    factor = clip_norm / g
    return {k: v * factor for k, v in grads.items()}


class RMSPropMomentum:
    """``v <- rho v + (1-rho) g^2;  m <- mu m + g / sqrt(v + eps);  p <- p - lr m``."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, rho=0.99, momentum=0.9, eps=1e-8):
        self.lr = lr
        self.rho = rho
        self.momentum = momentum
        self.eps = eps
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.m = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        out = {}
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise InvalidArgument(f"gradient for {k} has shape {g.shape}, param {p.shape}")
            v = self.v[k] = self.rho * self.v[k] + (1.0 - self.rho) * g * g
            m = self.m[k] = self.momentum * self.m[k] + g / np.sqrt(v + self.eps)
            out[k] = p - self.lr * m
        return out


def rmsprop_step(state: RMSPropMomentum, params, grads, lr=None):
    if lr is not None:
        state.lr = lr
    return state.step(params, grads)


@dataclass
class RunArtifacts:
    loss_rows: List[dict] = field(default_factory=list)
    metric_rows: List[dict] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)


def build_batch(bundle: ModelBundle, tape: ad.Tape, P, enc_s, enc_s2, actions, rewards) -> Batch:
    """Forward pass of encoder, transition and reward head for a minibatch."""
    m = enc_s.shape[0]
    Z_all = encode_t(bundle, P, tape.const(np.concatenate([enc_s, enc_s2], axis=0)))
    Z_t = ad.take(Z_all, slice(0, m))
    Z_next = ad.take(Z_all, slice(m, 2 * m))
    feats = features_t(bundle, Z_t)
    D = delta_t(bundle, P, Z_t, actions, feats)
    Z_hat = apply_delta_t(bundle, Z_t, D, actions)
    R_hat = reward_t(bundle, P, Z_t, actions, feats)
    return Batch(Z_t, Z_next, Z_hat, D, R_hat, np.asarray(actions), np.asarray(rewards, dtype=np.float64))


def loss_and_grads(bundle, params, cfg: TrainConfig, enc_s, enc_s2, actions, rewards, entropy_seed=0):
    tape = ad.Tape()
    P = tape.params_from(params)
    batch = build_batch(bundle, tape, P, enc_s, enc_s2, actions, rewards)
    total, breakdown = total_loss(batch, bundle.space, cfg.weights, bundle.mask_matrix, entropy_seed)
    return breakdown, ad.backward(tape, total)


def evaluate_rows(bundle, mdp, split: Optional[DatasetSplit], metric, step, train_pairs=None):
    rows = []
    if split is None:
        return rows
    for name, pairs in (("train", train_pairs or split.train_pairs), ("test", split.heldout_pairs)):
        rep = ranking_report(bundle, mdp, pairs, metric, name, split.seed)
        if rep.empty:
            continue
        row = {"step": step, "split": name}
        row.update(rep.scaled())
        rows.append(row)
    return rows


def train(
    config: TrainConfig,
    dataset: Sequence[TransitionRecord],
    mdp: TabularMDP,
    bundle: ModelBundle,
    split: Optional[DatasetSplit] = None,
) -> tuple:
    """Optimise ``bundle`` on ``dataset``; returns ``(bundle, RunArtifacts)``.

    Each step samples ``batch_size`` records uniformly with replacement.  When a
    ``split`` is given, ranking metrics for its train and held-out pairs are
    logged every ``eval_interval`` steps and after the last step.
    """
    if len(dataset) == 0:
        raise InvalidArgument("empty dataset")
    s, a, r, s2 = records_to_arrays(dataset)
    enc = mdp.encodings
    rng = np.random.default_rng(config.seed)
    params = {k: v.copy() for k, v in bundle.params.items()}
    opt = RMSPropMomentum(params, config.learning_rate, config.rho, config.momentum, config.eps)
    art = RunArtifacts()
    train_pairs = frozenset(zip(s.tolist(), a.tolist()))
    last = None
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(s), size=config.batch_size)
        try:
            breakdown, grads = loss_and_grads(
                bundle, params, config, enc[s[idx]], enc[s2[idx]], a[idx], r[idx], entropy_seed=step
            )
        except NumericalError as exc:
            raise NumericalError(exc.op, f"step {step}: {exc} (last breakdown: {last})") from exc
        if not np.isfinite(breakdown["total"]):
            raise NumericalError("total_loss", f"step {step}: non-finite loss {breakdown}")
        grads = clip_gradients(grads, config.clip_norm)
        art.grad_norms.append(global_norm(grads))
        params = opt.step(params, grads)
        row = {"step": step}
        row.update({k: breakdown[k] for k in LOSS_COLUMNS[1:]})
        art.loss_rows.append(row)
        last = breakdown
        if split is not None and (step % config.eval_interval == 0 or step == config.steps):
            bundle.params = params
            art.metric_rows.extend(evaluate_rows(bundle, mdp, split, config.metric, step, train_pairs))
            log.debug("step %d %s", step, art.metric_rows[-1] if art.metric_rows else "")
    bundle.params = params
    return bundle, art
