"""Encoder, latent transition and reward head as tanh MLPs.

Parameters live in a flat ``dict[str, ndarray]`` (``enc.W0``, ``enc.b0``,
``trans.W0`` ...).  The ``*_t`` functions build the forward pass on an
autodiff tape for training; the plain functions (``encode``, ``delta`` ...)
evaluate the same graph on constants and return numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, InvalidArgument
from .geometry import LatentSpaceSpec, canonicalize

DEFAULT_ENCODER_HIDDEN = (32, 32)
DEFAULT_TRANSITION_HIDDEN = (32,)
DEFAULT_REWARD_HIDDEN = (32,)


@dataclass
class ModelBundle:
    space: LatentSpaceSpec
    n_actions: int
    input_dim: int
    params: Dict[str, np.ndarray]
    masks: Tuple[frozenset, ...]
    encoder_hidden: Tuple[int, ...] = DEFAULT_ENCODER_HIDDEN
    transition_hidden: Tuple[int, ...] = DEFAULT_TRANSITION_HIDDEN
    reward_hidden: Tuple[int, ...] = DEFAULT_REWARD_HIDDEN
    featurize: str = "periodic"
    hard_mask: bool = False
    per_action_nets: bool = False
    _mask_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        validate_masks(self.masks, self.space.total_dim, self.n_actions)
        m = np.zeros((self.n_actions, self.space.total_dim))
        for a, idx in enumerate(self.masks):
            m[a, sorted(idx)] = 1.0
        self._mask_matrix = m

    @property
    def latent_dim(self) -> int:
        return self.space.total_dim

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.space, self.featurize)

    @property
    def mask_matrix(self) -> np.ndarray:
        """``(n_actions, d)`` 0/1 matrix; row ``a`` marks the coordinates in sigma(a)."""
        return self._mask_matrix

    def spec(self) -> dict:
        return {
            "latent": self.space.to_config(),
            "n_actions": self.n_actions,
            "input_dim": self.input_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "transition_hidden": list(self.transition_hidden),
            "reward_hidden": list(self.reward_hidden),
            "featurize": self.featurize,
            "hard_mask": self.hard_mask,
            "per_action_nets": self.per_action_nets,
            "masks": [sorted(m) for m in self.masks],
        }

    @classmethod
    def from_spec(cls, spec: dict, params: Dict[str, np.ndarray]) -> "ModelBundle":
        return cls(
            space=LatentSpaceSpec.from_config(spec["latent"]),
            n_actions=spec["n_actions"],
            input_dim=spec["input_dim"],
            params=params,
            masks=tuple(frozenset(m) for m in spec["masks"]),
            encoder_hidden=tuple(spec["encoder_hidden"]),
            transition_hidden=tuple(spec["transition_hidden"]),
            reward_hidden=tuple(spec["reward_hidden"]),
            featurize=spec["featurize"],
            hard_mask=spec["hard_mask"],
            per_action_nets=spec["per_action_nets"],
        )


def validate_masks(masks, d, n_actions):
    if len(masks) != n_actions:
        raise ContractError(f"need one mask per action ({n_actions}), got {len(masks)}")
    for a, m in enumerate(masks):
        for i in m:
            if not 0 <= i < d:
                raise ContractError(f"mask for action {a} names coordinate {i} outside 0..{d - 1}")
    if masks and frozenset.intersection(*map(frozenset, masks)):
        raise ContractError("masks of all actions share a coordinate; no action could move it")


def feature_dim(space: LatentSpaceSpec, featurize: str = "periodic") -> int:
    if featurize == "raw":
        return space.total_dim
    nc = int(space.circular.sum())
    return 2 * nc + (space.total_dim - nc)


def default_masks(env_name: str, space: LatentSpaceSpec, n_actions: int) -> Tuple[frozenset, ...]:
    """Action-invariance masks for the built-in environments.

    torus on a 2-circle space: ``row`` keeps coordinate 1, ``col`` keeps 0.
    grid_orient on circle x R^2: ``forward`` keeps the angle (0), ``turn_right``
    keeps the position (1, 2).  Everything else gets empty masks.
    """
    empty = tuple(frozenset() for _ in range(n_actions))
    circ = space.circle_indices()
    euc = space.euclid_indices()
    if env_name == "torus" and len(circ) == 2 and space.total_dim == 2:
        return (frozenset({int(circ[1])}), frozenset({int(circ[0])}))
    if env_name == "grid_orient" and len(circ) == 1 and len(euc) >= 1:
        return (frozenset({int(circ[0])}), frozenset(int(i) for i in euc))
    return empty


def _layer_sizes(n_in, hidden, n_out):
    return [n_in, *hidden, n_out]


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_mlp(rng, prefix, sizes) -> Dict[str, np.ndarray]:
    out = {}
    for i in range(len(sizes) - 1):
        out[f"{prefix}.W{i}"] = _glorot(rng, sizes[i], sizes[i + 1])
        out[f"{prefix}.b{i}"] = np.zeros(sizes[i + 1])
    return out


def init_params(
    space: LatentSpaceSpec,
    n_actions: int,
    input_dim: int,
    seed: int,
    masks: Optional[Sequence[frozenset]] = None,
    encoder_hidden=DEFAULT_ENCODER_HIDDEN,
    transition_hidden=DEFAULT_TRANSITION_HIDDEN,
    reward_hidden=DEFAULT_REWARD_HIDDEN,
    featurize: str = "periodic",
    hard_mask: bool = False,
    per_action_nets: bool = False,
) -> ModelBundle:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    if featurize not in ("periodic", "raw"):
        raise InvalidArgument(f"featurize must be 'periodic' or 'raw', got {featurize!r}")
    rng = np.random.default_rng(seed)
    d = space.total_dim
    fin = feature_dim(space, featurize) + n_actions
    params = {}
    params.update(init_mlp(rng, "enc", _layer_sizes(input_dim, encoder_hidden, d)))
    if per_action_nets:
        for a in range(n_actions):
            params.update(init_mlp(rng, f"trans{a}", _layer_sizes(fin, transition_hidden, d)))
    else:
        params.update(init_mlp(rng, "trans", _layer_sizes(fin, transition_hidden, d)))
    params.update(init_mlp(rng, "rew", _layer_sizes(fin, reward_hidden, 1)))
    if masks is None:
        masks = tuple(frozenset() for _ in range(n_actions))
    return ModelBundle(
        space=space,
        n_actions=n_actions,
        input_dim=input_dim,
        params=params,
        masks=tuple(frozenset(m) for m in masks),
        encoder_hidden=tuple(encoder_hidden),
        transition_hidden=tuple(transition_hidden),
        reward_hidden=tuple(reward_hidden),
        featurize=featurize,
        hard_mask=hard_mask,
        per_action_nets=per_action_nets,
    )


# ------------------------------------------------------------------ taped forward


def mlp_t(P, prefix, x, n_layers):
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, P[f"{prefix}.W{i}"]), P[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def encode_t(bundle: ModelBundle, P, X):
    raw = mlp_t(P, "enc", X, len(bundle.encoder_hidden) + 1)
    if not bundle.space.has_circle:
        return raw
    return ad.wrap_passthrough(raw, bundle.space.moduli)


def features_t(bundle: ModelBundle, Z):
    space = bundle.space
    if bundle.featurize == "raw" or not space.has_circle:
        return Z
    circ = space.circle_indices()
    parts = []
    zc = ad.take(Z, circ, axis=1)
    parts.append(ad.cos(zc))
    parts.append(ad.sin(zc))
    euc = space.euclid_indices()
    if len(euc):
        parts.append(ad.take(Z, euc, axis=1))
    return ad.concat(parts, axis=1)


def _action_input(bundle, tape, feats, actions):
    onehot = np.eye(bundle.n_actions)[np.asarray(actions)]
    return ad.concat([feats, tape.const(onehot)], axis=1)


def delta_t(bundle: ModelBundle, P, Z, actions, feats=None):
    """Transition vector for each row of ``Z`` under the matching action."""
    tape = Z.tape
    if feats is None:
        feats = features_t(bundle, Z)
    inp = _action_input(bundle, tape, feats, actions)
    n_layers = len(bundle.transition_hidden) + 1
    if not bundle.per_action_nets:
        return mlp_t(P, "trans", inp, n_layers)
    onehot = np.eye(bundle.n_actions)[np.asarray(actions)]
    d = bundle.latent_dim
    out = None
    for a in range(bundle.n_actions):
        sel = np.repeat(onehot[:, a : a + 1], d, axis=1)
        term = ad.mul(mlp_t(P, f"trans{a}", inp, n_layers), tape.const(sel))
        out = term if out is None else ad.add(out, term)
    return out


def apply_delta_t(bundle: ModelBundle, Z, D, actions):
    if bundle.hard_mask:
        keep = 1.0 - bundle.mask_matrix[np.asarray(actions)]
        D = ad.mul(D, Z.tape.const(keep))
    S = ad.add(Z, D)
    if not bundle.space.has_circle:
        return S
    return ad.wrap_passthrough(S, bundle.space.moduli)


def reward_t(bundle: ModelBundle, P, Z, actions, feats=None):
    tape = Z.tape
    if feats is None:
        feats = features_t(bundle, Z)
    inp = _action_input(bundle, tape, feats, actions)
    return mlp_t(P, "rew", inp, len(bundle.reward_hidden) + 1)


# ------------------------------------------------------------------ numpy API


def _const_params(tape, params):
    return {k: tape.const(v) for k, v in params.items()}


def _batch(x, width, what):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != width:
        raise ContractError(f"{what} has width {arr.shape[1]}, expected {width}")
    return arr, single


def _actions(a, n):
    acts = np.atleast_1d(np.asarray(a, dtype=np.int64))
    if acts.size and (acts.min() < 0 or acts.max() >= n):
        raise ContractError(f"action index out of range 0..{n - 1}")
    return acts


def encode(bundle: ModelBundle, s) -> np.ndarray:
    """Latent point(s) for one-hot state vector(s)."""
    X, single = _batch(s, bundle.input_dim, "state encoding")
    tape = ad.Tape()
    Z = encode_t(bundle, _const_params(tape, bundle.params), tape.const(X)).data
    return Z[0] if single else Z


def delta(bundle: ModelBundle, z, a) -> np.ndarray:
    Z, single = _batch(z, bundle.latent_dim, "latent")
    acts = np.broadcast_to(_actions(a, bundle.n_actions), (Z.shape[0],))
    tape = ad.Tape()
    out = delta_t(bundle, _const_params(tape, bundle.params), tape.const(Z), acts).data
    return out[0] if single else out


def predict_next(bundle: ModelBundle, z, a) -> np.ndarray:
    Z, single = _batch(z, bundle.latent_dim, "latent")
    acts = np.broadcast_to(_actions(a, bundle.n_actions), (Z.shape[0],))
    tape = ad.Tape()
    Zt = tape.const(Z)
    D = delta_t(bundle, _const_params(tape, bundle.params), Zt, acts)
    out = apply_delta_t(bundle, Zt, D, acts).data
    if bundle.space.has_circle:
        out = canonicalize(bundle.space, out)
    return out[0] if single else out


def predict_reward(bundle: ModelBundle, z, a):
    Z, single = _batch(z, bundle.latent_dim, "latent")
    acts = np.broadcast_to(_actions(a, bundle.n_actions), (Z.shape[0],))
    tape = ad.Tape()
    out = reward_t(bundle, _const_params(tape, bundle.params), tape.const(Z), acts).data[:, 0]
    return float(out[0]) if single else out


def featurize(bundle: ModelBundle, z) -> np.ndarray:
    """(cos, sin) features for circular coordinates, raw Euclidean ones."""
    Z, single = _batch(z, bundle.latent_dim, "latent")
    tape = ad.Tape()
    out = features_t(bundle, tape.const(Z)).data
    return out[0] if single else out


def encode_all(bundle: ModelBundle, encodings: np.ndarray) -> np.ndarray:
    return encode(bundle, np.atleast_2d(encodings))


def save_bundle(path, bundle: ModelBundle, extra_meta=None):
    meta = {"model": bundle.spec()}
    if extra_meta:
        meta.update(extra_meta)
    ad.save_params(path, bundle.params, meta)


def load_bundle(path) -> ModelBundle:
    params, meta = ad.load_params(path)
    return ModelBundle.from_spec(meta["model"], params)
