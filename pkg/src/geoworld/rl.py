"""Offline downstream RL: double DQN on raw states or on frozen world-model latents.

The latent agents see only a fixed dataset.  Their training set is augmented
with one imagined step for every action from every recorded state, produced by
the frozen transition and reward heads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .envs import TabularMDP, TransitionRecord, _bfs_distance
from .errors import ContractError, InvalidArgument, NumericalError
from .geometry import pairwise_distance
from .model import ModelBundle, encode_all, featurize, init_mlp, predict_next, predict_reward
from .training import RMSPropMomentum, clip_gradients

log = logging.getLogger(__name__)

RL_COLUMNS = ("seed", "step", "return", "running_avg")


class LatentTransition(NamedTuple):
    z: np.ndarray
    a: int
    r: float
    z_next: np.ndarray
    synthetic: bool
    done: bool


@dataclass(frozen=True)
class DDQNConfig:
    gamma: float = 0.95
    batch_size: int = 64
    learning_rate: float = 1e-4
    steps: int = 20_000
    sync_interval: int = 500
    hidden: tuple = (64, 64)
    clip_norm: float = 0.5
    synthetic_weight: float = 1.0
    seed: int = 0
    eval_interval: int = 20
    max_steps: int = 50
    window: int = 100

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidArgument("gamma must lie in [0, 1]")
        for name in ("batch_size", "steps", "sync_interval", "eval_interval", "max_steps", "window"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.synthetic_weight < 0:
            raise InvalidArgument("synthetic_weight must be >= 0")


@dataclass
class QNetwork:
    params: Dict[str, np.ndarray]
    target: Dict[str, np.ndarray]
    input_dim: int
    n_actions: int
    hidden: tuple

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def q_values(self, X, target: bool = False) -> np.ndarray:
        P = self.target if target else self.params
        h = np.atleast_2d(np.asarray(X, dtype=np.float64))
        for i in range(self.n_layers):
            h = h @ P[f"q.W{i}"] + P[f"q.b{i}"]
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h


def init_qnet(input_dim: int, n_actions: int, hidden=(64, 64), seed: int = 0) -> QNetwork:
    rng = np.random.default_rng(seed)
    params = init_mlp(rng, "q", [input_dim, *hidden, n_actions])
    return QNetwork(params, {k: v.copy() for k, v in params.items()}, input_dim, n_actions, tuple(hidden))


# ------------------------------------------------------------------ data


def _state_latents(bundle: ModelBundle, mdp: TabularMDP) -> np.ndarray:
    return encode_all(bundle, mdp.encodings)


def done_classifier(bundle: ModelBundle, mdp: TabularMDP, records: Sequence[TransitionRecord]):
    """Nearest-neighbour terminal predictor for imagined next latents.

    Reference points are the latents of every state that appears in the
    dataset, labelled terminal when the dataset shows an episode ending there.
    No environment query is made beyond what the records contain.
    """
    seen, term = {}, set()
    for rec in records:
        seen.setdefault(rec.s, None)
        seen.setdefault(rec.s_next, None)
        if rec.s_next in mdp.terminal:
            term.add(rec.s_next)
    states = np.array(sorted(seen), dtype=np.int64)
    refs = encode_all(bundle, mdp.encodings[states])
    labels = np.array([s in term for s in states])

    def predict(z) -> np.ndarray:
        D = pairwise_distance(bundle.space, np.atleast_2d(z), refs, "L2")
        return labels[np.argmin(D, axis=1)]

    return predict


def augment_synthetic(records: Sequence[TransitionRecord], bundle: ModelBundle, mdp: TabularMDP) -> List[LatentTransition]:
    """Real latent tuples plus one imagined tuple per action for every record."""
    if len(records) == 0:
        raise InvalidArgument("empty dataset")
    s = np.array([r.s for r in records], dtype=np.int64)
    s2 = np.array([r.s_next for r in records], dtype=np.int64)
    Z = encode_all(bundle, mdp.encodings[s])
    Z2 = encode_all(bundle, mdp.encodings[s2])
    is_done = done_classifier(bundle, mdp, records)
    n = len(records)
    syn = {}
    for a in range(mdp.n_actions):
        acts = np.full(n, a)
        zn = predict_next(bundle, Z, acts)
        syn[a] = (zn, predict_reward(bundle, Z, acts), is_done(zn))
    out = []
    for i, rec in enumerate(records):
        out.append(LatentTransition(Z[i], rec.a, float(rec.r), Z2[i], False, rec.s_next in mdp.terminal))
        for a in range(mdp.n_actions):
            zn, rh, dn = syn[a]
            out.append(LatentTransition(Z[i], a, float(rh[i]), zn[i], True, bool(dn[i])))
    return out


def raw_tuples(records: Sequence[TransitionRecord], mdp: TabularMDP) -> List[LatentTransition]:
    """Dataset records as tuples over one-hot state encodings (no augmentation)."""
    return [
        LatentTransition(mdp.encodings[r.s], r.a, float(r.r), mdp.encodings[r.s_next], False, r.s_next in mdp.terminal)
        for r in records
    ]


# ------------------------------------------------------------------ training


def _q_taped(P, X, n_layers):
    h = X
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, P[f"q.W{i}"]), P[f"q.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def ddqn_targets(qnet: QNetwork, X2, r, done, gamma):
    """``r + gamma * Q_target(x', argmax_a Q_online(x', a))``, zero bootstrap when done."""
    a_star = np.argmax(qnet.q_values(X2), axis=1)
    q_t = qnet.q_values(X2, target=True)[np.arange(len(a_star)), a_star]
    return r + gamma * (1.0 - done) * q_t


@dataclass
class RLCurve:
    steps: List[int] = field(default_factory=list)
    returns: List[float] = field(default_factory=list)

    def running_average(self, window: int) -> List[float]:
        out, lo = [], 0
        for i, step in enumerate(self.steps):
            while self.steps[lo] <= step - window:
                lo += 1
            out.append(float(np.mean(self.returns[lo : i + 1])))
        return out


def ddqn_train(
    tuples: Sequence[LatentTransition],
    config: DDQNConfig,
    input_fn,
    evaluate=None,
) -> tuple:
    """Fit a double-DQN on a fixed tuple set; returns ``(QNetwork, RLCurve)``.

    ``input_fn`` maps a stacked array of states (latents or one-hot rows) to
    network inputs.  ``evaluate(qnet) -> float`` is called every
    ``eval_interval`` steps when given.
    """
    if len(tuples) == 0:
        raise InvalidArgument("no training tuples")
    X = input_fn(np.stack([t.z for t in tuples]))
    X2 = input_fn(np.stack([t.z_next for t in tuples]))
    A = np.array([t.a for t in tuples], dtype=np.int64)
    R = np.array([t.r for t in tuples], dtype=np.float64)
    done = np.array([t.done for t in tuples], dtype=np.float64)
    W = np.where([t.synthetic for t in tuples], config.synthetic_weight, 1.0)
    n_actions = int(A.max()) + 1 if len(A) else 0
    n_actions = max(n_actions, getattr(input_fn, "n_actions", n_actions))
    qnet = init_qnet(X.shape[1], n_actions, config.hidden, config.seed)
    opt = RMSPropMomentum(qnet.params, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    curve = RLCurve()
    for step in range(1, config.steps + 1):
        if (step - 1) % config.sync_interval == 0:
            qnet.target = {k: v.copy() for k, v in qnet.params.items()}
        idx = rng.integers(0, len(tuples), size=config.batch_size)
        y = ddqn_targets(qnet, X2[idx], R[idx], done[idx], config.gamma)
        w = W[idx]
        tape = ad.Tape()
        P = tape.params_from(qnet.params)
        q = ad.gather2d(_q_taped(P, tape.const(X[idx]), qnet.n_layers), np.arange(len(idx)), A[idx])
        err = ad.sub(q, tape.const(y))
        loss = ad.scale(ad.sum_(ad.mul(ad.square(err), tape.const(w))), 1.0 / max(w.sum(), 1e-12))
        grads = ad.backward(tape, loss)
        if config.clip_norm:
            grads = clip_gradients(grads, config.clip_norm)
        qnet.params = opt.step(qnet.params, grads)
        if evaluate is not None and step % config.eval_interval == 0:
            curve.steps.append(step)
            curve.returns.append(float(evaluate(qnet)))
    return qnet, curve


# ------------------------------------------------------------------ evaluation


def greedy_returns(mdp: TabularMDP, q_table: np.ndarray, max_steps: int, starts=None) -> np.ndarray:
    """Undiscounted return of the greedy policy of ``q_table`` from each start."""
    q = np.where(mdp.valid, q_table, -np.inf)
    policy = np.argmax(q, axis=1)
    starts = mdp.initial_states if starts is None else starts
    out = []
    for s0 in starts:
        s, total = int(s0), 0.0
        for _ in range(max_steps):
            if s in mdp.terminal:
                break
            s, r, _ = mdp.step(s, int(policy[s]))
            total += r
        out.append(total)
    return np.array(out)


def state_inputs(mdp: TabularMDP, bundle: Optional[ModelBundle]) -> np.ndarray:
    """Q-network inputs for every state: one-hot rows, or featurized latents."""
    if bundle is None:
        return mdp.encodings
    return featurize(bundle, _state_latents(bundle, mdp))


def evaluate_policy(mdp: TabularMDP, bundle: Optional[ModelBundle], qnet: QNetwork, max_steps: int = 50) -> dict:
    rets = greedy_returns(mdp, qnet.q_values(state_inputs(mdp, bundle)), max_steps)
    se = float(rets.std(ddof=1) / np.sqrt(len(rets))) if len(rets) > 1 else 0.0
    return {"mean": float(rets.mean()), "stderr": se, "returns": rets}


# ------------------------------------------------------------------ oracles


def value_iteration(mdp: TabularMDP, gamma: Optional[float] = None, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q table; terminal states have value 0, invalid actions -inf."""
    gamma = mdp.gamma if gamma is None else gamma
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument("value iteration needs gamma in [0, 1)")
    term = np.zeros(mdp.n_states, dtype=bool)
    term[list(mdp.terminal)] = True
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.reward + gamma * np.where(term[mdp.next_state], 0.0, V[mdp.next_state])
        Q = np.where(mdp.valid, Q, -np.inf)
        V_new = np.where(term, 0.0, Q.max(axis=1))
        if np.max(np.abs(V_new - V)) < tol:
            return Q
        V = V_new
    raise NumericalError("value_iteration", "did not converge")


def shortest_path_lengths(mdp: TabularMDP) -> np.ndarray:
    """Steps from every state to the nearest terminal state (BFS on reversed edges)."""
    if not mdp.terminal:
        raise ContractError("MDP has no terminal states")
    rev = [[] for _ in range(mdp.n_states)]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            if mdp.valid[s, a] and s not in mdp.terminal:
                rev[mdp.next_state[s, a]].append(s)
    dist = np.full(mdp.n_states, np.inf)
    frontier = sorted(mdp.terminal)
    for s in frontier:
        dist[s] = 0
    while frontier:
        nxt = []
        for s in frontier:
            for p in rev[s]:
                if dist[p] == np.inf:
                    dist[p] = dist[s] + 1
                    nxt.append(p)
        frontier = nxt
    return dist


def optimal_return(mdp: TabularMDP) -> float:
    """Mean over initial states of the best achievable undiscounted return."""
    return float(-np.mean(shortest_path_lengths(mdp)[list(mdp.initial_states)]))


def reachable_from(mdp: TabularMDP, sources) -> np.ndarray:
    return np.isfinite(_bfs_distance(mdp.next_state, mdp.valid, sources))


# ------------------------------------------------------------------ agents


AGENTS = ("ddqn", "ddqn+awm", "ddqn+awm+priors")


def run_agent(mdp: TabularMDP, records: Sequence[TransitionRecord], bundle: Optional[ModelBundle], config: DDQNConfig):
    """Train one agent and return ``(qnet, rows)`` with rows for ``rl_returns.csv``.

    ``bundle=None`` trains the raw-state baseline on the real records only.
    """
    if bundle is None:
        tuples = raw_tuples(records, mdp)

        def input_fn(S):
            return S

    else:
        tuples = augment_synthetic(records, bundle, mdp)

        def input_fn(Z):
            return featurize(bundle, Z)

    input_fn.n_actions = mdp.n_actions
    table_inputs = state_inputs(mdp, bundle)

    def evaluate(qnet):
        return greedy_returns(mdp, qnet.q_values(table_inputs), config.max_steps).mean()

    qnet, curve = ddqn_train(tuples, config, input_fn, evaluate)
    avg = curve.running_average(config.window)
    rows = [
        {"seed": config.seed, "step": st, "return": ret, "running_avg": ra}
        for st, ret, ra in zip(curve.steps, curve.returns, avg)
    ]
    return qnet, rows
