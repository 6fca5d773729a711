"""Deterministic tabular MDPs with known symmetries, plus data collection."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgument

ORIENTATIONS = ("N", "E", "S", "W")
# unit step per orientation, y grows northwards
_HEADING = {0: (0, 1), 1: (1, 0), 2: (0, -1), 3: (-1, 0)}


@dataclass(frozen=True, eq=False)
class TabularMDP:
    name: str
    next_state: np.ndarray  # (n_states, n_actions) int
    reward: np.ndarray  # (n_states, n_actions) float
    encodings: np.ndarray  # (n_states, encoding_dim) float 0/1
    action_names: Tuple[str, ...]
    label_fields: Tuple[str, ...]
    labels: np.ndarray  # (n_states, len(label_fields)) int
    gamma: float = 1.0
    terminal: frozenset = frozenset()
    initial_states: Tuple[int, ...] = ()
    valid: Optional[np.ndarray] = None  # (n_states, n_actions) bool
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        ns, na = self.next_state.shape
        if self.reward.shape != (ns, na):
            raise InvalidArgument("reward table shape must match next_state")
        if self.next_state.min() < 0 or self.next_state.max() >= ns:
            raise InvalidArgument("next_state holds an out-of-range state index")
        if self.encodings.shape[0] != ns:
            raise InvalidArgument("one encoding per state required")
        if not self.initial_states:
            object.__setattr__(self, "initial_states", tuple(range(ns)))
        if self.valid is None:
            object.__setattr__(self, "valid", np.ones((ns, na), dtype=bool))
        for arr in (self.next_state, self.reward, self.encodings, self.labels, self.valid):
            arr.flags.writeable = False

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    @property
    def encoding_dim(self) -> int:
        return self.encodings.shape[1]

    def encode(self, s: int) -> np.ndarray:
        return self.encodings[s]

    def step(self, s: int, a: int) -> Tuple[int, float, bool]:
        s2 = int(self.next_state[s, a])
        return s2, float(self.reward[s, a]), s2 in self.terminal

    def valid_pairs(self) -> List[Tuple[int, int]]:
        return [
            (s, a)
            for s in range(self.n_states)
            if s not in self.terminal
            for a in range(self.n_actions)
            if self.valid[s, a]
        ]

    def label(self, s: int) -> dict:
        return dict(zip(self.label_fields, (int(v) for v in self.labels[s])))


class TransitionRecord(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int


@dataclass(frozen=True)
class DatasetSplit:
    train_pairs: frozenset
    heldout_pairs: frozenset
    seed: int


def _one_hot(i, n):
    v = np.zeros(n)
    v[i] = 1.0
    return v


def _bfs_distance(next_state, valid, sources):
    dist = np.full(next_state.shape[0], np.inf)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        s = q.popleft()
        for a in range(next_state.shape[1]):
            if not valid[s, a]:
                continue
            s2 = next_state[s, a]
            if dist[s2] == np.inf:
                dist[s2] = dist[s] + 1
                q.append(s2)
    return dist


def _goal_tables(next_state, goal_states, initial):
    ns, na = next_state.shape
    reward = np.full((ns, na), -1.0)
    reward[list(goal_states), :] = 0.0
    return reward, frozenset(goal_states), tuple(initial)


def make_passage(n: int) -> TabularMDP:
    """``n`` cells on a ring; action 0 steps right, action 1 steps left."""
    if n < 3:
        raise InvalidArgument(f"passage needs n >= 3, got {n}")
    s = np.arange(n)
    nxt = np.stack([(s + 1) % n, (s - 1) % n], axis=1)
    return TabularMDP(
        name="passage",
        next_state=nxt,
        reward=np.zeros((n, 2)),
        encodings=np.eye(n),
        action_names=("right", "left"),
        label_fields=("pos",),
        labels=s[:, None].copy(),
        params={"n": n},
    )


def torus_index(row, col, n):
    return row * n + col


def make_torus(n: int, goal=None, start=(0, 0)) -> TabularMDP:
    """``n x n`` grid with periodic boundaries; actions ``row+1`` and ``col+1``.

    With ``goal`` set (a ``(row, col)`` cell or ``"auto"``) every step costs
    -1 and the goal cell is terminal.  ``"auto"`` picks the cell farthest from
    ``start``.
    """
    if n < 3:
        raise InvalidArgument(f"torus needs n >= 3, got {n}")
    ns = n * n
    nxt = np.empty((ns, 2), dtype=np.int64)
    enc = np.zeros((ns, 2 * n))
    labels = np.empty((ns, 2), dtype=np.int64)
    for r in range(n):
        for c in range(n):
            i = torus_index(r, c, n)
            nxt[i, 0] = torus_index((r + 1) % n, c, n)
            nxt[i, 1] = torus_index(r, (c + 1) % n, n)
            enc[i, r] = 1.0
            enc[i, n + c] = 1.0
            labels[i] = (r, c)
    kwargs = {}
    if goal is not None:
        initial = [torus_index(*start, n)]
        if goal == "auto":
            dist = _bfs_distance(nxt, np.ones_like(nxt, dtype=bool), initial)
            goal_states = [int(np.argmax(dist))]
        else:
            goal_states = [torus_index(goal[0], goal[1], n)]
        reward, terminal, init = _goal_tables(nxt, goal_states, initial)
        kwargs = dict(reward=reward, terminal=terminal, initial_states=init, gamma=0.95)
    else:
        kwargs = dict(reward=np.zeros((ns, 2)))
    return TabularMDP(
        name="torus",
        next_state=nxt,
        encodings=enc,
        action_names=("row", "col"),
        label_fields=("row", "col"),
        labels=labels,
        params={"n": n, "goal": goal},
        **kwargs,
    )


def grid_index(x, y, o, n):
    return (x * n + y) * 4 + o


def make_grid_orient(n: int, goal=None, wall_mode: str = "selfloop", start=(0, 0)) -> TabularMDP:
    """Top-down ``n x n`` grid with orientation; actions forward and turn-right.

    Forward into a wall is a self-loop.  With ``wall_mode="exclude"`` those
    blocked moves are additionally marked invalid, so neither data collection
    nor splits use them.  ``goal`` is a cell ``(x, y)`` or ``"auto"``; all four
    orientations at that cell are terminal.
    """
    if n < 2:
        raise InvalidArgument(f"grid needs n >= 2, got {n}")
    if wall_mode not in ("selfloop", "exclude"):
        raise InvalidArgument(f"wall_mode must be 'selfloop' or 'exclude', got {wall_mode!r}")
    ns = 4 * n * n
    nxt = np.empty((ns, 2), dtype=np.int64)
    valid = np.ones((ns, 2), dtype=bool)
    enc = np.zeros((ns, 2 * n + 4))
    labels = np.empty((ns, 3), dtype=np.int64)
    for x in range(n):
        for y in range(n):
            for o in range(4):
                i = grid_index(x, y, o, n)
                dx, dy = _HEADING[o]
                fx, fy = x + dx, y + dy
                if 0 <= fx < n and 0 <= fy < n:
                    nxt[i, 0] = grid_index(fx, fy, o, n)
                else:
                    nxt[i, 0] = i
                    valid[i, 0] = wall_mode == "selfloop"
                nxt[i, 1] = grid_index(x, y, (o + 1) % 4, n)
                enc[i, x] = 1.0
                enc[i, n + y] = 1.0
                enc[i, 2 * n + o] = 1.0
                labels[i] = (x, y, o)
    kwargs = {}
    if goal is not None:
        initial = [grid_index(start[0], start[1], o, n) for o in range(4)]
        if goal == "auto":
            dist = _bfs_distance(nxt, valid, initial)
            cell_dist = dist.reshape(n * n, 4).min(axis=1)
            cell = int(np.argmax(cell_dist))
            goal = (cell // n, cell % n)
        goal_states = [grid_index(goal[0], goal[1], o, n) for o in range(4)]
        reward, terminal, init = _goal_tables(nxt, goal_states, initial)
        kwargs = dict(reward=reward, terminal=terminal, initial_states=init, gamma=0.95)
    else:
        kwargs = dict(reward=np.zeros((ns, 2)))
    return TabularMDP(
        name="grid_orient",
        next_state=nxt,
        encodings=enc,
        action_names=("forward", "turn_right"),
        label_fields=("x", "y", "orient"),
        labels=labels,
        valid=valid,
        params={"n": n, "goal": list(goal) if isinstance(goal, tuple) else goal, "wall_mode": wall_mode},
        **kwargs,
    )


ENV_BUILDERS = {
    "passage": make_passage,
    "torus": make_torus,
    "grid_orient": make_grid_orient,
}


def make_env(name: str, **kwargs) -> TabularMDP:
    try:
        builder = ENV_BUILDERS[name]
    except KeyError:
        raise InvalidArgument(f"unknown environment {name!r}") from None
    return builder(**kwargs)


def collect_random(
    mdp: TabularMDP,
    episodes: int,
    horizon: int,
    seed: int,
    heldout: Optional[frozenset] = None,
    starts: Optional[Sequence[int]] = None,
) -> List[TransitionRecord]:
    """Roll the uniform random policy; fully determined by ``seed``.

    Actions whose ``(s, a)`` pair is held out (or invalid) are never chosen;
    the policy samples uniformly among the remaining ones.  An episode ends
    early at a terminal state or when no action is allowed.
    """
    if horizon < 1:
        raise InvalidArgument("horizon must be >= 1")
    heldout = heldout or frozenset()
    rng = np.random.default_rng(seed)
    starts = np.asarray(starts if starts is not None else mdp.initial_states, dtype=np.int64)
    records = []
    for _ in range(episodes):
        s = int(starts[rng.integers(len(starts))])
        for _ in range(horizon):
            if s in mdp.terminal:
                break
            allowed = [a for a in range(mdp.n_actions) if mdp.valid[s, a] and (s, a) not in heldout]
            if not allowed:
                break
            a = allowed[int(rng.integers(len(allowed)))]
            s2, r, _ = mdp.step(s, a)
            records.append(TransitionRecord(s, a, r, s2))
            s = s2
    return records


def collect_dataset(mdp, transitions, horizon, seed, heldout=None, starts=None):
    """Collect roughly ``transitions`` records in episodes of ``horizon`` steps."""
    episodes = max(1, math.ceil(transitions / horizon))
    return collect_random(mdp, episodes, horizon, seed, heldout=heldout, starts=starts)


def split_transitions(mdp: TabularMDP, holdout_frac: float, seed: int) -> DatasetSplit:
    if not 0.0 <= holdout_frac < 1.0:
        raise InvalidArgument(f"holdout_frac must lie in [0, 1), got {holdout_frac}")
    pairs = mdp.valid_pairs()
    n_hold = int(math.floor(holdout_frac * len(pairs) + 0.5))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    held = frozenset(pairs[i] for i in order[:n_hold])
    train = frozenset(pairs) - held
    for a in range(mdp.n_actions):
        if not any(p[1] == a for p in train):
            raise InvalidArgument(
                f"holdout_frac={holdout_frac} leaves no training pair for action {a}"
            )
    return DatasetSplit(train, held, seed)


def records_to_arrays(records: Sequence[TransitionRecord]):
    if not records:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64))
    arr = np.array([(r.s, r.a, r.s_next) for r in records], dtype=np.int64)
    rew = np.array([r.r for r in records], dtype=np.float64)
    return arr[:, 0], arr[:, 1], rew, arr[:, 2]


def write_dataset_csv(path, records: Sequence[TransitionRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "a", "r", "s_next"])
        for r in records:
            w.writerow([r.s, r.a, repr(float(r.r)), r.s_next])


def read_dataset_csv(path) -> List[TransitionRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TransitionRecord(int(r["s"]), int(r["a"]), float(r["r"]), int(r["s_next"])) for r in rows]
