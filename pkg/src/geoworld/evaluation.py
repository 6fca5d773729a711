"""Ranking metrics for latent transition predictions, and latent dumps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .envs import DatasetSplit, TabularMDP
from .errors import ContractError
from .geometry import LatentSpaceSpec, embed_torus, metric_code, pairwise_distance
from .model import ModelBundle, encode_all, predict_next


def rank_transition(pred, true_idx: int, candidates, space: LatentSpaceSpec, metric: str = "L2") -> int:
    """1-based rank of candidate ``true_idx`` when sorted by distance to ``pred``.

    Ties count against the true candidate.
    """
    cands = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if not 0 <= true_idx < cands.shape[0]:
        raise ContractError(f"true index {true_idx} is not among {cands.shape[0]} candidates")
    D = pairwise_distance(space, np.atleast_2d(pred), cands, metric)
    return int(_kernels.rank_of_true(D, np.array([true_idx], dtype=np.int64))[0])


def rank_batch(preds, true_idx, candidates, space: LatentSpaceSpec, metric: str = "L2") -> np.ndarray:
    true_idx = np.asarray(true_idx, dtype=np.int64)
    cands = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if true_idx.size and (true_idx.min() < 0 or true_idx.max() >= cands.shape[0]):
        raise ContractError("a true index is not among the candidates")
    D = pairwise_distance(space, preds, cands, metric)
    return _kernels.rank_of_true(D, true_idx)


def hits_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ContractError("hits_at_k of an empty rank list")
    return float(np.mean(ranks <= k))


def mrr(ranks: Sequence[int]) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ContractError("mrr of an empty rank list")
    return float(np.mean(1.0 / ranks))


@dataclass(frozen=True)
class RankingReport:
    split: str
    ranks: Tuple[int, ...] = ()
    seed: Optional[int] = None
    status: str = "ok"
    pairs: Tuple[Tuple[int, int], ...] = field(default=(), repr=False)

    @property
    def empty(self) -> bool:
        return not self.ranks

    @property
    def h1(self) -> float:
        return hits_at_k(self.ranks, 1) if self.ranks else float("nan")

    @property
    def h5(self) -> float:
        return hits_at_k(self.ranks, 5) if self.ranks else float("nan")

    @property
    def mrr(self) -> float:
        return mrr(self.ranks) if self.ranks else float("nan")

    def scaled(self) -> dict:
        """Metrics multiplied by 100, the way results tables report them."""
        return {"H@1": 100.0 * self.h1, "H@5": 100.0 * self.h5, "MRR": 100.0 * self.mrr}


def ranking_report(
    bundle: ModelBundle,
    mdp: TabularMDP,
    pairs: Iterable[Tuple[int, int]],
    metric: str = "L2",
    split: str = "test",
    seed: Optional[int] = None,
) -> RankingReport:
    pairs = tuple(sorted(pairs))
    if not pairs:
        return RankingReport(split=split, seed=seed, status="no holdout" if split == "test" else "empty")
    z_all = encode_all(bundle, mdp.encodings)
    s = np.array([p[0] for p in pairs], dtype=np.int64)
    a = np.array([p[1] for p in pairs], dtype=np.int64)
    preds = predict_next(bundle, z_all[s], a)
    true = mdp.next_state[s, a]
    ranks = rank_batch(preds, true, z_all, bundle.space, metric)
    return RankingReport(split=split, ranks=tuple(int(r) for r in ranks), seed=seed, pairs=pairs)


def generalization_eval(
    bundle: ModelBundle, mdp: TabularMDP, split: DatasetSplit, metric: str = "L2"
) -> RankingReport:
    """Rank every held-out ``(s, a)`` prediction against all state latents."""
    return ranking_report(bundle, mdp, split.heldout_pairs, metric, "test", split.seed)


def latent_dump(bundle: ModelBundle, mdp: TabularMDP) -> List[dict]:
    """One row per state: labels, latent coordinates and torus embedding if any."""
    z = encode_all(bundle, mdp.encodings)
    emb = embed_torus(bundle.space, z) if bundle.space.is_torus2 else None
    rows = []
    for s in range(mdp.n_states):
        row = {"state": s}
        row.update(mdp.label(s))
        for i in range(z.shape[1]):
            row[f"z{i}"] = float(z[s, i])
        if emb is not None:
            row.update({"ex": float(emb[s, 0]), "ey": float(emb[s, 1]), "ez": float(emb[s, 2])})
        rows.append(row)
    return rows
