"""Experiment runner: expands a config into seeded cells and writes their artifacts.

Layout under ``<out>/<name>/``::

    worldmodel/<variant>/seed_<k>/   losses.csv metrics.csv latents.csv run_meta.json checkpoint.json
    rl/wm/<variant>/seed_<k>/        same files, trained on the goal task's offline dataset
    rl/agents/<agent>/seed_<k>/      rl_returns.csv run_meta.json
    summary.csv                      final ranking metrics, mean and std over seeds
    rl_summary.csv                   final returns per agent plus the optimal return

Cells are independent processes' worth of work; a failing cell writes
``error.txt`` and never stops its siblings.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, _kernels, envs, model, rl
from .config import merged_section
from .evaluation import latent_dump
from .geometry import LatentSpaceSpec
from .losses import LossWeights
from .training import LOSS_COLUMNS, TrainConfig, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "split", "H@1", "H@5", "MRR")
SEED_OFFSET_ENV = "GEOWORLD_SEED_OFFSET"


@dataclass(frozen=True)
class Cell:
    kind: str  # "worldmodel", "rl_wm" or "rl_agent"
    variant: str
    seed: int
    out_dir: str
    depends_on: Optional[str] = None  # world-model cell directory for latent agents


@dataclass(frozen=True)
class ExperimentPlan:
    cells: tuple
    out_root: str
    mode: str

    def phase(self, kinds) -> List[Cell]:
        return [c for c in self.cells if c.kind in kinds]


def seed_list(base: int, count: int) -> List[int]:
    offset = int(os.environ.get(SEED_OFFSET_ENV, "0") or 0)
    return [base + offset + i for i in range(count)]


def build_plan(cfg: dict, seeds: int = 1, mode: str = "worldmodel", out: Optional[str] = None) -> ExperimentPlan:
    if mode not in ("worldmodel", "rl", "both"):
        raise ValueError(f"mode must be worldmodel, rl or both, got {mode!r}")
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    root = Path(out if out is not None else cfg["output_dir"]) / cfg["name"]
    cells = []
    for seed in seed_list(cfg["seed"], seeds):
        if mode in ("worldmodel", "both"):
            for v in cfg["variants"]:
                cells.append(Cell("worldmodel", v["name"], seed, str(root / "worldmodel" / v["name"] / f"seed_{seed}")))
        if mode in ("rl", "both"):
            cells.append(Cell("rl_agent", "ddqn", seed, str(root / "rl" / "agents" / "ddqn" / f"seed_{seed}")))
            for v in cfg["variants"]:
                wm = str(root / "rl" / "wm" / v["name"] / f"seed_{seed}")
                cells.append(Cell("rl_wm", v["name"], seed, wm))
                agent = f"ddqn+{v['name']}"
                cells.append(Cell("rl_agent", agent, seed, str(root / "rl" / "agents" / agent / f"seed_{seed}"), wm))
    dirs = [c.out_dir for c in cells]
    assert len(set(dirs)) == len(dirs), "cell directories must be unique"
    return ExperimentPlan(tuple(cells), str(root), mode)


# ------------------------------------------------------------------ building blocks


def _variant(cfg, name):
    for v in cfg["variants"]:
        if v["name"] == name:
            return v
    raise KeyError(name)


def make_mdp(cfg: dict, goal: bool = False) -> envs.TabularMDP:
    kwargs = {"n": cfg["n"]}
    if cfg["env"] == "grid_orient":
        kwargs["wall_mode"] = cfg["wall_mode"]
    if goal:
        if cfg["env"] == "passage":
            raise ValueError("the passage environment has no goal task")
        g = cfg["rl"]["goal"]
        kwargs["goal"] = tuple(g) if g else "auto"
    return envs.make_env(cfg["env"], **kwargs)


def make_bundle(cfg: dict, variant: dict, mdp: envs.TabularMDP, seed: int) -> model.ModelBundle:
    space = LatentSpaceSpec.from_config(variant["latent"])
    masks = variant["masks"]
    if masks == "default":
        masks = model.default_masks(cfg["env"], space, mdp.n_actions)
    elif masks == "none":
        masks = None
    else:
        masks = tuple(frozenset(m) for m in masks)
    mc = merged_section(cfg, variant, "model")
    return model.init_params(
        space, mdp.n_actions, mdp.encoding_dim, seed, masks=masks,
        encoder_hidden=tuple(mc["encoder_hidden"]),
        transition_hidden=tuple(mc["transition_hidden"]),
        reward_hidden=tuple(mc["reward_hidden"]),
        featurize=mc["featurize"], hard_mask=mc["hard_mask"], per_action_nets=mc["per_action_nets"],
    )


def train_config(cfg: dict, variant: dict, seed: int) -> TrainConfig:
    lc = merged_section(cfg, variant, "losses")
    weights = LossWeights(
        temperature=float(lc["temperature"]), hinge=float(lc["hinge"]), entropy_c=float(lc["entropy_c"]),
        infonce=float(lc["infonce"]), reward=float(lc["reward"]), volume=float(lc["volume"]),
        disentangle=float(lc["disentangle"]), entropy=float(lc["entropy"]),
        symmetrized=bool(lc["symmetrized"]), metric=lc["metric"],
    )
    t, o = cfg["train"], cfg["optimizer"]
    return TrainConfig(
        learning_rate=float(t["learning_rate"]), batch_size=t["batch_size"], steps=t["steps"],
        clip_norm=float(t["clip_norm"]), seed=seed, eval_interval=cfg["eval_interval"],
        rho=float(o["rho"]), momentum=float(o["momentum"]), eps=float(o["eps"]), weights=weights,
    )


def ddqn_config(cfg: dict, seed: int) -> rl.DDQNConfig:
    r = cfg["rl"]
    return rl.DDQNConfig(
        gamma=float(r["gamma"]), batch_size=r["batch_size"], learning_rate=float(r["learning_rate"]),
        steps=r["steps"], sync_interval=r["sync_interval"], hidden=tuple(r["hidden"]),
        clip_norm=float(r["clip_norm"]), synthetic_weight=float(r["synthetic_weight"]), seed=seed,
        eval_interval=r["eval_interval"], max_steps=r["max_steps"], window=r["window"],
    )


def rl_dataset(cfg: dict, mdp: envs.TabularMDP, seed: int):
    """Offline data for the goal task: random-policy rollouts avoiding held-out pairs.

    Episodes start from every non-terminal state so that the dataset can
    reach the requested share of valid pairs.
    """
    r = cfg["rl"]
    split = envs.split_transitions(mdp, r["holdout_frac"], seed)
    starts = [s for s in range(mdp.n_states) if s not in mdp.terminal]
    records = envs.collect_dataset(mdp, r["transitions"], r["horizon"], seed, heldout=split.heldout_pairs, starts=starts)
    return split, records


def worldmodel_data(cfg: dict, mdp: envs.TabularMDP, seed: int):
    split = envs.split_transitions(mdp, cfg["holdout_frac"], seed)
    d = cfg["data"]
    records = envs.collect_dataset(mdp, d["transitions"], d["horizon"], seed, heldout=split.heldout_pairs)
    return split, records


# ------------------------------------------------------------------ file output


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _meta(cfg, cell: Cell, **extra):
    meta = {
        "package_version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "kind": cell.kind,
        "variant": cell.variant,
        "seed": cell.seed,
        "config": cfg,
    }
    meta.update(extra)
    return meta


# ------------------------------------------------------------------ cells


def run_worldmodel_cell(cfg: dict, cell: Cell) -> dict:
    variant = _variant(cfg, cell.variant)
    goal = cell.kind == "rl_wm"
    mdp = make_mdp(cfg, goal=goal)
    split, records = rl_dataset(cfg, mdp, cell.seed) if goal else worldmodel_data(cfg, mdp, cell.seed)
    bundle = make_bundle(cfg, variant, mdp, cell.seed)
    tc = train_config(cfg, variant, cell.seed)
    bundle, art = train(tc, records, mdp, bundle, split)
    out = Path(cell.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "losses.csv", LOSS_COLUMNS, art.loss_rows)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, art.metric_rows)
    dump = latent_dump(bundle, mdp)
    write_csv(out / "latents.csv", list(dump[0].keys()), dump)
    envs.write_dataset_csv(out / "dataset.csv", records)
    model.save_bundle(out / "checkpoint.json", bundle, {"seed": cell.seed, "variant": cell.variant})
    final = {r["split"]: {k: r[k] for k in ("H@1", "H@5", "MRR")} for r in art.metric_rows if r["step"] == tc.steps}
    _write_json(out / "run_meta.json", _meta(
        cfg, cell, env=mdp.name, n_records=len(records),
        heldout_pairs=sorted(list(p) for p in split.heldout_pairs), final_metrics=final,
    ))
    return final


def run_agent_cell(cfg: dict, cell: Cell) -> dict:
    mdp = make_mdp(cfg, goal=True)
    bundle = None
    if cell.depends_on is not None:
        bundle = model.load_bundle(Path(cell.depends_on) / "checkpoint.json")
        records = envs.read_dataset_csv(Path(cell.depends_on) / "dataset.csv")
    else:
        _, records = rl_dataset(cfg, mdp, cell.seed)
    dc = ddqn_config(cfg, cell.seed)
    qnet, rows = rl.run_agent(mdp, records, bundle, dc)
    final = rl.evaluate_policy(mdp, bundle, qnet, dc.max_steps)
    out = Path(cell.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "rl_returns.csv", rl.RL_COLUMNS, rows)
    result = {
        "final_return": final["mean"],
        "final_running_avg": rows[-1]["running_avg"] if rows else final["mean"],
        "optimal_return": rl.optimal_return(mdp),
    }
    _write_json(out / "run_meta.json", _meta(cfg, cell, env=mdp.name, n_records=len(records), **result))
    return result


def run_cell(cfg: dict, cell: Cell) -> dict:
    """Execute one cell; failures are captured, never raised."""
    try:
        if cell.kind == "rl_agent":
            res = run_agent_cell(cfg, cell)
        else:
            res = run_worldmodel_cell(cfg, cell)
        return {"cell": cell, "ok": True, "result": res}
    except Exception as exc:  # noqa: BLE001 - isolation is the point
        out = Path(cell.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.txt").write_text("".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
        log.error("cell %s failed: %s", cell.out_dir, exc)
        return {"cell": cell, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _run_cell_star(args):
    return run_cell(*args)


def _execute(cfg, cells: List[Cell], jobs: int) -> List[dict]:
    if not cells:
        return []
    if jobs <= 1 or len(cells) == 1:
        return [run_cell(cfg, c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
        return list(pool.map(_run_cell_star, [(cfg, c) for c in cells]))


def run(cfg: dict, plan: ExperimentPlan, jobs: Optional[int] = None) -> Dict[str, list]:
    """Run every cell of ``plan``; world-model cells finish before agents start."""
    jobs = jobs or os.cpu_count() or 1
    results = _execute(cfg, plan.phase(("worldmodel", "rl_wm")), jobs)
    failed_wm = {r["cell"].out_dir for r in results if not r["ok"]}
    agents = []
    for c in plan.phase(("rl_agent",)):
        if c.depends_on in failed_wm:
            results.append({"cell": c, "ok": False, "error": f"dependency failed: {c.depends_on}"})
        else:
            agents.append(c)
    results += _execute(cfg, agents, jobs)
    root = Path(plan.out_root)
    root.mkdir(parents=True, exist_ok=True)
    if plan.mode in ("worldmodel", "both"):
        write_summary(root / "summary.csv", cfg, [r for r in results if r["cell"].kind == "worldmodel"])
    if plan.mode in ("rl", "both"):
        write_rl_summary(root / "rl_summary.csv", [r for r in results if r["cell"].kind == "rl_agent"])
    return {"ok": [r for r in results if r["ok"]], "failed": [r for r in results if not r["ok"]]}


# ------------------------------------------------------------------ summaries

SUMMARY_COLUMNS = (
    "variant", "split", "n_seeds", "n_failed",
    "H@1_mean", "H@1_std", "H@5_mean", "H@5_std", "MRR_mean", "MRR_std",
    "H@1", "H@5", "MRR", "failed_cells",
)


def final_metrics(cell_dir) -> Dict[str, Dict[str, float]]:
    """Last-step metrics per split, read back from a cell's ``metrics.csv``."""
    rows = read_csv(Path(cell_dir) / "metrics.csv")
    if not rows:
        return {}
    last = max(int(r["step"]) for r in rows)
    return {r["split"]: {k: float(r[k]) for k in ("H@1", "H@5", "MRR")} for r in rows if int(r["step"]) == last}


def _pm(mean, std):
    return f"{mean:.2f} ± {std:.2f}"


def summarize(per_seed: List[Dict[str, float]]) -> dict:
    out = {}
    for k in ("H@1", "H@5", "MRR"):
        vals = np.array([m[k] for m in per_seed], dtype=np.float64)
        out[f"{k}_mean"] = float(vals.mean())
        out[f"{k}_std"] = float(vals.std())
        out[k] = _pm(out[f"{k}_mean"], out[f"{k}_std"])
    return out


def write_summary(path, cfg, results: List[dict]):
    rows = []
    for v in cfg["variants"]:
        mine = sorted((r for r in results if r["cell"].variant == v["name"]), key=lambda r: r["cell"].seed)
        failed = [r["cell"].out_dir for r in mine if not r["ok"]]
        metrics = [final_metrics(r["cell"].out_dir) for r in mine if r["ok"]]
        splits = ["test", "train"] if any("test" in m for m in metrics) else ["train"]
        for split in splits:
            per_seed = [m[split] for m in metrics if split in m]
            row = {"variant": v["name"], "split": split, "n_seeds": len(per_seed), "n_failed": len(failed),
                   "failed_cells": ";".join(failed)}
            if per_seed:
                row.update(summarize(per_seed))
            else:
                row.update({c: "" for c in SUMMARY_COLUMNS if c not in row})
            rows.append(row)
    write_csv(path, SUMMARY_COLUMNS, rows)
    return rows


RL_SUMMARY_COLUMNS = ("agent", "n_seeds", "n_failed", "return_mean", "return_std", "optimal_return", "failed_cells")


def write_rl_summary(path, results: List[dict]):
    agents = []
    for r in results:
        if r["cell"].variant not in agents:
            agents.append(r["cell"].variant)
    rows = []
    for agent in agents:
        mine = [r for r in results if r["cell"].variant == agent]
        ok = [r["result"] for r in mine if r["ok"]]
        rets = np.array([x["final_return"] for x in ok])
        rows.append({
            "agent": agent,
            "n_seeds": len(ok),
            "n_failed": len(mine) - len(ok),
            "return_mean": float(rets.mean()) if len(ok) else "",
            "return_std": float(rets.std()) if len(ok) else "",
            "optimal_return": ok[0]["optimal_return"] if ok else "",
            "failed_cells": ";".join(r["cell"].out_dir for r in mine if not r["ok"]),
        })
    write_csv(path, RL_SUMMARY_COLUMNS, rows)
    return rows
