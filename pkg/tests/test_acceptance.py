"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line with the measured numbers before
asserting.  The experiment fixtures train every cell of the shipped configs
from scratch (5 seeds), so this module takes a while on one core.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from geoworld import autodiff as ad
from geoworld import config, envs, evaluation as ev, model, runner, training
from geoworld import losses as L
from geoworld.geometry import (TWO_PI, Circle, Euclidean, LatentSpaceSpec, canonicalize, distance, oplus,
                               pairwise_distance, signed_diff, wrap)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = 5
JOBS = os.cpu_count() or 1


def _report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")


def _run(cfg_name, out, mode, seeds=SEEDS):
    cfg = config.load(CONFIGS / cfg_name)
    plan = runner.build_plan(cfg, seeds, mode, str(out))
    outcome = runner.run(cfg, plan, JOBS)
    assert not outcome["failed"], [r["error"] for r in outcome["failed"]]
    return cfg, Path(plan.out_root)


def _summary(root):
    return {(r["variant"], r["split"]): r for r in runner.read_csv(root / "summary.csv")}


@pytest.fixture(scope="module")
def torus(tmp_path_factory):
    return _run("torus5.toml", tmp_path_factory.mktemp("acc"), "worldmodel")


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    return _run("grid5.toml", tmp_path_factory.mktemp("acc"), "worldmodel")


@pytest.fixture(scope="module")
def grid_rl(tmp_path_factory):
    return _run("grid5.toml", tmp_path_factory.mktemp("acc"), "rl")


@pytest.fixture(scope="module")
def passage(tmp_path_factory):
    return _run("passage7.toml", tmp_path_factory.mktemp("acc"), "worldmodel", seeds=1)


def _means(row):
    return {k: float(row[f"{k}_mean"]) for k in ("H@1", "H@5", "MRR")}


# ---------------------------------------------------------------- 1, 2: generalization


def test_criterion_1_torus_generalization(torus, capsys):
    _, root = torus
    s = _summary(root)
    p, b = _means(s[("priors", "test")]), _means(s[("no_priors", "test")])
    ok = (p["H@1"] >= 85 and p["MRR"] >= 90 and b["H@1"] <= 75
          and all(p[k] > b[k] for k in ("H@1", "H@5", "MRR")))
    _report(capsys, 1, ok, f"torus5 test priors H@1 {p['H@1']:.2f} H@5 {p['H@5']:.2f} MRR {p['MRR']:.2f}; "
            f"no_priors H@1 {b['H@1']:.2f} H@5 {b['H@5']:.2f} MRR {b['MRR']:.2f} "
            "(need priors H@1>=85, MRR>=90, no_priors H@1<=75, priors > no_priors)")
    assert ok


def test_criterion_2_grid_generalization(grid, capsys):
    _, root = grid
    s = _summary(root)
    p, b = _means(s[("priors", "test")]), _means(s[("awm", "test")])
    ok = p["H@1"] >= 60 and p["MRR"] >= 75 and b["H@1"] <= 40
    _report(capsys, 2, ok, f"grid5 test priors H@1 {p['H@1']:.2f} MRR {p['MRR']:.2f}; awm H@1 {b['H@1']:.2f} "
            "(need priors H@1>=60, MRR>=75, awm H@1<=40)")
    assert ok


# ---------------------------------------------------------------- 3: passage closure


def test_criterion_3_passage_cycle(passage, capsys):
    _, root = passage
    b = model.load_bundle(root / "worldmodel" / "priors" / "seed_0" / "checkpoint.json")
    mdp = envs.make_passage(7)
    right = mdp.action_names.index("right")
    z = model.encode_all(b, mdp.encodings)
    w = z.copy()
    for _ in range(7):
        w = model.predict_next(b, w, right)
    closure = float(np.max(distance(b.space, w, z)))
    D = pairwise_distance(b.space, z, z)
    sep = float(np.min(D[~np.eye(7, dtype=bool)]))
    ok = closure <= 0.15 and sep >= 0.3
    _report(capsys, 3, ok, f"passage7 max closure error {closure:.4f} (<=0.15), min separation {sep:.4f} (>=0.3)")
    assert ok


# ---------------------------------------------------------------- 4: disentanglement


def test_criterion_4_disentanglement(torus, capsys):
    cfg, root = torus
    mdp = envs.make_torus(cfg["n"])
    masked, unmasked = [], []
    for seed in range(SEEDS):
        b = model.load_bundle(root / "worldmodel" / "priors" / f"seed_{seed}" / "checkpoint.json")
        z = model.encode_all(b, mdp.encodings)
        m_abs, u_abs = [], []
        for a in range(mdp.n_actions):
            d = np.abs(model.delta(b, z, a))
            keep = b.mask_matrix[a].astype(bool)
            m_abs.append(d[:, keep].ravel())
            u_abs.append(d[:, ~keep].ravel())
        masked.append(float(np.concatenate(m_abs).mean()))
        unmasked.append(float(np.concatenate(u_abs).mean()))
    ok = max(masked) < 0.05 and min(unmasked) > 0.3
    _report(capsys, 4, ok, "torus5 priors mean |delta| masked per seed "
            f"{[round(x, 4) for x in masked]} (<0.05), unmasked {[round(x, 4) for x in unmasked]} (>0.3)")
    assert ok


# ---------------------------------------------------------------- 5: gradients

CE2 = LatentSpaceSpec([Circle(), Euclidean(2)])
T2 = LatentSpaceSpec([Circle(), Circle()])


def _generic_inputs(seed, n=8):
    """Random latents kept away from the wrap boundary, zero distances and the hinge."""
    rng = np.random.default_rng(seed)
    while True:
        z_hat = rng.uniform(0.2, 6.0, size=(n, 3))
        z_next = rng.uniform(0.2, 6.0, size=(n, 3))
        acts = rng.integers(0, 2, size=n)
        acts[:2] = [0, 1]
        d = pairwise_distance(CE2, z_hat, z_next)
        diff = np.abs(z_hat[:, None, 0] - z_next[None, :, 0])
        if (np.min(np.abs(diff - np.pi)) > 1e-3 and d.min() > 1e-3
                and np.min(np.abs(np.diag(d) - 0.5)) > 1e-3 and np.min(np.abs(z_hat)) > 1e-3):
            return z_hat, z_next, acts


LOSS_OPS = {
    "infonce_L2": lambda P, a: L.infonce_loss(P["z_hat"], P["z_next"], a, CE2, "L2", 0.7),
    "infonce_L1": lambda P, a: L.infonce_loss(P["z_hat"], P["z_next"], a, CE2, "L1", 1.0),
    "symmetrized_infonce": lambda P, a: L.symmetrized_infonce(P["z_hat"], P["z_next"], a, CE2, "L2", 1.0),
    "reward_loss": lambda P, a: L.reward_loss(ad.take(P["z_hat"], np.array([1]), axis=1), -1.0 * a),
    "volume_loss": lambda P, a: L.volume_loss(P["z_next"], P["z_hat"], CE2, 0.5),
    "disentangle_loss": lambda P, a: L.disentangle_loss(P["z_hat"], a, np.array([[0, 1.0, 1.0], [1.0, 0, 0]])),
    "entropy_loss": lambda P, a: L.entropy_loss(P["z_next"], CE2, 0.8, seed=3),
}


def _total_loss_error(seed):
    mdp = envs.make_torus(5)
    b = model.init_params(T2, 2, 10, seed, masks=model.default_masks("torus", T2, 2))
    data = envs.collect_dataset(mdp, 16, 16, seed)
    s, a, r, s2 = envs.records_to_arrays(data)
    weights = L.LossWeights(entropy=0.5)

    def fn(tape, P):
        batch = training.build_batch(b, tape, P, mdp.encodings[s], mdp.encodings[s2], a, r)
        return L.total_loss(batch, b.space, weights, b.mask_matrix, seed)[0]

    return ad.grad_check(fn, b.params, eps=1e-5)


def test_criterion_5_gradient_suite(capsys):
    worst = {}
    for name, op in LOSS_OPS.items():
        errs = []
        for seed in range(5):
            z_hat, z_next, acts = _generic_inputs(seed)
            errs.append(ad.grad_check(lambda tape, P: op(P, acts), {"z_hat": z_hat, "z_next": z_next}, eps=1e-5))
        worst[name] = max(errs)
    worst["total_loss"] = max(_total_loss_error(seed) for seed in range(5))
    ok = max(worst.values()) < 1e-4
    _report(capsys, 5, ok, "max relative gradient error over 5 seeds: "
            + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<1e-4)")
    assert ok


# ---------------------------------------------------------------- 6: geometry properties


def _rand_space(rng):
    k1, k2 = rng.uniform(0.5, 10, size=2)
    return LatentSpaceSpec([Circle(k1), Euclidean(1), Circle(k2)])


def test_criterion_6_geometry_properties(capsys):
    rng = np.random.default_rng(2024)
    fails = {"group": 0, "metric": 0, "wrap": 0, "quotient": 0}
    for _ in range(1000):
        sp = _rand_space(rng)
        x, y, w = (canonicalize(sp, rng.uniform(-30, 30, size=3)) for _ in range(3))
        zero = np.zeros(3)
        neg = canonicalize(sp, -x)
        group = (
            np.allclose(signed_diff(sp, oplus(sp, oplus(sp, x, y), w), oplus(sp, x, oplus(sp, y, w))), 0, atol=1e-9)
            and np.allclose(signed_diff(sp, oplus(sp, x, zero), x), 0, atol=1e-12)
            and np.allclose(signed_diff(sp, oplus(sp, x, neg), zero), 0, atol=1e-9)
            and np.allclose(signed_diff(sp, oplus(sp, x, y), oplus(sp, y, x)), 0, atol=1e-9)
        )
        fails["group"] += not group
        for metric in ("L1", "L2"):
            dxy, dyx = distance(sp, x, y, metric), distance(sp, y, x, metric)
            dxw, dwy = distance(sp, x, w, metric), distance(sp, w, y, metric)
            metric_ok = (distance(sp, x, x, metric) <= 1e-12 and dxy >= 0 and abs(dxy - dyx) <= 1e-12
                         and dxy <= dxw + dwy + 1e-9)
            fails["metric"] += not metric_ok
        v, k = rng.uniform(-50, 50), rng.uniform(0.1, 20)
        once = wrap(v, k)
        fails["wrap"] += not (0 <= once < k and wrap(once, k) == once)
        n = 6
        z_hat = rng.uniform(-7, 7, size=(n, 2))
        z_next = rng.uniform(-7, 7, size=(n, 2))
        acts = rng.integers(0, 2, size=n)
        base = L.infonce_loss(canonicalize(T2, z_hat), canonicalize(T2, z_next), acts, T2).data
        moved = L.infonce_loss(canonicalize(T2, z_hat + TWO_PI * rng.integers(-3, 4, size=(n, 2))),
                               canonicalize(T2, z_next + TWO_PI * rng.integers(-3, 4, size=(n, 2))), acts, T2).data
        fails["quotient"] += not abs(float(moved) - float(base)) <= 1e-9
    ok = not any(fails.values())
    _report(capsys, 6, ok, "1000 cases each, failures: " + ", ".join(f"{k} {v}" for k, v in fails.items()))
    assert ok


# ---------------------------------------------------------------- 7: ranking oracle


def test_criterion_7_ranking_oracle(capsys):
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(1000):
        sp = _rand_space(rng)
        n = int(rng.integers(2, 30))
        cands = rng.uniform(-10, 10, size=(n, 3))
        preds = rng.uniform(-10, 10, size=(4, 3))
        if i % 2:
            cands, preds = np.round(cands), np.round(preds)
        metric = ("L1", "L2")[i % 3 == 0]
        true = rng.integers(0, n, size=4)
        got = ev.rank_batch(preds, true, cands, sp, metric)
        want = []
        for p, t in zip(preds, true):
            d = [float(distance(sp, p, c, metric)) for c in cands]
            order = sorted(range(n), key=lambda j: (d[j], j == t))
            want.append(order.index(t) + 1)
        mismatches += got.tolist() != want
        mismatches += ev.hits_at_k(got, 1) != sum(r == 1 for r in want) / 4
        mismatches += ev.hits_at_k(got, 5) != sum(r <= 5 for r in want) / 4
        mismatches += abs(ev.mrr(got) - sum(1.0 / r for r in want) / 4) > 1e-15
    ok = mismatches == 0
    _report(capsys, 7, ok, f"1000 random instances vs full-sort oracle, {mismatches} mismatches")
    assert ok


# ---------------------------------------------------------------- 8: downstream RL


def test_criterion_8_downstream_rl(grid_rl, capsys):
    _, root = grid_rl
    rows = {r["agent"]: r for r in runner.read_csv(root / "rl_summary.csv")}
    ret = {a: float(rows[a]["return_mean"]) for a in ("ddqn", "ddqn+awm", "ddqn+priors")}
    opt = float(rows["ddqn+priors"]["optimal_return"])
    gap = opt - ret["ddqn+priors"]
    ok = ret["ddqn+priors"] >= ret["ddqn+awm"] >= ret["ddqn"] and gap <= 3.0
    _report(capsys, 8, ok, f"grid5 mean return over {SEEDS} seeds: ddqn+priors {ret['ddqn+priors']:.2f}, "
            f"ddqn+awm {ret['ddqn+awm']:.2f}, ddqn {ret['ddqn']:.2f}; optimal {opt:.2f}, gap {gap:.2f} "
            "(need priors >= awm >= ddqn, gap <= 3)")
    assert ok


# ---------------------------------------------------------------- 9: determinism


def test_criterion_9_determinism(tmp_path, capsys):
    trees = []
    for i in range(2):
        _, root = _run("smoke.toml", tmp_path / f"run{i}", "both", seeds=2)
        trees.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))})
    a, b = trees
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = bool(a) and not differ
    _report(capsys, 9, ok, f"two full smoke pipelines (world model + RL, 2 seeds): {len(a)} CSV files, "
            f"{len(differ)} differ")
    assert ok
