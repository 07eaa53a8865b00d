"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The trained-model criteria share session fixtures: one pretrained pool per
pool layout (cached on disk for the session) and one loss-ablation sweep
over three seeds on the three-task pool.
"""

import time
from pathlib import Path
from dataclasses import replace

import numpy as np
import pytest

from mot import numerics as nx
from mot.harness.config import RunConfig, load_config
from mot.harness.experiments import build_tasks, make_sampler, run_experiment
from mot.harness.params import closed_form, instantiated, params_report
from mot.harness.tasks import EOS, SyntheticTaskSpec, batchify, make_task
from mot.inference import full_forward, generate
from mot.model import MoTConfig, MoTModel
from mot.router import sample_gumbel, select_topk
from mot.training import LossWeights, TrainConfig, compute_losses, train

from conftest import POOL_SECONDS, criterion, timed_pool, tiny_experts

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = (0, 1, 2)
ABLATION_ORDER = ["LM", "+ent", "+bal", "+con"]


def seeded(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed, mot=replace(cfg.mot, seed=seed), train=replace(cfg.train, seed=seed))


@pytest.fixture(scope="module")
def ablation(main_setup):
    """Loss ablation on the three-task pool for every seed; models are kept."""
    cfg, tasks, experts = main_setup
    out = {}
    for seed in SEEDS:
        out[seed] = run_experiment(seeded(cfg, seed), "loss-ablation", experts, tasks, keep_models=True)
    return out


# ---------------------------------------------------------------------------
# 1-5, 11: exact properties
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_correctness():
    t0 = time.time()
    task = make_task(SyntheticTaskSpec("copy", n_train=50, n_heldout=10, length=(2, 3)))
    batch = batchify(task.train[:4])
    w = LossWeights(ent=0.3, bal=0.5, con=0.7)  # large weights so every term shows up in the gradient
    errs = []
    for seed in range(5):
        experts = tiny_experts(dims=(8, 12), layers=(2, 3), vocab=64, max_seq=16, seed=seed, scale=0.3)
        model = MoTModel(experts, MoTConfig(Q=2, d_s=8, heads=2, K=2, d_z=8, h_r=6, dropout=0.0, seed=seed),
                         np.float64)
        rng = np.random.default_rng(seed)
        for layer in model.layers:
            for p in layer.params.values():
                p.data[...] = rng.normal(0, 0.5, p.shape)
        g0, g1 = sample_gumbel((4, 2), rng=rng), sample_gumbel((4, 2), rng=rng)
        first = compute_losses(model, batch, w, g0, g1)
        reuse = (first.decisions[0].frozen(), first.decisions[1].frozen())
        errs.append(nx.finite_diff_check(lambda: compute_losses(model, batch, w, g0, g1, reuse=reuse).total,
                                         model.trainable(), h=1e-5))
    secs = time.time() - t0
    n = sum(p.size for p in model.trainable().values())
    ok = max(errs) < 1e-3 and secs < 120
    criterion(1, ok, f"max rel. FD error {max(errs):.2e} over {n} scalars x 5 seeds (tol 1e-3), {secs:.0f}s (< 120s)")
    assert ok


def test_criterion_02_cache_equivalence(ablation, main_setup):
    t0 = time.time()
    cfg, tasks, _ = main_setup
    model = ablation[0].rows[-1]["_model"]
    assert model.dtype == np.float32
    rng = np.random.default_rng(0)
    pool = [ex.prompt for t in tasks.values() for ex in t.heldout]
    prompts = [pool[i] for i in rng.choice(len(pool), 15, replace=False)]
    prompts += [rng.integers(3, 24, size=rng.integers(2, 8)).tolist() for _ in range(5)]
    worst, steps = 0.0, 0
    for p in prompts:
        state = generate(model, p, max_len=10, return_state=True)
        full = full_forward(model, state)
        for step, logits in enumerate(state.logits):
            for m, v in logits.items():
                worst = max(worst, float(np.abs(v - full[m][len(p) - 1 + step]).max()))
            steps += 1
    secs = time.time() - t0
    ok = worst < 1e-5 and secs < 60
    criterion(2, ok, f"max |cached - recomputed| logits {worst:.2e} over 20 prompts / {steps} steps (float32, "
                     f"tol 1e-5), {secs:.0f}s (< 60s)")
    assert ok


def test_criterion_03_causality():
    experts = tiny_experts(dims=(8, 12, 8), layers=(2, 3, 2), scale=0.5)
    rng = np.random.default_rng(0)
    worst_backbone, worst_cross, cases = 0.0, 0.0, 0
    for K in (1, 2, 3):
        model = MoTModel(experts, MoTConfig(Q=2, d_s=8, heads=2, K=K, d_z=8, h_r=6, dropout=0.0), np.float64)
        for N in range(1, 7):
            d = select_topk(nx.Tensor(rng.normal(size=(1, 3))), K)
            toks = {m: rng.integers(0, 16, size=(1, N)) for m in range(3)}
            base = model.forward(toks, d)
            alone = {m: experts[m].forward(toks[m][0]).data for m in range(3)}
            for src in range(3):
                for t in range(N - 1):
                    pert = {m: v.copy() for m, v in toks.items()}
                    pert[src][0, t + 1] = (pert[src][0, t + 1] + 5) % 16
                    out = model.forward(pert, d)
                    for m in range(3):
                        worst_cross = max(worst_cross, float(np.abs(out[m].data[0, : t + 1]
                                                                    - base[m].data[0, : t + 1]).max()))
                    solo = experts[src].forward(pert[src][0]).data
                    worst_backbone = max(worst_backbone, float(np.abs(solo[: t + 1] - alone[src][: t + 1]).max()))
                    cases += 1
    ok = worst_backbone < 1e-10 and worst_cross < 1e-10
    criterion(3, ok, f"max past-position change: backbone {worst_backbone:.1e}, with interaction {worst_cross:.1e} "
                     f"over {cases} perturbations (N<=6, K<=3, tol 1e-10)")
    assert ok


def test_criterion_04_zero_interaction_reduction(main_setup):
    cfg, tasks, experts = main_setup
    model = MoTModel(experts, cfg.mot)
    model.zero_interaction()
    rng = np.random.default_rng(1)
    pool = [ex.prompt for t in tasks.values() for ex in t.heldout]
    prompts = [pool[i] for i in rng.choice(len(pool), 50, replace=False)]
    same = 0
    for p in prompts:
        state = generate(model, p, max_len=8, return_state=True)
        same += state.y == experts[state.primary].greedy(p, 8, eos=EOS)
    ok = same == 50
    criterion(4, ok, f"{same}/50 prompts token-identical to the standalone primary")
    assert ok


def test_criterion_05_parameter_accounting():
    configs = [([8, 12, 16], 2, 8, 4, 5), ([8, 12, 16], 4, 8, 4, 5), ([8, 12, 16], 2, 16, 4, 5),
               ([32, 48, 48], 2, 32, 64, 64), ([32, 48], 2, 32, 64, 64), ([8], 1, 4, 4, 4),
               ([16, 16, 16, 16], 3, 8, 16, 8), ([64, 32], 1, 64, 32, 128), ([12, 24, 36], 6, 12, 8, 16),
               ([32, 48, 48, 32, 48, 48], 2, 32, 64, 64), ([8, 12, 16], 2, 8, 4, 5)]
    agree = 0
    for dims, Q, d_s, d_z, h_r in configs:
        for x in (True, False):
            agree += closed_form(dims, Q, d_s, d_z, h_r, x) == instantiated(dims, Q, d_s, d_z, h_r, x)
            params_report(dims, Q, d_s, d_z, h_r, x)  # raises on disagreement
    toy = closed_form([8, 12, 16], 2, 8, 4, 5)
    q2 = closed_form([8, 12, 16], 4, 8, 4, 5)
    d2 = closed_form([8, 12, 16], 2, 16, 4, 5)
    scaling = (q2["proj"] == 2 * toy["proj"] and q2["attn"] == 2 * toy["attn"] and q2["router"] == toy["router"]
               and d2["attn"] == 4 * toy["attn"])
    ok = agree == 2 * len(configs) and toy["total"] == 1699 and scaling
    criterion(5, ok, f"closed form == instantiated for {agree}/{2 * len(configs)} configurations; toy total "
                     f"{toy['total']} (want 1699); Q-doubling x2, d_s-doubling attn x4: {scaling}")
    assert ok


def test_criterion_11_gumbel_statistics():
    g = sample_gumbel(100_000, seed=0)
    counts = np.zeros(4)
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        counts[select_topk(nx.Tensor(np.zeros(4)), 1, noise=sample_gumbel(4, rng=rng)).primary[0]] += 1
    dev = float(np.abs(counts / 2500 - 1).max())
    ok = abs(g.mean() - 0.5772) < 0.01 and abs(g.var() - 1.6449) < 0.05 and dev <= 0.06
    criterion(11, ok, f"mean {g.mean():.4f} (0.5772 +- 0.01), variance {g.var():.4f} (1.6449 +- 0.05), "
                      f"K=1 frequencies {counts.astype(int).tolist()} max deviation {dev:.1%} (<= 6%)")
    assert ok


# ---------------------------------------------------------------------------
# 6-10: trained models
# ---------------------------------------------------------------------------


def test_criterion_06_balance_loss_efficacy(main_setup):
    """Same seed, same data and noise stream; only the balance weight differs."""
    cfg, tasks, experts = main_setup
    mix = {"copy": 0.7, "reverse": 0.15, "modular-arithmetic": 0.15}
    probe = make_sampler(tasks, mix)(np.random.default_rng(123), 2000).prompts
    noise = sample_gumbel((len(probe), len(experts)), seed=7)

    def freq_std(model):
        with nx.no_grad():
            d = select_topk(model.scores(probe), model.cfg.K, noise=noise, tau=model.cfg.tau)
        return float(d.active_mask.mean(axis=0).std())

    stds = {}
    for seed in SEEDS:
        for bal in (0.0, 0.01):
            tc = TrainConfig(steps=500, lr=3e-4, warmup=100, seed=seed, weights=LossWeights(0.01, bal, 0.05))
            model = MoTModel(experts, replace(cfg.mot, seed=seed))
            at = {}
            train(model, make_sampler(tasks, mix), tc,
                  callback=lambda step, m, rec: at.__setitem__(step, freq_std(m)) if step in (200, 500) else None)
            stds[seed, bal] = at
    wins = [stds[s, 0.01][500] < stds[s, 0.0][500] for s in SEEDS]
    avg200 = [np.mean([stds[s, b][200] for s in SEEDS]) for b in (0.0, 0.01)]
    detail = ", ".join(f"seed {s}: {stds[s, 0.0][500]:.4f} -> {stds[s, 0.01][500]:.4f}" for s in SEEDS)
    ok = sum(wins) == 3
    criterion(6, ok, f"std(f) after 500 steps without -> with balance loss: {detail}; lower in {sum(wins)}/3 "
                     f"(need 3/3); 3-seed mean at 200 steps {avg200[0]:.4f} -> {avg200[1]:.4f}")
    assert ok


def test_criterion_07_routing_specialization(ablation):
    row = ablation[0].rows[-1]
    assert row["label"] == "+con"
    secs = POOL_SECONDS.get("main", 0.0) + row["train_seconds"] + row["eval_seconds"]
    ok = row["routing_accuracy"] >= 0.9 and secs < 1800
    per = ", ".join(f"{k} {v:.3f}" for k, v in row["routing"].items())
    criterion(7, ok, f"held-out routing accuracy {row['routing_accuracy']:.3f} ({per}; need >= 0.9), "
                     f"pretrain+train+eval {secs:.0f}s (< 1800s); exact match {row['mean_accuracy']:.3f}")
    assert ok


def fusion_config() -> RunConfig:
    return load_config(CONFIGS / "fusion.yaml")


def test_criterion_08_crossattn_ablation():
    cfg = fusion_config()
    tasks = build_tasks(cfg)
    experts = timed_pool("fusion", cfg, tasks)
    gaps, pairs = [], []
    for seed in SEEDS:
        rep = run_experiment(seeded(cfg, seed), "no-crossattn", experts, tasks)
        full, nox = (r["mean_accuracy"] for r in rep.rows)
        gaps.append(full - nox)
        pairs.append(f"{full:.3f} vs {nox:.3f}")
    ok = np.mean(gaps) >= 0.10
    criterion(8, ok, f"fact-lookup held-out accuracy full vs no-crossattn: {'; '.join(pairs)}; mean gap "
                     f"{np.mean(gaps):+.3f} (need >= +0.10)")
    assert ok


def test_criterion_09_loss_ablation_shape(ablation):
    lines, monotone = [], 0
    for seed, rep in ablation.items():
        assert [r["label"] for r in rep.rows] == ABLATION_ORDER
        accs = [r["mean_accuracy"] for r in rep.rows]
        up = all(b >= a for a, b in zip(accs, accs[1:]))
        monotone += up
        lines.append(f"seed {seed}: " + " -> ".join(f"{a:.3f}" for a in accs) + (" ok" if up else " not monotone"))
    ok = monotone >= 2
    criterion(9, ok, f"mean accuracy LM -> +ent -> +bal -> +con: {'; '.join(lines)}; non-decreasing in "
                     f"{monotone}/3 seeds (need >= 2)")
    assert ok


def redundant_config() -> RunConfig:
    return load_config(CONFIGS / "redundant.yaml")


def test_criterion_10_dropout_robustness():
    cfg = redundant_config()
    tasks = build_tasks(cfg)
    experts = timed_pool("redundant", cfg, tasks)
    rep = run_experiment(cfg, "dropout", experts, tasks)
    full = rep.rows[0]
    assert full["label"] == "full"
    errors = [r["label"] for r in rep.rows if "error" in r]
    drops = {r["label"]: full["mean_accuracy"] - r["mean_accuracy"] for r in rep.rows[1:] if "error" not in r}
    worst = max(drops.values()) if drops else float("inf")
    ok = not errors and len(drops) == len(experts) and worst <= 0.05
    criterion(10, ok, f"full accuracy {full['mean_accuracy']:.3f}; worst single-expert drop {worst:+.3f} "
                      f"(need <= 0.05) over {len(drops)} drops; failures: {errors or 'none'}")
    assert ok
