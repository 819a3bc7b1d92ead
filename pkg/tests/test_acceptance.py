"""Acceptance gate: the ten release criteria, one test per criterion.

Each test prints (and logs to the terminal summary) a single
``criterion NN: PASS/FAIL`` line with the measured numbers. The heavy
fixtures — synthetic multi-subject data, a meta-training run, and the
five-seed adaptation study — are module-scoped and shared.
"""

import os
import time

import numpy as np
import pytest

import conftest
from conftest import TINY, make_tiny_subject

from metadapt import seeding
from metadapt.cli import grad_check_network, run_cli
from metadapt.data_synth import SynthConfig, gen_subjects
from metadapt.episodes import build_meta_ensemble
from metadapt.eval_adapt import (AdaptConfig, adapt, budget_sweep, evaluate,
                                 fit_from_scratch, roc_auc_macro, spearman)
from metadapt.meta_trainer import (MetaLearnerState, TrainingConfig,
                                   meta_train, run_episode)
from metadapt.network import ArchConfig, ParameterSet, init_parameters
from metadapt.optim import AdamState, adam_step
from metadapt.tensor import Tensor

SEED = 7
ADAPT_SEEDS = range(5)


def record(num: int, name: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} — {name}"
    if detail:
        line += f" ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------------------
# shared heavy fixtures

@pytest.fixture(scope="module")
def bundle():
    """Synthetic 7-subject dataset and one meta-training run on 6 sources."""
    t0 = time.monotonic()
    synth = SynthConfig(n_subjects=7, trials_per_subject=200, sigma=1.0,
                        seed=SEED)
    subjects = gen_subjects(synth)
    arch = ArchConfig()
    tcfg = TrainingConfig(meta_epochs=8, n_tasks=48, seed=SEED)
    result = meta_train(subjects[:6], arch, tcfg)
    return {
        "sources": subjects[:6],
        "target": subjects[6],
        "arch": arch,
        "result": result,
        "state": result.state,
        "train_seconds": time.monotonic() - t0,
    }


@pytest.fixture(scope="module")
def runs(bundle):
    """Five-seed adaptation study: meta-adapted vs from-scratch at 30 trials."""
    t0 = time.monotonic()
    adapted, scratch = [], []
    for seed in ADAPT_SEEDS:
        acfg = AdaptConfig(budget=30, epochs=20, seed=seed)
        model = adapt(bundle["state"], bundle["target"], acfg)
        adapted.append(evaluate(model, bundle["target"], bundle["sources"]))
        baseline = fit_from_scratch(bundle["arch"], bundle["target"], acfg)
        scratch.append(evaluate(baseline, bundle["target"], bundle["sources"]))
    return {"adapted": adapted, "scratch": scratch,
            "seconds": time.monotonic() - t0}


@pytest.fixture(scope="module")
def episode_probe():
    """24 instrumented episodes at tiny scale, with meta-change snapshots."""
    cfg = TrainingConfig(pretrain_epochs=1, pretrain_batch=16, n_base=3,
                         k_tasks=4, n_tasks=24, p=4, q=4, meta_epochs=1,
                         seed=11)
    sources = [make_tiny_subject(f"s{i:02d}", n=48, seed=200 + i)
               for i in range(4)]
    state = MetaLearnerState(
        params=init_parameters(TINY, seed=[11, seeding.META_INIT]),
        adam=AdamState(), epoch=0, episode=0, root_seed=11)
    ensemble = build_meta_ensemble(sources, cfg.n_tasks, cfg.m, l=2,
                                   seed=[11, seeding.ENSEMBLE])
    out = []
    for i, task in enumerate(ensemble):
        before = {n: t.data.copy() for n, t in state.params.items()}
        res = run_episode(state, task, sources, cfg, 0, i, cfg.alpha, cfg.beta)
        rep_changed = any(
            not np.array_equal(state.params[n].data, before[n])
            for n in state.params.rep_names)
        pred_changed = any(
            not np.array_equal(state.params[n].data, before[n])
            for n in state.params.pred_names)
        out.append((res, rep_changed, pred_changed))
    return out


# ---------------------------------------------------------------------------
# criteria

def test_criterion_01_gradient_check():
    t0 = time.monotonic()
    err = grad_check_network(ArchConfig(), seed=SEED, max_coords=48)
    elapsed = time.monotonic() - t0
    ok = err <= 1e-4 and elapsed < 60.0
    assert record(1, "full-network gradients vs central differences", ok,
                  f"max rel err {err:.2e}, {elapsed:.1f}s")


def test_criterion_02_base_loop_leaves_rep_untouched(bundle, episode_probe):
    probe_ok = all(res.rep_frozen for res, _, _ in episode_probe)
    big_run = bundle["result"].epoch_logs
    n_episodes = sum(log.n_episodes for log in big_run) + len(episode_probe)
    ok = (len(episode_probe) + sum(l.n_episodes for l in big_run) >= 20
          and probe_ok and all(log.rep_frozen for log in big_run))
    assert record(2, "feature weights bitwise frozen across base loops", ok,
                  f"{n_episodes} episodes checked")


def test_criterion_03_meta_step_scope_and_inheritance(bundle, episode_probe):
    synced = all(res.start_synced for res, _, _ in episode_probe)
    synced_big = all(log.start_synced for log in bundle["result"].epoch_logs)
    rep_moved = all(rep for _, rep, _ in episode_probe)
    pred_moved = all(pred for _, _, pred in episode_probe)
    ok = synced and synced_big and rep_moved and pred_moved
    assert record(
        3, "meta step moves both groups; episodes start from meta values", ok,
        f"{len(episode_probe)} instrumented episodes")


def test_criterion_04_adam_scalar_oracle():
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    ps = ParameterSet(TINY, {"p": Tensor(np.zeros(1), requires_grad=True)}, {})
    adam_step(ps, {"p": np.array([1.0])}, AdamState(), lr=lr)
    first = float(ps["p"].data[0])
    first_err = abs(first - (-lr / (1.0 + eps)))

    # seven-step recurrence replayed independently
    rng = np.random.default_rng(40)
    gs = rng.normal(size=7)
    ps = ParameterSet(TINY, {"p": Tensor(np.zeros(1), requires_grad=True)}, {})
    state = AdamState()
    p = m = v = 0.0
    max_err = 0.0
    for t, g in enumerate(gs, start=1):
        adam_step(ps, {"p": np.array([g])}, state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        max_err = max(max_err, abs(float(ps["p"].data[0]) - p))
    ok = first_err <= 1e-9 and max_err <= 1e-9
    assert record(4, "Adam matches the hand-computed recurrence", ok,
                  f"first-step err {first_err:.1e}, 7-step err {max_err:.1e}")


def test_criterion_05_auc_equals_brute_force():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 31))
        k = int(rng.integers(2, 5))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
        scores = np.round(rng.random((n, k)), 1)  # coarse grid forces ties
        fast = roc_auc_macro(scores, labels)
        slow = []
        for c in range(k):
            pos = scores[labels == c, c]
            neg = scores[labels != c, c]
            wins = sum(1.0 if p > q else 0.5 if p == q else 0.0
                       for p in pos for q in neg)
            slow.append(wins / (pos.size * neg.size))
        diff = abs(fast - float(np.mean(slow)))
        worst = max(worst, diff)
        if diff != 0.0:
            break
    ok = worst == 0.0
    assert record(5, "macro AUC equals exhaustive pairwise counting", ok,
                  "200 instances, exact")


def test_criterion_06_transfer_beats_scratch(bundle, runs):
    mean_adapted = float(np.mean([r.target_accuracy for r in runs["adapted"]]))
    mean_scratch = float(np.mean([r.target_accuracy for r in runs["scratch"]]))
    gap = mean_adapted - mean_scratch
    total = bundle["train_seconds"] + runs["seconds"]
    ok = gap >= 0.10 and total < 900.0
    assert record(6, "30-trial adaptation beats from-scratch by >= 10pp", ok,
                  f"adapted {mean_adapted:.3f} vs scratch {mean_scratch:.3f}, "
                  f"gap {gap * 100:.1f}pp, {total:.0f}s")


def test_criterion_07_source_retention(bundle, runs):
    pre = evaluate(bundle["state"].params, bundle["target"], bundle["sources"])
    post = float(np.mean([r.retention.avg_acc for r in runs["adapted"]]))
    scratch = float(np.mean([r.retention.avg_acc for r in runs["scratch"]]))
    ok = post >= pre.retention.avg_acc - 0.15 and post >= scratch + 0.15
    assert record(7, "source accuracy retained after adaptation", ok,
                  f"pre {pre.retention.avg_acc:.3f}, post {post:.3f}, "
                  f"scratch {scratch:.3f}")


def test_criterion_08_budget_sweep_monotone(bundle):
    table = budget_sweep(bundle["state"], bundle["target"], bundle["sources"],
                         [8, 16, 30, 60], list(ADAPT_SEEDS), AdaptConfig())
    budgets = [row.budget for row in table.rows]
    means = [row.mean_target_accuracy for row in table.rows]
    rho = spearman(budgets, means)
    ok = rho >= 0.0 and means[-1] >= means[0]
    assert record(8, "target accuracy does not degrade with budget", ok,
                  "acc " + ", ".join(f"{b}:{m:.3f}" for b, m in
                                     zip(budgets, means)) +
                  f"; spearman {rho:.2f}")


SMOKE = """
[experiment]
name = "accept9"
seed = 3

[arch]
channels = 4
samples = 32
n_classes = 4
f1 = 2
d = 2
f2 = 4
k_t = 8
k_s = 4
hidden = 8
dropout = 0.25

[synth]
n_subjects = 3
n_classes = 4
channels = 4
samples = 32
fs = 128.0
trials_per_subject = 24
sigma = 0.5
class_freqs = [8.0, 16.0, 24.0, 32.0]
jitter = 1.0
eval_frac = 0.25

[training]
pretrain_epochs = 2
pretrain_batch = 8
n_base = 2
k_tasks = 2
n_tasks = 6
p = 2
q = 2
meta_epochs = 2

[adaptation]
budget = 8
epochs = 2
batch_size = 4
"""


def test_criterion_09_end_to_end_determinism(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMOKE)
    outputs = {}
    for arm in ("a", "b"):
        out = str(tmp_path / arm)
        for cmd in (["gen-data"], ["meta-train"], ["adapt"], ["evaluate"]):
            code = run_cli(cmd + ["--config", str(cfg), "--out", out])
            assert code == 0, f"{cmd} failed in arm {arm}"
        outputs[arm] = {
            name: open(os.path.join(out, name), "rb").read()
            for name in ("results_meta.csv", "results_adapt.csv",
                         "results_evaluate.csv")
        }
    csv_ok = outputs["a"] == outputs["b"]

    # resumed meta-training equals the uninterrupted run bitwise
    sources = [make_tiny_subject(f"s{i:02d}", n=48, seed=300 + i)
               for i in range(3)]
    tcfg = TrainingConfig(pretrain_epochs=1, pretrain_batch=16, n_base=2,
                          k_tasks=3, n_tasks=6, p=3, q=3, meta_epochs=2,
                          seed=13)
    ckpt_dir = str(tmp_path / "ckpts")
    full = meta_train(sources, TINY, tcfg, checkpoint_dir=ckpt_dir)
    resumed = meta_train(sources, TINY, tcfg,
                         resume_from=os.path.join(ckpt_dir,
                                                  "meta_epoch_001.ckpt"))
    arrays_full = dict(full.state.params.named_arrays(),
                       **full.state.adam.named_arrays())
    arrays_res = dict(resumed.state.params.named_arrays(),
                      **resumed.state.adam.named_arrays())
    resume_ok = (set(arrays_full) == set(arrays_res) and all(
        np.array_equal(arrays_full[n], arrays_res[n]) for n in arrays_full))
    ok = csv_ok and resume_ok
    assert record(9, "byte-identical result CSVs; bitwise checkpoint resume",
                  ok, f"csv {'==' if csv_ok else '!='}, "
                      f"resume {'==' if resume_ok else '!='}")


def test_criterion_10_pretrain_loss_strictly_decreases(bundle):
    losses = bundle["result"].pretrain_losses
    drops = [a - b for a, b in zip(losses, losses[1:])]
    ok = len(losses) == 10 and all(d > 0 for d in drops)
    assert record(10, "pooled pretraining loss strictly decreases over "
                      "10 epochs", ok,
                  f"{losses[0]:.4f} -> {losses[-1]:.4f}, "
                  f"min drop {min(drops):.2e}")
