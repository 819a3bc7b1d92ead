"""Command-line entry point tying data generation, training, adaptation,
evaluation, and the budget sweep into reproducible experiment runs.

Every subcommand takes ``--config`` (TOML) and ``--seed``; flags win over the
file. Outputs land under the experiment's output directory, which is guarded
by a marker file so one experiment never silently clobbers another.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint, seeding
from . import tensor as tc
from .config import ExperimentConfig, load_config
from .data_synth import gen_subjects, write_dataset, load_dataset
from .episodes import SubjectDataset
from .errors import ConfigError, DataError, MetadaptError
from .eval_adapt import (AdaptConfig, adapt, budget_sweep, evaluate,
                         fit_from_scratch, spearman)
from .meta_trainer import (MetaLearnerState, load_state, meta_train, pretrain,
                           save_state)
from .network import ArchConfig, ParameterSet, forward, init_parameters
from .results import make_record, write_results, write_sweep_summary

_MARKER = "experiment.json"


# ---------------------------------------------------------------------------
# output directory and artifact plumbing

def _claim_out_dir(cfg: ExperimentConfig, force: bool) -> str:
    """Create the output directory, refusing one owned by another experiment."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    marker = os.path.join(cfg.out_dir, _MARKER)
    if os.path.exists(marker):
        with open(marker) as fh:
            owner = json.load(fh).get("experiment")
        if owner != cfg.name and not force:
            raise ConfigError(
                f"{cfg.out_dir} holds experiment '{owner}', not '{cfg.name}' "
                f"(pass --force to reuse it)")
    with open(marker, "w") as fh:
        json.dump({"experiment": cfg.name}, fh)
        fh.write("\n")
    return cfg.out_dir


def _manifest_path(cfg: ExperimentConfig) -> str:
    if cfg.data_manifest:
        return cfg.data_manifest
    return os.path.join(cfg.out_dir, "data", "manifest.json")


def _load_split_subjects(
        cfg: ExperimentConfig) -> Tuple[List[SubjectDataset], SubjectDataset]:
    """All subjects from the manifest, split into (sources, target)."""
    _, subjects = load_dataset(_manifest_path(cfg))
    if not subjects:
        raise DataError(f"{_manifest_path(cfg)}: no subjects listed")
    ids = [s.subject_id for s in subjects]
    target_id = cfg.target_subject or ids[-1]
    if target_id not in ids:
        raise ConfigError(
            f"target subject '{target_id}' not in dataset (have {ids})")
    target = subjects[ids.index(target_id)]
    sources = [s for s in subjects if s.subject_id != target_id]
    if not sources:
        raise DataError("dataset holds only the target subject; no sources")
    return sources, target


def _ckpt(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, "checkpoints", name)


def save_params(params: ParameterSet, path: str) -> None:
    """Persist a bare parameter set (weights + normalization stats)."""
    arch = {f: getattr(params.arch, f) for f in (
        "channels", "samples", "n_classes", "f1", "d", "f2", "k_t", "k_s",
        "hidden", "dropout")}
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    checkpoint.save_arrays(path, {"kind": "params", "arch": arch},
                           params.named_arrays())


def load_params(path: str) -> ParameterSet:
    meta, arrays = checkpoint.load_arrays(path)
    if meta.get("kind") != "params":
        raise ConfigError(f"{path}: not a parameter checkpoint")
    return ParameterSet.from_arrays(ArchConfig(**meta["arch"]), arrays)


def _results_paths(cfg: ExperimentConfig, phase: str) -> Tuple[str, str]:
    stem = os.path.join(cfg.out_dir, f"results_{phase}")
    return stem + ".csv", stem + ".json"


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    subjects = gen_subjects(cfg.synth)
    out = os.path.dirname(_manifest_path(cfg))
    manifest = write_dataset(subjects, out, cfg.synth.trial_seconds)
    print(f"wrote {len(subjects)} subjects to {manifest}")
    return 0


def _cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    sources, _ = _load_split_subjects(cfg)
    result = pretrain(sources, cfg.arch, cfg.training)
    checkpoint.save_arrays(_ckpt(cfg, "pretrain.ckpt"),
                           {"kind": "pretrain", "seed": cfg.seed},
                           result.rep_arrays)
    records = [
        make_record(cfg.name, "pretrain", f"train_loss_e{i + 1:02d}", loss,
                    seed=cfg.seed)
        for i, loss in enumerate(result.epoch_losses)
    ]
    write_results(records, *_results_paths(cfg, "pretrain"))
    print(f"pretrain: loss {result.epoch_losses[0]:.4f} -> "
          f"{result.epoch_losses[-1]:.4f} over {len(result.epoch_losses)} epochs")
    return 0


def _cmd_meta_train(cfg: ExperimentConfig, args) -> int:
    sources, _ = _load_split_subjects(cfg)
    result = meta_train(sources, cfg.arch, cfg.training,
                        checkpoint_dir=os.path.join(cfg.out_dir, "checkpoints"),
                        resume_from=args.resume)
    save_state(result.state, _ckpt(cfg, "meta_final.ckpt"))
    records = []
    for i, loss in enumerate(result.pretrain_losses):
        records.append(make_record(cfg.name, "pretrain",
                                   f"train_loss_e{i + 1:02d}", loss,
                                   seed=cfg.seed))
    for log in result.epoch_logs:
        records.append(make_record(cfg.name, "meta",
                                   f"base_loss_e{log.epoch:02d}",
                                   log.base_loss, seed=cfg.seed))
        records.append(make_record(cfg.name, "meta",
                                   f"meta_loss_e{log.epoch:02d}",
                                   log.meta_loss, seed=cfg.seed))
    write_results(records, *_results_paths(cfg, "meta"))
    last = result.epoch_logs[-1] if result.epoch_logs else None
    if last is not None:
        print(f"meta-train: {result.state.episode} episodes, final meta loss "
              f"{last.meta_loss:.4f}")
    print(f"saved {_ckpt(cfg, 'meta_final.ckpt')}")
    return 0


def _adapt_cfg(cfg: ExperimentConfig, args) -> AdaptConfig:
    acfg = cfg.adaptation
    if getattr(args, "budget", None) is not None:
        acfg = replace(acfg, budget=args.budget)
    if getattr(args, "epochs", None) is not None:
        acfg = replace(acfg, epochs=args.epochs)
    if getattr(args, "freeze_rep", False):
        acfg = replace(acfg, freeze_rep=True)
    return acfg


def _report_records(cfg: ExperimentConfig, phase: str, report,
                    seed: int, budget: int):
    records = [
        make_record(cfg.name, phase, "target_accuracy",
                    report.target_accuracy, seed=seed, budget=budget),
        make_record(cfg.name, phase, "target_auc",
                    report.target_auc, seed=seed, budget=budget),
        make_record(cfg.name, phase, "avg_acc",
                    report.retention.avg_acc, seed=seed, budget=budget),
        make_record(cfg.name, phase, "avg_ra",
                    report.retention.avg_ra, seed=seed, budget=budget),
    ]
    for sid, acc, auc in zip(report.retention.subject_ids,
                             report.retention.accuracies,
                             report.retention.aucs):
        records.append(make_record(cfg.name, phase, f"acc_{sid}", acc,
                                   seed=seed, budget=budget))
        records.append(make_record(cfg.name, phase, f"auc_{sid}", auc,
                                   seed=seed, budget=budget))
    return records


def _print_report(label: str, report) -> None:
    print(f"{label}: target acc {report.target_accuracy:.3f}, "
          f"auc {report.target_auc:.3f}; sources avg acc "
          f"{report.retention.avg_acc:.3f}, avg auc {report.retention.avg_ra:.3f}")


def _cmd_adapt(cfg: ExperimentConfig, args) -> int:
    sources, target = _load_split_subjects(cfg)
    state = load_state(_ckpt(cfg, "meta_final.ckpt"))
    acfg = _adapt_cfg(cfg, args)
    adapted = adapt(state, target, acfg)
    save_params(adapted, _ckpt(cfg, "adapted.ckpt"))
    report = evaluate(adapted, target, sources)
    write_results(
        _report_records(cfg, "adapt", report, acfg.seed, acfg.budget),
        *_results_paths(cfg, "adapt"))
    _print_report(f"adapt (budget {acfg.budget})", report)
    return 0


def _cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    sources, target = _load_split_subjects(cfg)
    path = args.params or _ckpt(cfg, "adapted.ckpt")
    if not os.path.exists(path) and not args.params:
        # fall back to the un-adapted meta learner
        state = load_state(_ckpt(cfg, "meta_final.ckpt"))
        params = state.params
        path = _ckpt(cfg, "meta_final.ckpt")
    else:
        params = load_params(path)
    report = evaluate(params, target, sources)
    write_results(
        _report_records(cfg, "evaluate", report, cfg.seed,
                        cfg.adaptation.budget),
        *_results_paths(cfg, "evaluate"))
    _print_report(f"evaluate ({os.path.basename(path)})", report)
    return 0


def _parse_int_list(text: str, what: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"--{what}: expected comma-separated ints, got {text!r}")
    if not values:
        raise ConfigError(f"--{what}: empty list")
    return values


def _cmd_sweep(cfg: ExperimentConfig, args) -> int:
    sources, target = _load_split_subjects(cfg)
    state = load_state(_ckpt(cfg, "meta_final.ckpt"))
    budgets = _parse_int_list(args.budgets, "budgets")
    seeds = _parse_int_list(args.seeds, "seeds")
    table = budget_sweep(state, target, sources, budgets, seeds,
                         cfg.adaptation)
    records = []
    for cell in table.cells:
        for metric, value in (("target_accuracy", cell.target_accuracy),
                              ("target_auc", cell.target_auc),
                              ("avg_acc", cell.avg_acc),
                              ("avg_ra", cell.avg_ra)):
            records.append(make_record(cfg.name, "sweep", metric, value,
                                       seed=cell.seed, budget=cell.budget))
    write_results(records, *_results_paths(cfg, "sweep"))
    write_sweep_summary(table.rows,
                        os.path.join(cfg.out_dir, "sweep_summary.csv"))
    means = [row.mean_target_accuracy for row in table.rows]
    rho = spearman([row.budget for row in table.rows], means) \
        if len(table.rows) > 1 else 0.0
    for row in table.rows:
        print(f"budget {row.budget:4d}: acc {row.mean_target_accuracy:.3f} "
              f"± {row.std_target_accuracy:.3f} (auc {row.mean_target_auc:.3f})")
    print(f"spearman(budget, mean acc) = {rho:.3f}")
    return 0


def grad_check_network(arch: ArchConfig, seed: int = 0,
                       max_coords: int = 48) -> float:
    """Max relative error of backprop vs central differences on the full net."""
    arch = replace(arch, dropout=0.0)
    params = init_parameters(arch, seed=[seed, seeding.GRADCHECK])
    rng = seeding.derive(seed, seeding.GRADCHECK, 1)
    x = rng.normal(size=(2, 1, arch.channels, arch.samples))
    labels = rng.integers(0, arch.n_classes, size=2)
    forward(params, tc.Tensor(x), mode="train")  # record normalization stats
    frozen = {n: a.copy() for n, a in params.stats.items()}

    def model(arrays):
        ps = ParameterSet(arch, dict(arrays),
                          {n: a.copy() for n, a in frozen.items()})
        return tc.softmax_cross_entropy(
            forward(ps, tc.Tensor(x), mode="eval"), labels)

    values = {n: t.data.copy() for n, t in params.items()}
    return tc.grad_check(model, values, epsilon=1e-5, max_coords=max_coords,
                         seed=seed)


def _cmd_grad_check(cfg: ExperimentConfig, args) -> int:
    err = grad_check_network(cfg.arch, seed=cfg.seed)
    print(f"max relative error: {err:.3e}")
    return 0 if err <= 1e-4 else 1


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metadapt",
        description="Meta-learned cross-subject signal classification "
                    "experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (overrides the config file)")
        p.add_argument("--out", default=None,
                       help="output directory (overrides the config file)")
        p.add_argument("--force", action="store_true",
                       help="reuse an output directory owned by another "
                            "experiment")
        p.set_defaults(func=func)
        return p

    add("gen-data", _cmd_gen_data, "generate the synthetic dataset")
    p = add("pretrain", _cmd_pretrain,
            "pooled-source representation pretraining only")
    p = add("meta-train", _cmd_meta_train,
            "pretrain + episodic meta-training")
    p.add_argument("--resume", default=None,
                   help="checkpoint to resume meta-training from")
    p = add("adapt", _cmd_adapt, "fine-tune the meta learner on the target")
    p.add_argument("--budget", type=int, default=None,
                   help="target trials to adapt on")
    p.add_argument("--epochs", type=int, default=None,
                   help="adaptation epochs")
    p.add_argument("--freeze-rep", dest="freeze_rep", action="store_true",
                   help="tune the classification head only")
    p = add("evaluate", _cmd_evaluate,
            "evaluate a checkpoint on target + sources")
    p.add_argument("--params", default=None,
                   help="parameter checkpoint to evaluate "
                        "(default: the adapted model)")
    p = add("sweep", _cmd_sweep, "adaptation budget sweep")
    p.add_argument("--budgets", default="8,16,30,60",
                   help="comma-separated trial budgets, ascending")
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated adaptation seeds")
    add("grad-check", _cmd_grad_check,
        "verify backprop against finite differences")
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        _claim_out_dir(cfg, args.force)
        return args.func(cfg, args)
    except (MetadaptError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
