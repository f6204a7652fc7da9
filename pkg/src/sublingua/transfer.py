"""Winning-ticket verdicts and cross-language / cross-task transfer grids.

A transfer cell retrains a source mask's surviving weights from the shared
pre-trained base on the target split. Verdicts follow the one-standard-
deviation criterion with the best-step clause reported separately, since
re-evaluating a stored outcome must never change the verdict.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import corpus, masks, model, pruning
from .numerics import ContractViolation, Rng


@dataclass
class FullModelBaseline:
    task: str
    language: str
    outcomes: list  # one TrainOutcome per seed, >= 3 seeds
    mean_metric: float = 0.0
    std_metric: float = 0.0
    mean_best_step: float = 0.0

    def __post_init__(self):
        if len(self.outcomes) < 3:
            raise ContractViolation("baseline needs at least 3 seeds")
        vals = [o.best_metric for o in self.outcomes]
        self.mean_metric = float(np.mean(vals))
        self.std_metric = float(np.std(vals, ddof=1))
        self.mean_best_step = float(np.mean([o.best_step
                                             for o in self.outcomes]))

    @property
    def orientation(self) -> str:
        return self.outcomes[0].metric_orientation


@dataclass
class TicketVerdict:
    subnet_metric: float
    subnet_best_step: int
    baseline_metric: float
    baseline_best_step: float
    epsilon: float
    degradation: float
    within_epsilon: bool
    step_clause: bool
    is_winning: bool


def make_baseline(theta0: model.ParamSet, split: corpus.DatasetSplit,
                  cfg: model.ModelConfig, tcfg: model.TrainConfig,
                  seeds: list) -> FullModelBaseline:
    """Unmasked training from the shared base, one run per seed."""
    outcomes = []
    for seed in seeds:
        outcomes.append(model.train(theta0, None, split, cfg,
                                    replace(tcfg, seed=seed)))
    return FullModelBaseline(split.task_kind, split.language_id, outcomes)


def verdict(subnet_outcome: model.TrainOutcome,
            baseline: FullModelBaseline) -> TicketVerdict:
    """Winning iff degradation <= one baseline std AND the sub-network peaks
    no later than the baseline (on average over its seeds)."""
    if subnet_outcome.metric_orientation != baseline.orientation:
        raise ContractViolation("metric orientations do not match")
    a, a_prime = baseline.mean_metric, subnet_outcome.best_metric
    if baseline.orientation == model.HIGHER_BETTER:
        degradation = a - a_prime
    else:
        degradation = a_prime - a
    within = degradation <= baseline.std_metric
    step_ok = subnet_outcome.best_step <= baseline.mean_best_step
    return TicketVerdict(
        subnet_metric=a_prime, subnet_best_step=subnet_outcome.best_step,
        baseline_metric=a, baseline_best_step=baseline.mean_best_step,
        epsilon=baseline.std_metric, degradation=degradation,
        within_epsilon=within, step_clause=step_ok,
        is_winning=within and step_ok)


def sparsity_sweep(theta0: model.ParamSet, split: corpus.DatasetSplit,
                   cfg: model.ModelConfig, sparsities: list,
                   schedule_rate: float, tcfg: model.TrainConfig,
                   baseline: FullModelBaseline) -> dict:
    """One nested IMP run up to max(sparsities); intermediate masks of the
    monotone trace are reused for the lower targets. Returns
    sparsity -> (mask, TicketVerdict)."""
    targets = sorted(sparsities)
    for s in targets:
        if abs(s / schedule_rate - round(s / schedule_rate)) > 1e-9:
            raise ContractViolation(f"sparsity {s} is not a multiple of the "
                                    f"pruning rate {schedule_rate}")
    schedule = pruning.ImpSchedule(target_sparsity=max(targets),
                                   rate=schedule_rate, train_config=tcfg)
    round_masks = _masks_from_trace(theta0, split, cfg, schedule)
    out = {}
    for s in targets:
        k = int(round(s / schedule_rate))
        mask_s = round_masks[k]
        seed = Rng(tcfg.seed).child("sweep-eval", k).next_u64()
        outcome = model.train(theta0, mask_s, split, cfg,
                              replace(tcfg, seed=seed))
        out[s] = (mask_s, verdict(outcome, baseline))
    return out


def _masks_from_trace(theta0, split, cfg, schedule) -> dict:
    """Re-run IMP capturing the mask after each round (deterministic)."""
    # pruning.imp only returns the final mask; replay with per-round capture.
    n = theta0.prunable_size()
    mask = masks.all_ones_mask(theta0)
    captured = {0: mask}
    base_seed = schedule.train_config.seed
    for k in range(1, schedule.rounds + 1):
        round_seed = Rng(base_seed).child("imp-round", k).next_u64()
        tcfg = replace(schedule.train_config, seed=round_seed)
        outcome = model.train(theta0, mask, split, cfg, tcfg)
        magnitudes = np.abs(np.concatenate(
            [outcome.final_params.values[nm].ravel()
             for nm in outcome.final_params.prunable_names()]))
        target_zeros = int(np.floor(k * schedule.rate * n))
        flat = pruning._prune_lowest(mask.flat(), magnitudes,
                                     target_zeros - mask.zero_count)
        mask = masks.from_flat(theta0, flat, k * schedule.rate,
                               {"method": "imp", "rounds": k})
        captured[k] = mask
    return captured


@dataclass
class TransferMatrix:
    task: str
    sparsity: float
    languages: list
    cells: dict = field(default_factory=dict)   # (src, tgt) -> TrainOutcome
    random_row: dict = field(default_factory=dict)  # tgt -> TrainOutcome
    baselines: dict = field(default_factory=dict)   # tgt -> FullModelBaseline
    verdicts: dict = field(default_factory=dict)    # (src, tgt) -> TicketVerdict

    def metric(self, src: str, tgt: str) -> float:
        return self.cells[(src, tgt)].best_metric

    @property
    def orientation(self) -> str:
        first = next(iter(self.cells.values()))
        return first.metric_orientation


def cross_language_transfer(theta0: model.ParamSet, lang_masks: dict,
                            splits: dict, cfg: model.ModelConfig,
                            tcfg: model.TrainConfig, baselines: dict,
                            random_seed: int = 1234) -> TransferMatrix:
    """Full source x target grid plus a random-mask baseline row.

    ``lang_masks`` maps language id -> Mask (all at equal sparsity from the
    same base); ``splits``/``baselines`` map language id -> split/baseline.
    """
    languages = sorted(lang_masks)
    sparsities = {round(m.sparsity, 6) for m in lang_masks.values()}
    if len(sparsities) != 1:
        raise ContractViolation("masks must share one sparsity level")
    s = next(iter(sparsities))
    tm = TransferMatrix(task=splits[languages[0]].task_kind, sparsity=s,
                        languages=languages, baselines=dict(baselines))
    rand = masks.random_mask(theta0, s, random_seed)
    for tgt in languages:
        for src in languages:
            seed = Rng(tcfg.seed).child("transfer", src, tgt).next_u64()
            outcome = model.train(theta0, lang_masks[src], splits[tgt], cfg,
                                  replace(tcfg, seed=seed))
            tm.cells[(src, tgt)] = outcome
            tm.verdicts[(src, tgt)] = verdict(outcome, baselines[tgt])
        seed = Rng(tcfg.seed).child("transfer", "rand", tgt).next_u64()
        tm.random_row[tgt] = model.train(theta0, rand, splits[tgt], cfg,
                                         replace(tcfg, seed=seed))
    return tm


def cross_task_transfer(theta0: model.ParamSet, task_masks: dict,
                        splits: dict, cfg: model.ModelConfig,
                        tcfg: model.TrainConfig) -> dict:
    """(source task, target task) -> degradation vs the target's own ticket.

    Degradation is in the target metric's baseline-favoring orientation;
    the diagonal is zero by construction.
    """
    tasks = sorted(task_masks)
    own = {}
    for task in tasks:
        seed = Rng(tcfg.seed).child("crosstask", task, task).next_u64()
        own[task] = model.train(theta0, task_masks[task], splits[task], cfg,
                                replace(tcfg, seed=seed))
    grid = {}
    for src in tasks:
        for tgt in tasks:
            if src == tgt:
                grid[(src, tgt)] = 0.0
                continue
            seed = Rng(tcfg.seed).child("crosstask", src, tgt).next_u64()
            outcome = model.train(theta0, task_masks[src], splits[tgt], cfg,
                                  replace(tcfg, seed=seed))
            if outcome.metric_orientation == model.HIGHER_BETTER:
                grid[(src, tgt)] = own[tgt].best_metric - outcome.best_metric
            else:
                grid[(src, tgt)] = outcome.best_metric - own[tgt].best_metric
    return grid


def relative_drop(matrix: TransferMatrix, source: str) -> float:
    """Mean over targets t != source of (a(s,t) - a(t,t)) / a(t,t).

    Lower-is-better metrics are negated first so that a negative result
    always means the transfer underperforms the target's own ticket. The
    denominator uses |a(t,t)| so that the negation cannot flip the sign of
    the ratio; the result stays invariant under uniform positive rescaling.
    """
    langs = matrix.languages
    if len(langs) < 2:
        raise ContractViolation("relative drop needs at least two languages")
    flip = -1.0 if matrix.orientation == model.LOWER_BETTER else 1.0
    total = 0.0
    for t in langs:
        if t == source:
            continue
        a_st = flip * matrix.metric(source, t)
        a_tt = flip * matrix.metric(t, t)
        total += (a_st - a_tt) / abs(a_tt)
    return total / (len(langs) - 1)


def multilingual_ticket(theta0: model.ParamSet, splits: list,
                        keep_fraction: float, s: float,
                        cfg: model.ModelConfig, schedule_rate: float,
                        tcfg: model.TrainConfig,
                        target_splits: dict) -> tuple:
    """IMP on a combined multi-language split, then a transfer row over all
    target languages. Returns (mask, {target -> TrainOutcome})."""
    combined = corpus.build_combined_task_split(splits, keep_fraction)
    schedule = pruning.ImpSchedule(target_sparsity=s, rate=schedule_rate,
                                   train_config=tcfg)
    mask, _ = pruning.imp(theta0, combined, cfg, schedule,
                          provenance={"combined": combined.language_id,
                                      "keep_fraction": keep_fraction})
    row = {}
    for tgt, split in sorted(target_splits.items()):
        seed = Rng(tcfg.seed).child("multiticket", tgt).next_u64()
        row[tgt] = model.train(theta0, mask, split, cfg,
                               replace(tcfg, seed=seed))
    return mask, row


def export_matrix_csv(matrix: TransferMatrix, path) -> None:
    """Long-format rows: task, sparsity, source, target, metric, winning."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "sparsity", "source", "target", "metric",
                    "best_step", "within_epsilon", "step_clause",
                    "is_winning"])
        for (src, tgt), outcome in sorted(matrix.cells.items()):
            v = matrix.verdicts[(src, tgt)]
            w.writerow([matrix.task, matrix.sparsity, src, tgt,
                        f"{outcome.best_metric:.8f}", outcome.best_step,
                        int(v.within_epsilon), int(v.step_clause),
                        int(v.is_winning)])
        for tgt, outcome in sorted(matrix.random_row.items()):
            w.writerow([matrix.task, matrix.sparsity, "rand", tgt,
                        f"{outcome.best_metric:.8f}", outcome.best_step,
                        "", "", ""])
        for tgt, base in sorted(matrix.baselines.items()):
            w.writerow([matrix.task, matrix.sparsity, "full", tgt,
                        f"{base.mean_metric:.8f}",
                        f"{base.mean_best_step:.1f}", "", "", ""])
