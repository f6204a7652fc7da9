"""Mask discovery: iterative magnitude pruning with rewind, plus the
difference-from-initialization and diagonal-Fisher alternatives.

All three rank prunable coordinates globally across tensors and break ties
by (entry order, flat index), so identical inputs give identical masks on
every platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import corpus, masks, model
from .numerics import ContractViolation, Rng


@dataclass(frozen=True)
class ImpSchedule:
    """Prune ``rate`` of the ORIGINAL prunable parameters per round until
    ``target_sparsity``; the round count must come out integral."""

    target_sparsity: float
    rate: float = 0.1
    train_config: model.TrainConfig = field(default_factory=model.TrainConfig)

    def __post_init__(self):
        if not (0.0 < self.rate <= self.target_sparsity):
            raise ContractViolation("rate must lie in (0, target_sparsity]")
        r = self.target_sparsity / self.rate
        if abs(r - round(r)) > 1e-9:
            raise ContractViolation(
                f"target sparsity {self.target_sparsity} is not an integer "
                f"multiple of rate {self.rate}")

    @property
    def rounds(self) -> int:
        return int(round(self.target_sparsity / self.rate))


@dataclass
class ImpRound:
    round_index: int
    sparsity: float
    outcome: model.TrainOutcome
    mask_digest: str


@dataclass
class ImpTrace:
    rounds: list = field(default_factory=list)

    def export_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rounds:
                fh.write(json.dumps({
                    "round": r.round_index,
                    "sparsity": r.sparsity,
                    "best_metric": r.outcome.best_metric,
                    "best_step": r.outcome.best_step,
                    "orientation": r.outcome.metric_orientation,
                    "mask_digest": r.mask_digest,
                }) + "\n")


def _flat_prunable(params: model.ParamSet) -> np.ndarray:
    return np.concatenate([params.values[n].ravel()
                           for n in params.prunable_names()])


def _prune_lowest(flat_keep: np.ndarray, scores: np.ndarray,
                  n_to_zero: int) -> np.ndarray:
    """Zero the ``n_to_zero`` kept coordinates with the lowest scores.

    Stable ascending sort gives the (entry order, flat index) tie-break.
    """
    kept_idx = np.flatnonzero(flat_keep)
    order = kept_idx[np.argsort(scores[kept_idx], kind="stable")]
    out = flat_keep.copy()
    out[order[:n_to_zero]] = False
    return out


def imp(theta0: model.ParamSet, split: corpus.DatasetSplit,
        cfg: model.ModelConfig, schedule: ImpSchedule,
        provenance: dict | None = None) -> tuple[masks.Mask, ImpTrace]:
    """Iterative magnitude pruning with rewind to the pre-trained base.

    Each round trains the masked network from ``theta0`` to its peak, prunes
    the lowest-magnitude kept coordinates down to the round's cumulative
    quota, and rewinds kept weights to ``theta0`` for the next round.
    """
    n = theta0.prunable_size()
    mask = masks.all_ones_mask(theta0)
    trace = ImpTrace()
    base_seed = schedule.train_config.seed
    for k in range(1, schedule.rounds + 1):
        round_seed = Rng(base_seed).child("imp-round", k).next_u64()
        tcfg = replace(schedule.train_config, seed=round_seed)
        outcome = model.train(theta0, mask, split, cfg, tcfg)
        magnitudes = np.abs(_flat_prunable(outcome.final_params))
        target_zeros = int(np.floor(k * schedule.rate * n))
        flat = _prune_lowest(mask.flat(), magnitudes,
                             target_zeros - mask.zero_count)
        prov = dict(provenance or {})
        prov.update({"method": "imp", "task": split.task_kind,
                     "language": split.language_id, "seed": base_seed,
                     "rounds": k, "rate": schedule.rate})
        mask = masks.from_flat(theta0, flat,
                               k * schedule.rate, prov)
        trace.rounds.append(ImpRound(k, mask.sparsity, outcome,
                                     mask.digest()))
    return mask, trace


def diff_from_init_mask(theta0: model.ParamSet, split: corpus.DatasetSplit,
                        s: float, cfg: model.ModelConfig,
                        tcfg: model.TrainConfig) -> masks.Mask:
    """One fine-tuning run; prune the coordinates that moved least from
    their initial values."""
    if not (0.0 < s < 1.0):
        raise ContractViolation("sparsity must be in (0, 1)")
    outcome = model.train(theta0, None, split, cfg, tcfg)
    diffs = np.abs(_flat_prunable(outcome.final_params)
                   - _flat_prunable(theta0))
    n = theta0.prunable_size()
    flat = _prune_lowest(np.ones(n, dtype=bool), diffs, int(np.floor(s * n)))
    prov = {"method": "diff_init", "task": split.task_kind,
            "language": split.language_id, "seed": tcfg.seed}
    return masks.from_flat(theta0, flat, s, prov)


def fisher_mask(theta0: model.ParamSet, split: corpus.DatasetSplit,
                s: float, cfg: model.ModelConfig,
                sample_count: int = 1024, seed: int = 0) -> masks.Mask:
    """Diagonal empirical Fisher at theta0; prune the least informative.

    F_i is the mean over sampled training examples of the squared
    log-likelihood gradient at the observed labels.
    """
    if not (0.0 < s < 1.0):
        raise ContractViolation("sparsity must be in (0, 1)")
    if sample_count > len(split.train):
        raise ContractViolation("sample_count exceeds the training set")
    order = list(range(len(split.train)))
    Rng(seed).child("fisher-sample").shuffle(order)
    chosen = order[:sample_count]
    values = {k: v for k, v in theta0.values.items()}
    names = theta0.prunable_names()
    fisher = np.zeros(theta0.prunable_size())
    for i in chosen:
        batch = model.encode_batch([split.train[i]], split.task_kind)
        _, grads = model.loss_and_grads(values, cfg, batch, split.task_kind)
        g = np.concatenate([grads[n].ravel() for n in names])
        fisher += g * g
    fisher /= len(chosen)
    n = theta0.prunable_size()
    flat = _prune_lowest(np.ones(n, dtype=bool), fisher,
                         int(np.floor(s * n)))
    prov = {"method": "fisher", "task": split.task_kind,
            "language": split.language_id, "seed": seed,
            "sample_count": sample_count}
    return masks.from_flat(theta0, flat, s, prov)
