"""Representation similarity (CCA, SVCCA, PWCCA), per-layer cross-language
profiles, and margin-based parallel sentence retrieval.

Inputs to the CCA family are (dims x samples) matrices; coefficients come
from the singular values of the whitened cross-covariance. The projection
weights for PWCCA are computed against the first argument.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import corpus, model
from .numerics import (ContractViolation, NumericalFailure, as_matrix,
                       inv_sqrt_psd, svd)


class DegenerateRepresentation(NumericalFailure):
    """A sentence representation with zero norm cannot be ranked by cosine."""


@dataclass
class CcaResult:
    coefficients: np.ndarray  # descending, in [0, 1]
    rho_cca: float
    rho_pw: float
    weights: np.ndarray       # PWCCA alpha_i (unnormalized)
    w_x: np.ndarray           # canonical projections for the first input
    w_y: np.ndarray


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 4
    layer_index: int = -1
    pooling: str = "mean"

    def __post_init__(self):
        if self.k < 1:
            raise ContractViolation("neighbor count k must be >= 1")
        if self.pooling != "mean":
            raise ContractViolation("only mean pooling is supported")


def _center(a: np.ndarray) -> np.ndarray:
    return a - a.mean(axis=1, keepdims=True)


def default_ridge(cov: np.ndarray) -> float:
    return 1e-6 * float(np.trace(cov)) / cov.shape[0]


def cca(x, y, ridge: float | None = None) -> CcaResult:
    """Canonical correlations between (d1 x n) and (d2 x n) samples.

    ``ridge=None`` applies the default trace-scaled ridge symmetrically;
    pass 0 for exact CCA (raises on rank-deficient covariance).
    """
    x = as_matrix(x)
    y = as_matrix(y)
    d1, n = x.shape
    d2, n2 = y.shape
    if n != n2:
        raise ContractViolation("inputs must share the sample dimension")
    if n <= max(d1, d2):
        raise ContractViolation("need more samples than dimensions")
    if ridge is not None and ridge < 0:
        raise ContractViolation("ridge must be non-negative")
    xc, yc = _center(x), _center(y)
    sxx = xc @ xc.T / (n - 1)
    syy = yc @ yc.T / (n - 1)
    sxy = xc @ yc.T / (n - 1)
    lx = default_ridge(sxx) if ridge is None else ridge
    ly = default_ridge(syy) if ridge is None else ridge
    wx_white = inv_sqrt_psd(sxx, lx)
    wy_white = inv_sqrt_psd(syy, ly)
    u, rho, vt = svd(wx_white @ sxy @ wy_white)
    m = min(d1, d2)
    rho = np.clip(rho[:m], 0.0, 1.0)
    w_x = wx_white @ u[:, :m]
    w_y = wy_white @ vt.T[:, :m]
    # PWCCA weights against the FIRST argument: alpha_i = sum_j |<h_i, x_j>|
    # with h_i the i-th canonical variate of X and x_j the per-dimension
    # (neuron) sample vectors, i.e. the rows of centered X.
    h = xc.T @ w_x  # (n, m)
    alpha = np.abs(h.T @ xc.T).sum(axis=1)
    alpha_sum = float(alpha.sum())
    rho_pw = float((alpha * rho).sum() / alpha_sum) if alpha_sum > 0 \
        else float(rho.mean())
    return CcaResult(coefficients=rho, rho_cca=float(rho.mean()),
                     rho_pw=rho_pw, weights=alpha, w_x=w_x, w_y=w_y)


def _truncate(a: np.ndarray, tau: float) -> np.ndarray:
    """Project onto the top singular directions holding >= tau of the
    squared singular mass."""
    u, s, _ = svd(_center(a))
    total = float((s ** 2).sum())
    if total == 0.0:
        return _center(a)
    frac = np.cumsum(s ** 2) / total
    k = int(np.searchsorted(frac, tau - 1e-12) + 1)
    k = min(k, len(s))
    return u[:, :k].T @ _center(a)


def svcca(x, y, variance_threshold: float = 0.99,
          ridge: float | None = None) -> CcaResult:
    """CCA on SVD-truncated inputs; invariant to orthogonal transforms."""
    if not (0.0 < variance_threshold <= 1.0):
        raise ContractViolation("variance threshold must be in (0, 1]")
    return cca(_truncate(as_matrix(x), variance_threshold),
               _truncate(as_matrix(y), variance_threshold), ridge)


def pwcca(x, y, ridge: float | None = None) -> CcaResult:
    """CCA with the projection-weighted aggregate; weights come from the
    first argument, so pwcca(x, y) and pwcca(y, x) generally differ."""
    return cca(x, y, ridge)


# ---------------------------------------------------------------------------
# layer profiles


def pooled_layer_representations(params: model.ParamSet, mask,
                                 cfg: model.ModelConfig,
                                 token_sequences: list) -> list:
    """Mean-pooled hidden state per captured layer; each entry is (d x n)."""
    values = model.masked_values(params, mask)
    tokens = np.array(token_sequences, dtype=np.int64)
    _, captures, _ = model._encoder_forward(values, cfg, tokens)
    return [c.mean(axis=1).T for c in captures]


def layer_profile(params: model.ParamSet, mask, cfg: model.ModelConfig,
                  grammar: corpus.AbstractGrammar,
                  lang_a: corpus.LanguageSpec, lang_b: corpus.LanguageSpec,
                  abstract_sentences: list, method: str = "svcca",
                  variance_threshold: float = 0.99) -> list:
    """Per-layer similarity between two languages' pooled representations
    of the same abstract sentences."""
    if method not in ("svcca", "pwcca"):
        raise ContractViolation(f"unknown similarity method {method!r}")
    toks_a = [corpus.render(s, grammar, lang_a) for s in abstract_sentences]
    toks_b = [corpus.render(s, grammar, lang_b) for s in abstract_sentences]
    reps_a = pooled_layer_representations(params, mask, cfg, toks_a)
    reps_b = pooled_layer_representations(params, mask, cfg, toks_b)
    out = []
    for ra, rb in zip(reps_a, reps_b):
        if method == "svcca":
            res = svcca(ra, rb, variance_threshold)
        else:
            res = pwcca(ra, rb)
        out.append(res.rho_cca if method == "svcca" else res.rho_pw)
    return out


# ---------------------------------------------------------------------------
# margin-based retrieval


def _cosine_matrix(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    sn = np.linalg.norm(src, axis=1)
    tn = np.linalg.norm(tgt, axis=1)
    if np.any(sn == 0) or np.any(tn == 0):
        raise DegenerateRepresentation("zero-norm sentence representation")
    return (src / sn[:, None]) @ (tgt / tn[:, None]).T


def margin_retrieve(src_reprs, tgt_reprs,
                    cfg: RetrievalConfig = RetrievalConfig()):
    """Neighborhood-normalized cosine retrieval (ratio margin).

    Rows are sentences; ground truth pairs share an index. The score of a
    candidate pair is its cosine divided by the mean cosine of each side's
    k nearest neighbors in the other language. Returns
    ``(top1_accuracy, top5_accuracy, score_matrix)``.
    """
    src = as_matrix(src_reprs)
    tgt = as_matrix(tgt_reprs)
    if src.shape[0] != tgt.shape[0]:
        raise ContractViolation("source and target must pair up 1:1")
    n = src.shape[0]
    k = min(cfg.k, n)
    cos = _cosine_matrix(src, tgt)
    topk_rows = np.sort(cos, axis=1)[:, -k:]
    topk_cols = np.sort(cos, axis=0)[-k:, :]
    a = topk_rows.sum(axis=1) / (2 * k)
    b = topk_cols.sum(axis=0) / (2 * k)
    scores = cos / (a[:, None] + b[None, :])
    ranks = np.argsort(-scores, axis=1, kind="stable")
    top1 = float((ranks[:, 0] == np.arange(n)).mean())
    top5 = float(np.mean([i in ranks[i, :5] for i in range(n)]))
    return top1, top5, scores


def export_profile_csv(rows: list, path) -> None:
    """CSV rows (layer, method, value)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "method", "value"])
        for layer, method, value in rows:
            w.writerow([layer, method, f"{value:.10f}"])


def export_retrieval_csv(rows: list, path) -> None:
    """CSV rows (k, top1, top5)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "top1", "top5"])
        for k, top1, top5 in rows:
            w.writerow([k, f"{top1:.6f}", f"{top5:.6f}"])
