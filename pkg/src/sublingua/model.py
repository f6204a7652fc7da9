"""Maskable toy transformer encoder with exact analytic gradients.

The encoder is a standard post-norm transformer (multi-head attention +
GELU feed-forward) implemented directly in numpy with a hand-written
backward pass, so gradients can be verified against central differences.
Only the attention projection and feed-forward matrices are prunable;
embeddings, layer norms, biases and the task heads are not.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import corpus
from .numerics import ContractViolation, NumericalFailure, Rng

LN_EPS = 1e-5
_GELU_C = 0.044715
_GELU_K = math.sqrt(2.0 / math.pi)

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"

METRIC_ORIENTATION = {
    corpus.MLM: LOWER_BETTER,   # perplexity
    corpus.TAG: HIGHER_BETTER,  # micro-F1
    corpus.CLS: HIGHER_BETTER,  # accuracy
}


class TrainingFailure(RuntimeError):
    """Raised when training encounters a non-finite loss."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    max_len: int = 32
    num_tag_labels: int = corpus.NUM_CATEGORIES
    num_cls_labels: int = 3

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ContractViolation("embed_dim must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vocab_size", "embed_dim", "layers", "heads", "ffn_dim",
            "max_len", "num_tag_labels", "num_cls_labels")}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    initial_lr: float = 3e-3
    adam_epsilon: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ContractViolation("initial_lr must be positive")


class ParamSet:
    """Ordered named float64 tensors with per-entry prunable flags."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.prunable: dict[str, bool] = {}

    def add(self, name: str, array: np.ndarray, prunable: bool) -> None:
        if name in self.values:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        self.values[name] = np.asarray(array, dtype=np.float64)
        self.prunable[name] = prunable

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, v in self.values.items():
            out.add(name, v.copy(), self.prunable[name])
        return out

    def names(self) -> list:
        return list(self.values)

    def prunable_names(self) -> list:
        return [n for n in self.values if self.prunable[n]]

    def prunable_size(self) -> int:
        return sum(self.values[n].size for n in self.prunable_names())

    def schema(self) -> tuple:
        """(name, shape, prunable) triples; masks bind to this."""
        return tuple((n, self.values[n].shape, self.prunable[n])
                     for n in self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (self.schema() == other.schema()
                and all(np.array_equal(self.values[n], other.values[n])
                        for n in self.values))


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """Scaled-uniform init (bound 1/sqrt(fan_in)); LN gain 1, biases 0."""
    p = ParamSet()
    d, f, v = cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size

    def uniform(name, shape, fan_in, prunable):
        gen = Rng(seed).child("init", name).numpy_generator()
        bound = 1.0 / math.sqrt(fan_in)
        p.add(name, gen.uniform(-bound, bound, size=shape), prunable)

    uniform("embed.tok", (v, d), d, False)
    uniform("embed.pos", (cfg.max_len, d), d, False)
    for i in range(cfg.layers):
        pre = f"layer{i}"
        for w in ("wq", "wk", "wv", "wo"):
            uniform(f"{pre}.attn.{w}", (d, d), d, True)
        for b in ("bq", "bk", "bv", "bo"):
            p.add(f"{pre}.attn.{b}", np.zeros(d), False)
        p.add(f"{pre}.attn.ln_g", np.ones(d), False)
        p.add(f"{pre}.attn.ln_b", np.zeros(d), False)
        uniform(f"{pre}.ffn.w1", (d, f), d, True)
        p.add(f"{pre}.ffn.b1", np.zeros(f), False)
        uniform(f"{pre}.ffn.w2", (f, d), f, True)
        p.add(f"{pre}.ffn.b2", np.zeros(d), False)
        p.add(f"{pre}.ffn.ln_g", np.ones(d), False)
        p.add(f"{pre}.ffn.ln_b", np.zeros(d), False)
    uniform("head.mlm.w", (d, v), d, False)
    p.add("head.mlm.b", np.zeros(v), False)
    uniform("head.tag.w", (d, cfg.num_tag_labels), d, False)
    p.add("head.tag.b", np.zeros(cfg.num_tag_labels), False)
    uniform("head.cls.w", (d, cfg.num_cls_labels), d, False)
    p.add("head.cls.b", np.zeros(cfg.num_cls_labels), False)
    return p


# ---------------------------------------------------------------------------
# forward / backward primitives


def _gelu(x):
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x):
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_K * (
        1.0 + 3.0 * _GELU_C * x ** 2)


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _flat2(x):
    return x.reshape(-1, x.shape[-1])


def _split_heads(x, heads):
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _encoder_forward(values, cfg: ModelConfig, tokens: np.ndarray):
    """Returns (hidden, captures, caches). Captures include the embedding."""
    b, l = tokens.shape
    if l > cfg.max_len:
        raise ContractViolation(f"sequence length {l} exceeds max_len")
    h = values["embed.tok"][tokens] + values["embed.pos"][:l]
    captures = [h]
    caches = []
    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.layers):
        pre = f"layer{i}"
        q = h @ values[f"{pre}.attn.wq"] + values[f"{pre}.attn.bq"]
        k = h @ values[f"{pre}.attn.wk"] + values[f"{pre}.attn.bk"]
        vv = h @ values[f"{pre}.attn.wv"] + values[f"{pre}.attn.bv"]
        qh, kh, vh = (_split_heads(x, cfg.heads) for x in (q, k, vv))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        attn = _softmax(scores)
        ctx = attn @ vh
        merged = _merge_heads(ctx)
        o = merged @ values[f"{pre}.attn.wo"] + values[f"{pre}.attn.bo"]
        r1 = h + o
        a1, ln1_cache = _ln_forward(r1, values[f"{pre}.attn.ln_g"],
                                    values[f"{pre}.attn.ln_b"])
        u = a1 @ values[f"{pre}.ffn.w1"] + values[f"{pre}.ffn.b1"]
        gu = _gelu(u)
        fo = gu @ values[f"{pre}.ffn.w2"] + values[f"{pre}.ffn.b2"]
        r2 = a1 + fo
        h2, ln2_cache = _ln_forward(r2, values[f"{pre}.ffn.ln_g"],
                                    values[f"{pre}.ffn.ln_b"])
        caches.append((h, qh, kh, vh, attn, merged, ln1_cache, a1, u, gu,
                       ln2_cache))
        h = h2
        captures.append(h)
    return h, captures, caches


def _encoder_backward(values, cfg: ModelConfig, tokens, dh, caches, grads):
    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in reversed(range(cfg.layers)):
        pre = f"layer{i}"
        (h_in, qh, kh, vh, attn, merged, ln1_cache, a1, u, gu,
         ln2_cache) = caches[i]
        dr2, dg2, db2 = _ln_backward(dh, values[f"{pre}.ffn.ln_g"], ln2_cache)
        grads[f"{pre}.ffn.ln_g"] += dg2
        grads[f"{pre}.ffn.ln_b"] += db2
        # feed-forward branch
        dfo = dr2
        grads[f"{pre}.ffn.w2"] += _flat2(gu).T @ _flat2(dfo)
        grads[f"{pre}.ffn.b2"] += dfo.sum(axis=(0, 1))
        dgu = dfo @ values[f"{pre}.ffn.w2"].T
        du = dgu * _gelu_grad(u)
        grads[f"{pre}.ffn.w1"] += _flat2(a1).T @ _flat2(du)
        grads[f"{pre}.ffn.b1"] += du.sum(axis=(0, 1))
        da1 = dr2 + du @ values[f"{pre}.ffn.w1"].T
        dr1, dg1, db1 = _ln_backward(da1, values[f"{pre}.attn.ln_g"],
                                     ln1_cache)
        grads[f"{pre}.attn.ln_g"] += dg1
        grads[f"{pre}.attn.ln_b"] += db1
        # attention branch
        do = dr1
        grads[f"{pre}.attn.wo"] += _flat2(merged).T @ _flat2(do)
        grads[f"{pre}.attn.bo"] += do.sum(axis=(0, 1))
        dmerged = do @ values[f"{pre}.attn.wo"].T
        dctx = _split_heads(dmerged, cfg.heads)
        dattn = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ dctx
        dsc = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = (dsc @ kh) * scale
        dkh = (dsc.transpose(0, 1, 3, 2) @ qh) * scale
        dq, dk, dv = (_merge_heads(x) for x in (dqh, dkh, dvh))
        dh_in = dr1.copy()
        for name, dx in (("wq", dq), ("wk", dk), ("wv", dv)):
            grads[f"{pre}.attn.{name}"] += _flat2(h_in).T @ _flat2(dx)
            grads[f"{pre}.attn.b{name[1]}"] += dx.sum(axis=(0, 1))
            dh_in += dx @ values[f"{pre}.attn.{name}"].T
        dh = dh_in
    np.add.at(grads["embed.tok"], tokens, dh)
    grads["embed.pos"][: tokens.shape[1]] += dh.sum(axis=0)


def _cross_entropy(logits, targets):
    """Mean CE over rows of ``logits`` (N, C); returns (loss, dlogits)."""
    n = logits.shape[0]
    probs = _softmax(logits)
    picked = probs[np.arange(n), targets]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    dlogits = probs
    dlogits[np.arange(n), targets] -= 1.0
    return loss, dlogits / n


def encode_batch(examples, task_kind: str) -> dict:
    """Pack equal-length examples into dense arrays."""
    lengths = {len(e.surface_tokens) for e in examples}
    if len(lengths) != 1:
        raise ContractViolation("batch examples must share one length")
    tokens = np.array([e.surface_tokens for e in examples], dtype=np.int64)
    batch = {"tokens": tokens}
    if task_kind == corpus.MLM:
        positions, targets, rows = [], [], []
        for r, e in enumerate(examples):
            for pos, orig in e.labels:
                rows.append(r)
                positions.append(pos)
                targets.append(orig)
        batch["mlm_rows"] = np.array(rows, dtype=np.int64)
        batch["mlm_positions"] = np.array(positions, dtype=np.int64)
        batch["mlm_targets"] = np.array(targets, dtype=np.int64)
    elif task_kind == corpus.TAG:
        batch["tag_labels"] = np.array([e.labels for e in examples],
                                       dtype=np.int64)
    elif task_kind == corpus.CLS:
        batch["cls_labels"] = np.array([e.labels[0] for e in examples],
                                       dtype=np.int64)
    else:
        raise ContractViolation(f"unknown task kind {task_kind!r}")
    return batch


def forward(values: dict, cfg: ModelConfig, batch: dict, task_kind: str,
            capture_layers: bool = False):
    """Loss (and captured per-layer states) for a packed batch.

    ``values`` is a plain name -> array dict; masked weights are expected to
    already be zeroed, which makes them behave exactly as pruned edges.
    Returns ``(loss, captures, logits)``.
    """
    h, captures, _ = _encoder_forward(values, cfg, batch["tokens"])
    loss, _, logits = _head_loss(values, h, batch, task_kind)
    return loss, (captures if capture_layers else None), logits


def _head_loss(values, h, batch, task_kind):
    if task_kind == corpus.MLM:
        sel = h[batch["mlm_rows"], batch["mlm_positions"]]
        logits = sel @ values["head.mlm.w"] + values["head.mlm.b"]
        loss, dlogits = _cross_entropy(logits, batch["mlm_targets"])
    elif task_kind == corpus.TAG:
        b, l, d = h.shape
        logits = (h.reshape(b * l, d) @ values["head.tag.w"]
                  + values["head.tag.b"])
        loss, dlogits = _cross_entropy(logits, batch["tag_labels"].ravel())
    elif task_kind == corpus.CLS:
        pooled = h.mean(axis=1)
        logits = pooled @ values["head.cls.w"] + values["head.cls.b"]
        loss, dlogits = _cross_entropy(logits, batch["cls_labels"])
    else:
        raise ContractViolation(f"unknown task kind {task_kind!r}")
    return loss, dlogits, logits


def loss_and_grads(values: dict, cfg: ModelConfig, batch: dict,
                   task_kind: str):
    """Full forward + analytic backward pass. Returns (loss, grads)."""
    tokens = batch["tokens"]
    h, _, caches = _encoder_forward(values, cfg, tokens)
    loss, dlogits, _ = _head_loss(values, h, batch, task_kind)
    grads = {name: np.zeros_like(v) for name, v in values.items()}
    dh = np.zeros_like(h)
    if task_kind == corpus.MLM:
        grads["head.mlm.w"] += h[batch["mlm_rows"],
                                 batch["mlm_positions"]].T @ dlogits
        grads["head.mlm.b"] += dlogits.sum(axis=0)
        dsel = dlogits @ values["head.mlm.w"].T
        np.add.at(dh, (batch["mlm_rows"], batch["mlm_positions"]), dsel)
    elif task_kind == corpus.TAG:
        b, l, d = h.shape
        flat = h.reshape(b * l, d)
        grads["head.tag.w"] += flat.T @ dlogits
        grads["head.tag.b"] += dlogits.sum(axis=0)
        dh = (dlogits @ values["head.tag.w"].T).reshape(b, l, d)
    else:  # CLS
        pooled = h.mean(axis=1)
        grads["head.cls.w"] += pooled.T @ dlogits
        grads["head.cls.b"] += dlogits.sum(axis=0)
        dh = np.repeat((dlogits @ values["head.cls.w"].T)[:, None, :],
                       h.shape[1], axis=1) / h.shape[1]
    _encoder_backward(values, cfg, tokens, dh, caches, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# evaluation


def eval_metric(params: ParamSet, mask, split: corpus.DatasetSplit,
                cfg: ModelConfig, batch_size: int = 64) -> float:
    """Task metric on the validation set (perplexity / micro-F1 / accuracy)."""
    values = masked_values(params, mask)
    return _eval_values(values, cfg, split.valid, split.task_kind, batch_size)


def _eval_values(values, cfg, examples, task_kind, batch_size=64) -> float:
    total_loss = 0.0
    total_n = 0
    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start: start + batch_size]
        batch = encode_batch(chunk, task_kind)
        h, _, _ = _encoder_forward(values, cfg, batch["tokens"])
        loss, _, logits = _head_loss(values, h, batch, task_kind)
        if task_kind == corpus.MLM:
            n = len(batch["mlm_targets"])
            total_loss += loss * n
            total_n += n
        elif task_kind == corpus.TAG:
            pred = logits.argmax(axis=1)
            correct += int((pred == batch["tag_labels"].ravel()).sum())
            total_n += pred.size
        else:
            pred = logits.argmax(axis=1)
            correct += int((pred == batch["cls_labels"]).sum())
            total_n += pred.size
    if task_kind == corpus.MLM:
        return float(np.exp(total_loss / total_n))
    # Single-label multi-class micro-F1: micro precision and recall both
    # equal overall accuracy, so micro-F1 reduces to it.
    return correct / total_n


def masked_values(params: ParamSet, mask) -> dict:
    """Materialize name -> array values with the mask applied (if any)."""
    values = {n: v.copy() for n, v in params.values.items()}
    if mask is not None:
        mask.check_schema(params)
        for name, bits in mask.entries.items():
            values[name] = values[name] * bits
    return values


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainOutcome:
    best_metric: float
    best_step: int
    final_params: ParamSet
    history: list = field(default_factory=list)  # (step, train_loss, valid_metric)
    metric_orientation: str = HIGHER_BETTER

    def improves_on(self, other_metric: float) -> bool:
        if self.metric_orientation == HIGHER_BETTER:
            return self.best_metric > other_metric
        return self.best_metric < other_metric


def _better(metric, best, orientation):
    if best is None:
        return True
    if orientation == HIGHER_BETTER:
        return metric > best
    return metric < best


def train(params0: ParamSet, mask, split: corpus.DatasetSplit,
          cfg: ModelConfig, tcfg: TrainConfig) -> TrainOutcome:
    """Adam with linear-to-zero learning rate; best checkpoint retained.

    ``params0`` is never mutated. With a mask, masked coordinates are zeroed
    up front and their gradients suppressed, so they stay exactly zero.
    """
    values = masked_values(params0, mask)
    mask_bits = mask.entries if mask is not None else {}
    orientation = METRIC_ORIENTATION[split.task_kind]
    task = split.task_kind

    steps_per_epoch = math.ceil(len(split.train) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch

    m = {n: np.zeros_like(v) for n, v in values.items()}
    v2 = {n: np.zeros_like(v) for n, v in values.items()}

    history = []
    best_metric = None
    best_step = 0
    best_values = None
    running_loss = 0.0
    running_n = 0

    def evaluate(step):
        nonlocal best_metric, best_step, best_values, running_loss, running_n
        metric = _eval_values(values, cfg, split.valid, task)
        avg_loss = running_loss / running_n if running_n else float("nan")
        history.append((step, avg_loss, metric))
        running_loss, running_n = 0.0, 0
        if _better(metric, best_metric, orientation):
            best_metric = metric
            best_step = step
            best_values = {n: a.copy() for n, a in values.items()}

    evaluate(0)
    step = 0
    base_rng = Rng(tcfg.seed)
    for epoch in range(tcfg.epochs):
        order = list(range(len(split.train)))
        base_rng.child("epoch", epoch).shuffle(order)
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start: start + tcfg.batch_size]
            batch = encode_batch([split.train[i] for i in idx], task)
            loss, grads = loss_and_grads(values, cfg, batch, task)
            if not np.isfinite(loss):
                raise TrainingFailure(step, "non-finite training loss")
            running_loss += loss
            running_n += 1
            lr = tcfg.initial_lr * (1.0 - step / total_steps)
            step += 1
            t = step
            b1, b2 = tcfg.adam_beta1, tcfg.adam_beta2
            for name, g in grads.items():
                if name in mask_bits:
                    g = g * mask_bits[name]
                m[name] = b1 * m[name] + (1 - b1) * g
                v2[name] = b2 * v2[name] + (1 - b2) * g * g
                mhat = m[name] / (1 - b1 ** t)
                vhat = v2[name] / (1 - b2 ** t)
                values[name] -= lr * mhat / (np.sqrt(vhat) + tcfg.adam_epsilon)
            if step % tcfg.eval_every == 0 and step < total_steps:
                evaluate(step)
    if total_steps > 0:
        evaluate(total_steps)

    final = ParamSet()
    for name in params0.names():
        final.add(name, best_values[name], params0.prunable[name])
    return TrainOutcome(best_metric=float(best_metric), best_step=best_step,
                        final_params=final, history=history,
                        metric_orientation=orientation)


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamSet, cfg: ModelConfig,
                    provenance: dict | None = None) -> None:
    """Versioned container with bit-exact float64 round-trip."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "provenance": provenance or {},
        "entries": [(n, list(params.values[n].shape), params.prunable[n])
                    for n in params.names()],
    }
    arrays = {f"param_{i}": params.values[n]
              for i, n in enumerate(params.names())}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(
            json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Returns (params, config, provenance)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(
                f"unsupported checkpoint version {meta.get('version')!r}")
        params = ParamSet()
        for i, (name, shape, prunable) in enumerate(meta["entries"]):
            arr = data[f"param_{i}"]
            if list(arr.shape) != shape:
                raise NumericalFailure("checkpoint shape mismatch; file "
                                       "corrupt")
            params.add(name, arr, prunable)
    cfg = ModelConfig(**meta["config"])
    return params, cfg, meta["provenance"]
