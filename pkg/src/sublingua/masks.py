"""Binary pruning masks: sparsity accounting, Jaccard overlap, baselines.

A mask stores one boolean array per prunable parameter of the originating
ParamSet (True = kept). Sparsity targets are global over all prunable
coordinates, not per tensor. Serialization packs the bits into a versioned
binary container keyed by a schema digest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .model import ParamSet
from .numerics import ContractViolation, Rng

MASK_FILE_VERSION = 1
_LAYER_RE = re.compile(r"^layer(\d+)\.")


class SchemaMismatch(ContractViolation):
    """Masks or files bound to a different ParamSet schema."""


def schema_digest(schema: tuple) -> str:
    blob = json.dumps([(n, list(s), bool(p)) for n, s, p in schema])
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def prunable_schema(params: ParamSet) -> tuple:
    return tuple((n, s, p) for n, s, p in params.schema() if p)


@dataclass
class Mask:
    """Boolean keep-arrays parallel to the prunable entries of a ParamSet."""

    entries: dict  # name -> bool ndarray, True = kept
    target_sparsity: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, bits in self.entries.items():
            self.entries[name] = np.asarray(bits, dtype=bool)

    @property
    def size(self) -> int:
        return sum(b.size for b in self.entries.values())

    @property
    def zero_count(self) -> int:
        return self.size - self.kept_count

    @property
    def kept_count(self) -> int:
        return sum(int(b.sum()) for b in self.entries.values())

    @property
    def sparsity(self) -> float:
        return self.zero_count / self.size

    def schema(self) -> tuple:
        return tuple((n, b.shape, True) for n, b in self.entries.items())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.entries):
            h.update(name.encode("utf-8"))
            h.update(np.packbits(self.entries[name].ravel()).tobytes())
        return h.hexdigest()

    def check_schema(self, other) -> None:
        if isinstance(other, ParamSet):
            ref = prunable_schema(other)
        elif isinstance(other, Mask):
            ref = other.schema()
        else:
            ref = tuple(other)
        if self.schema() != ref:
            raise SchemaMismatch("mask does not match the parameter schema")

    def flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.entries.values()])

    def copy(self) -> "Mask":
        return Mask({n: b.copy() for n, b in self.entries.items()},
                    self.target_sparsity, dict(self.provenance))

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (self.schema() == other.schema()
                and all(np.array_equal(self.entries[n], other.entries[n])
                        for n in self.entries))


def all_ones_mask(params: ParamSet, provenance: dict | None = None) -> Mask:
    entries = {n: np.ones(params.values[n].shape, dtype=bool)
               for n in params.prunable_names()}
    return Mask(entries, 0.0, provenance or {"method": "dense"})


def from_flat(params: ParamSet, flat: np.ndarray, target_sparsity: float,
              provenance: dict) -> Mask:
    entries = {}
    offset = 0
    for name in params.prunable_names():
        shape = params.values[name].shape
        size = params.values[name].size
        entries[name] = flat[offset: offset + size].reshape(shape).copy()
        offset += size
    return Mask(entries, target_sparsity, provenance)


def random_mask(schema_params: ParamSet, s: float, seed: int) -> Mask:
    """Exactly floor(s*N) zeros placed uniformly over all prunable coords."""
    if not (0.0 <= s < 1.0):
        raise ContractViolation("sparsity must be in [0, 1)")
    n = schema_params.prunable_size()
    zeros = int(np.floor(s * n))
    gen = Rng(seed).child("random-mask").numpy_generator()
    flat = np.ones(n, dtype=bool)
    flat[gen.permutation(n)[:zeros]] = False
    return from_flat(schema_params, flat, s,
                     {"method": "random", "seed": seed})


def hybrid_random_mask(base: Mask, target_s: float, seed: int) -> Mask:
    """Extend a base mask with uniformly chosen extra zeros among its keeps."""
    n = base.size
    target_zeros = int(np.floor(target_s * n))
    if base.zero_count > target_zeros:
        raise ContractViolation("base mask is already sparser than target")
    flat = base.flat().copy()
    kept_idx = np.flatnonzero(flat)
    extra = target_zeros - base.zero_count
    gen = Rng(seed).child("hybrid-mask").numpy_generator()
    flat[kept_idx[gen.permutation(len(kept_idx))[:extra]]] = False
    prov = {"method": "hybrid_random", "seed": seed, "base": base.provenance}
    entries = {}
    offset = 0
    for name, bits in base.entries.items():
        entries[name] = flat[offset: offset + bits.size].reshape(bits.shape)
        offset += bits.size
    return Mask(entries, target_s, prov)


@dataclass
class OverlapReport:
    pair: tuple
    global_jaccard: float
    per_layer: list  # (layer_name, jaccard)


def _layer_of(name: str) -> str:
    m = _LAYER_RE.match(name)
    return m.group(0)[:-1] if m else "other"


def jaccard(m1: Mask, m2: Mask, pair=("a", "b")) -> OverlapReport:
    """Kept-coordinate Jaccard overlap, global and grouped by encoder layer."""
    m1.check_schema(m2)
    inter_by_layer: dict = {}
    union_by_layer: dict = {}
    for name in m1.entries:
        layer = _layer_of(name)
        a, b = m1.entries[name], m2.entries[name]
        inter_by_layer[layer] = inter_by_layer.get(layer, 0) + int((a & b).sum())
        union_by_layer[layer] = union_by_layer.get(layer, 0) + int((a | b).sum())
    total_i = sum(inter_by_layer.values())
    total_u = sum(union_by_layer.values())
    per_layer = [(layer, inter_by_layer[layer] / union_by_layer[layer]
                  if union_by_layer[layer] else 1.0)
                 for layer in sorted(inter_by_layer)]
    return OverlapReport(pair=tuple(pair),
                         global_jaccard=total_i / total_u if total_u else 1.0,
                         per_layer=per_layer)


def expected_random_jaccard(s: float) -> float:
    """E[Jaccard] of two independent uniform masks at sparsity s."""
    return (1.0 - s) ** 2 / (1.0 - s ** 2)


def overlap_matrix(mask_list: list) -> np.ndarray:
    """Symmetric matrix of pairwise global Jaccard values."""
    if len(mask_list) < 2:
        raise ContractViolation("need at least two masks")
    n = len(mask_list)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            v = jaccard(mask_list[i], mask_list[j]).global_jaccard
            out[i, j] = out[j, i] = v
    return out


def save_mask(mask: Mask, path) -> None:
    """Versioned header (schema digest, sparsity, provenance) + packed bits."""
    header = {
        "version": MASK_FILE_VERSION,
        "schema_digest": schema_digest(mask.schema()),
        "target_sparsity": mask.target_sparsity,
        "provenance": mask.provenance,
        "entries": [(n, list(mask.entries[n].shape)) for n in mask.entries],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in mask.entries:
            fh.write(np.packbits(mask.entries[name].ravel()).tobytes())


def load_mask(path, schema_params: ParamSet | None = None) -> Mask:
    """Bit-exact load; verifies the schema digest when a ParamSet is given."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        hlen = int.from_bytes(raw[:8], "little")
        header = json.loads(raw[8: 8 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ContractViolation(f"corrupt mask file {path}") from exc
    if header.get("version") != MASK_FILE_VERSION:
        raise ContractViolation("unsupported mask file version")
    offset = 8 + hlen
    entries = {}
    for name, shape in header["entries"]:
        size = int(np.prod(shape))
        nbytes = (size + 7) // 8
        chunk = raw[offset: offset + nbytes]
        if len(chunk) != nbytes:
            raise ContractViolation(f"truncated mask file {path}")
        bits = np.unpackbits(np.frombuffer(chunk, dtype=np.uint8),
                             count=size).astype(bool).reshape(shape)
        entries[name] = bits
        offset += nbytes
    if offset != len(raw):
        raise ContractViolation(f"trailing bytes in mask file {path}")
    mask = Mask(entries, header["target_sparsity"], header["provenance"])
    if schema_digest(mask.schema()) != header["schema_digest"]:
        raise SchemaMismatch("mask file digest does not match its entries")
    if schema_params is not None:
        try:
            mask.check_schema(schema_params)
        except SchemaMismatch:
            raise SchemaMismatch(
                f"mask file {path} was built for a different parameter "
                "schema") from None
    return mask


def export_overlap_csv(reports: list, path) -> None:
    """CSV rows (pair_a, pair_b, layer, jaccard); 'global' rows included."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_a", "pair_b", "layer", "jaccard"])
        for rep in reports:
            a, b = rep.pair
            w.writerow([a, b, "global", f"{rep.global_jaccard:.10f}"])
            for layer, val in rep.per_layer:
                w.writerow([a, b, layer, f"{val:.10f}"])
