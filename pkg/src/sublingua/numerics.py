"""Dense linear algebra, seeded randomness, and gradient verification helpers.

Everything downstream assumes float64 and single-threaded determinism. The
random number generator is a counter-based SplitMix64 stream so that a seed
fully determines every experiment on every platform; bulk sampling goes
through numpy's Philox generator keyed from the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class NumericalFailure(RuntimeError):
    """Raised when an iterative numerical procedure fails to converge."""


class ContractViolation(ValueError):
    """Raised when an operation's input contract is violated."""


def _mix64(z: int) -> int:
    """SplitMix64 finalizer (Steele et al. mixing constants)."""
    z &= _MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _hash_tag(tag) -> int:
    if isinstance(tag, int):
        return tag & _MASK64
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Counter-based SplitMix64 stream with deterministic child derivation.

    The i-th output is mix64(seed + i * golden); identical seeds produce
    bit-identical streams everywhere. ``child(*tags)`` derives an independent
    stream from the parent seed and a tag path without consuming parent state,
    so parallel work can split reproducibly.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._counter = 0

    def next_u64(self) -> int:
        self._counter += 1
        return _mix64(self.seed + self._counter * _GOLDEN)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (unbiased)."""
        if n <= 0:
            raise ContractViolation("randint requires n >= 1")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            u = self.next_u64()
            if u <= limit:
                return u % n

    def choice_weighted(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        c = np.cumsum(w)
        u = self.next_float() * c[-1]
        return int(np.searchsorted(c, u, side="right").clip(0, len(w) - 1))

    def child(self, *tags) -> "Rng":
        s = self.seed
        for tag in tags:
            s = _mix64(s ^ _hash_tag(tag))
        return Rng(s)

    def numpy_generator(self) -> np.random.Generator:
        """Philox generator keyed from this stream (counter-based, portable)."""
        key = (self.next_u64(), self.next_u64())
        return np.random.Generator(np.random.Philox(key=key[0] | (key[1] << 64)))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def assert_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{what} contains non-finite entries")
    return a


def svd(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD ``a = u @ diag(s) @ vt`` with singular values descending.

    Returns (u, singular_values, vt). Raises NumericalFailure (with a
    condition summary) if the underlying iteration does not converge.
    """
    m = assert_finite(as_matrix(a), "svd input")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        amax = float(np.abs(m).max()) if m.size else 0.0
        raise NumericalFailure(
            f"SVD did not converge for {m.shape[0]}x{m.shape[1]} matrix "
            f"(max |entry| = {amax:.3e})"
        ) from exc
    return u, s, vt


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Returns (eigenvalues, eigenvectors) with eigenvectors in columns.
    """
    m = assert_finite(as_matrix(a), "sym_eig input")
    if m.shape[0] != m.shape[1]:
        raise ContractViolation(f"sym_eig needs a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > 1e-10 * scale:
        raise ContractViolation("sym_eig input is not symmetric within 1e-10")
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def inv_sqrt_psd(a, ridge: float = 0.0, min_eig: float = 1e-12) -> np.ndarray:
    """Inverse square root of a symmetric PSD matrix, with optional ridge.

    Raises NumericalFailure when the (ridged) matrix is numerically singular,
    since downstream whitening would be meaningless.
    """
    w, v = sym_eig(as_matrix(a) + ridge * np.eye(np.asarray(a).shape[0]))
    if w[-1] <= min_eig * max(1.0, w[0]):
        raise NumericalFailure(
            f"matrix is numerically rank-deficient (eig range [{w[-1]:.3e}, "
            f"{w[0]:.3e}]); add a ridge term"
        )
    return (v / np.sqrt(w)) @ v.T


def finite_diff_check(loss_and_grad_fn, params, probe_count: int, step: float,
                      rng: Rng) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad_fn(values)`` maps a dict of name -> array to
    ``(loss, grads)`` where grads mirrors the input dict. ``probe_count``
    coordinates are sampled uniformly over all parameters.
    """
    if not (1e-8 < step < 1e-2):
        raise ContractViolation("step must lie in (1e-8, 1e-2)")
    if probe_count < 1:
        raise ContractViolation("probe_count must be >= 1")
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_and_grad_fn(values)
    names = sorted(values)
    sizes = np.array([values[n].size for n in names])
    total = int(sizes.sum())
    offsets = np.cumsum(sizes) - sizes
    worst = 0.0
    for _ in range(probe_count):
        flat = rng.randint(total)
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(flat - offsets[which], values[name].shape)
        orig = values[name][idx]
        values[name][idx] = orig + step
        up, _ = loss_and_grad_fn(values)
        values[name][idx] = orig - step
        down, _ = loss_and_grad_fn(values)
        values[name][idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalFailure("loss became non-finite during probing")
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
