"""Random projection ensembles and their wire encoding.

Three ensembles of k x d projection matrices W are provided, all scaled so
that E[W^T W] = I:

* rotation:  W = sqrt(d/k) * (k rows of a Haar-distributed orthogonal matrix),
* SRHT:      W = sqrt(d/k) * S H D  with H the orthonormal Walsh-Hadamard
  matrix, D a Rademacher sign diagonal, and S a without-replacement row
  sampler; applies in O(d log d) and is never materialized,
* gaussian:  W with i.i.d. N(0, 1/k) entries.

The correlated-SRHT ensemble reuses the SRHT structure but draws the sign
diagonal from a seed shared by all clients, which lets a server collapse the
per-client adjoints into a single transform.

Transforms are immutable after construction and all sampling is a pure
function of the seed, so any of this is safe to use concurrently.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import scipy.linalg

from .rng import as_seed, derive_seed, generator

WIRE_VERSION = 1
_TRANSFORM_MAGIC = 0x504A  # "PJ"
_HEADER = struct.Struct(">HBBBII")  # magic, version, kind, mode, d, k


class DimensionError(ValueError):
    """Shape or power-of-two precondition violated."""


class EncodingError(ValueError):
    """Malformed transform or message bytes."""


class TransformKind(IntEnum):
    ROTATION = 0
    SRHT = 1
    GAUSSIAN = 2
    CORRELATED_SRHT = 3


class EncodingMode(IntEnum):
    SEED = 0        # header + 16-byte seed; receiver re-derives everything
    EXPLICIT = 1    # header + 16-byte sign seed + bit-packed row indices
    INDICES = 2     # header + bit-packed row indices (sign diagonal pre-agreed)


def is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    if n < 1:
        raise DimensionError("dimension must be positive")
    return 1 << (n - 1).bit_length()


def pad_pow2(v: np.ndarray) -> np.ndarray:
    """Zero-pad a vector to the next power-of-two length (no-op if already)."""
    v = np.asarray(v, dtype=np.float64)
    d = next_pow2(v.shape[0])
    if d == v.shape[0]:
        return v
    out = np.zeros(d)
    out[: v.shape[0]] = v
    return out


def fwht(x: np.ndarray) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform of a power-of-two length vector.

    Returns H @ x where H_{ij} = (-1)^{<bits(i), bits(j)>} / sqrt(d).
    O(d log d), involutory, norm preserving. The input is not modified.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("fwht expects a 1-d vector")
    d = x.shape[0]
    if not is_pow2(d):
        raise DimensionError(f"length {d} is not a power of two")
    y = x.copy()
    h = 1
    while h < d:
        y = y.reshape(-1, 2 * h)
        a = y[:, :h].copy()
        y[:, :h] += y[:, h:]
        y[:, h:] *= -1.0
        y[:, h:] += a
        h *= 2
    y = y.reshape(d)
    y /= math.sqrt(d)
    return y


def sample_without_replacement(d: int, k: int, seed: int | bytes) -> np.ndarray:
    """k distinct indices in [0, d), uniform over ordered k-subsets.

    Partial Fisher-Yates over arange(d); deterministic given the seed.
    """
    if not 1 <= k <= d:
        raise DimensionError(f"need 1 <= k <= d, got k={k} d={d}")
    g = generator(seed, "swor")
    arr = np.arange(d, dtype=np.int64)
    offsets = g.integers(0, d - np.arange(k, dtype=np.int64))
    for i in range(k):
        j = i + offsets[i]
        arr[i], arr[j] = arr[j], arr[i]
    return arr[:k].copy()


@dataclass(frozen=True)
class TransformSpec:
    """Everything needed to reproduce one realized projection.

    Two specs with equal fields realize bit-identical transforms. ``indices``
    is populated for the SRHT variants once sampled; ``shared_seed`` only for
    the correlated variant. ``seed`` may be None on specs decoded from an
    indices-only encoding (the private seed never travels).
    """

    kind: TransformKind
    d: int
    k: int
    seed: bytes | None
    indices: tuple[int, ...] | None = None
    shared_seed: bytes | None = None

    def __post_init__(self):
        if not 1 <= self.k <= self.d:
            raise DimensionError(f"need 1 <= k <= d, got k={self.k} d={self.d}")
        if self.kind in (TransformKind.SRHT, TransformKind.CORRELATED_SRHT) and not is_pow2(self.d):
            raise DimensionError(f"SRHT needs power-of-two d, got {self.d}")
        if self.seed is not None:
            object.__setattr__(self, "seed", as_seed(self.seed))
        if self.shared_seed is not None:
            object.__setattr__(self, "shared_seed", as_seed(self.shared_seed))
        if self.indices is not None:
            idx = tuple(int(i) for i in self.indices)
            if len(idx) != self.k or len(set(idx)) != self.k:
                raise DimensionError("indices must hold exactly k distinct entries")
            if any(i < 0 or i >= self.d for i in idx):
                raise DimensionError("index out of range")
            object.__setattr__(self, "indices", idx)


class LinearTransform:
    """A realized projection W, applied without ever forming W on the fast paths.

    SRHT variants keep only the sign diagonal and row indices. The rotation
    ensemble at tall aspect ratios keeps the Gaussian matrix G and the
    Cholesky factor C of its Gram matrix: the orthonormal frame is G C^{-1},
    so W v and W^T u reduce to one thin mat-vec plus a small triangular
    solve, and the explicit k x d matrix is materialized only on demand.
    """

    def __init__(self, spec: TransformSpec, *, matrix: np.ndarray | None = None,
                 signs: np.ndarray | None = None, indices: np.ndarray | None = None,
                 frame_factors: tuple[np.ndarray, np.ndarray] | None = None):
        self.spec = spec
        self._matrix = matrix
        self._signs = signs
        self._indices = indices
        self._factors = frame_factors
        self._scale = math.sqrt(spec.d / spec.k)
        for arr in (matrix, signs, indices):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def signs(self) -> np.ndarray | None:
        return self._signs

    @property
    def indices(self) -> np.ndarray | None:
        return self._indices

    @property
    def matrix(self) -> np.ndarray | None:
        """The explicit k x d matrix for the dense ensembles (None for SRHT)."""
        if self._matrix is None and self._factors is not None:
            G, C = self._factors
            Ci, info = scipy.linalg.lapack.dtrtri(C, lower=0)
            if info != 0:
                raise np.linalg.LinAlgError("triangular factor is singular")
            W = self._scale * scipy.linalg.blas.dtrmm(1.0, Ci, G, side=1, lower=0).T
            W.setflags(write=False)
            self._matrix = W
        return self._matrix

    def apply(self, v: np.ndarray) -> np.ndarray:
        """W @ v."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.d,):
            raise DimensionError(f"expected vector of length {self.d}, got {v.shape}")
        if self._factors is not None:
            G, C = self._factors
            x, info = scipy.linalg.lapack.dtrtrs(C, G.T @ v, lower=0, trans=1)
            return self._scale * x
        if self._matrix is not None:
            return self._matrix @ v
        return self._scale * fwht(v * self._signs)[self._indices]

    def apply_adjoint(self, u: np.ndarray) -> np.ndarray:
        """W.T @ u; the SRHT path scatters, transforms, and signs in O(d log d)."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.k,):
            raise DimensionError(f"expected vector of length {self.k}, got {u.shape}")
        if self._factors is not None:
            G, C = self._factors
            y, info = scipy.linalg.lapack.dtrtrs(C, u, lower=0, trans=0)
            return self._scale * (G @ y)
        if self._matrix is not None:
            return self._matrix.T @ u
        z = np.zeros(self.d)
        z[self._indices] = u
        return self._scale * (fwht(z) * self._signs)

    def as_dense(self) -> np.ndarray:
        """Materialize W as a k x d array (diagnostics and small-d oracles)."""
        if self._signs is None:
            return self.matrix.copy()
        eye = np.eye(self.d)
        rows = np.stack([fwht(eye[i]) for i in self._indices])
        return self._scale * rows * self._signs[None, :]


def _haar_factors(d: int, k: int, g: np.random.Generator):
    """Factored uniform k-frame on the Stiefel manifold: returns (G, C) with
    the frame Q = G C^{-1}, or an explicit frame when factoring is unsafe.

    Equivalent in law to k rows sampled without replacement from a Haar
    orthogonal matrix: chol(G^T G) has a positive diagonal, so G C^{-1} is
    exactly the sign-corrected QR factor of the Gaussian matrix G. The
    Cholesky route needs a well-conditioned Gram matrix, so square-ish shapes
    (2k > d) fall back to LAPACK QR; the branch depends only on (d, k) and
    realization stays a pure function of the seed.
    """
    G = g.standard_normal((d, k))
    if 2 * k <= d:
        A = scipy.linalg.blas.dsyrk(1.0, G, trans=1)
        C, info = scipy.linalg.lapack.dpotrf(A, lower=0)  # clean upper factor
        if info == 0:
            return G, C
        # numerical rank deficiency: fall through to LAPACK QR
    Q, R = np.linalg.qr(G, mode="reduced")
    Q = Q * np.sign(np.diag(R))[None, :]
    return np.ascontiguousarray(Q.T), None


def realize(spec: TransformSpec, shared_seed: bytes | None = None) -> LinearTransform:
    """Realize the transform a spec describes.

    For the correlated variant the shared seed may live in the spec or be
    supplied by the caller (the server side, where it is pre-agreed).
    """
    d, k = spec.d, spec.k
    if spec.kind == TransformKind.ROTATION:
        g = generator(spec.seed, "rotation")
        first, second = _haar_factors(d, k, g)
        if second is None:
            return LinearTransform(spec, matrix=math.sqrt(d / k) * first)
        return LinearTransform(spec, frame_factors=(first, second))
    if spec.kind == TransformKind.GAUSSIAN:
        g = generator(spec.seed, "gaussian")
        W = g.standard_normal((k, d)) / math.sqrt(k)
        return LinearTransform(spec, matrix=W)
    if spec.kind == TransformKind.SRHT:
        signs = _rademacher(d, spec.seed)
        indices = np.asarray(spec.indices, dtype=np.int64) if spec.indices is not None \
            else sample_without_replacement(d, k, derive_seed(spec.seed, "rows"))
        full = TransformSpec(spec.kind, d, k, spec.seed, tuple(int(i) for i in indices))
        return LinearTransform(full, signs=signs, indices=indices)
    if spec.kind == TransformKind.CORRELATED_SRHT:
        shared = spec.shared_seed if spec.shared_seed is not None else shared_seed
        if shared is None:
            raise ValueError("correlated transform needs a shared seed")
        signs = _rademacher(d, shared)
        if spec.indices is not None:
            indices = np.asarray(spec.indices, dtype=np.int64)
        elif spec.seed is not None:
            indices = sample_without_replacement(d, k, derive_seed(spec.seed, "rows"))
        else:
            raise ValueError("correlated spec carries neither indices nor a private seed")
        full = TransformSpec(spec.kind, d, k, spec.seed,
                             tuple(int(i) for i in indices), as_seed(shared))
        return LinearTransform(full, signs=signs, indices=indices)
    raise ValueError(f"unknown transform kind {spec.kind!r}")


def _rademacher(d: int, seed: bytes) -> np.ndarray:
    # int8 keeps per-transform memory at d bytes; arithmetic upcasts to f64
    g = generator(seed, "signs")
    return (2 * g.integers(0, 2, size=d) - 1).astype(np.int8)


def sample_rotation(d: int, k: int, seed: int | bytes) -> LinearTransform:
    """W = sqrt(d/k) times k without-replacement rows of a Haar rotation."""
    return realize(TransformSpec(TransformKind.ROTATION, d, k, as_seed(seed)))


def sample_srht(d: int, k: int, seed: int | bytes) -> LinearTransform:
    """W = sqrt(d/k) S H D with seed-derived signs and row sample."""
    return realize(TransformSpec(TransformKind.SRHT, d, k, as_seed(seed)))


def sample_gaussian(d: int, k: int, seed: int | bytes) -> LinearTransform:
    """Dense W with i.i.d. N(0, 1/k) entries."""
    if not 1 <= k <= d:
        raise DimensionError(f"need 1 <= k <= d, got k={k} d={d}")
    return realize(TransformSpec(TransformKind.GAUSSIAN, d, k, as_seed(seed)))


def sample_correlated_srht(d: int, k: int, seed: int | bytes,
                           shared_seed: int | bytes) -> LinearTransform:
    """SRHT whose sign diagonal comes from the server-published shared seed."""
    return realize(TransformSpec(TransformKind.CORRELATED_SRHT, d, k,
                                 as_seed(seed), shared_seed=as_seed(shared_seed)))


# --- wire encoding ---------------------------------------------------------

def index_bit_width(d: int) -> int:
    """ceil(log2 d); the packed width of one row index."""
    return (d - 1).bit_length()


def explicit_bit_length(d: int, k: int) -> int:
    """Exact encoded size, in bits, of an EXPLICIT encoding (incl. padding)."""
    idx_bytes = (k * index_bit_width(d) + 7) // 8
    return 8 * (_HEADER.size + 16 + idx_bytes)


def seed_mode_bit_length() -> int:
    return 8 * (_HEADER.size + 16)


def _pack_indices(indices: tuple[int, ...], d: int) -> bytes:
    width = index_bit_width(d)
    if width == 0:
        return b""
    acc = 0
    for idx in indices:
        acc = (acc << width) | idx
    nbits = width * len(indices)
    acc <<= (-nbits) % 8  # zero-pad to a byte boundary, MSB first
    return acc.to_bytes((nbits + 7) // 8, "big")


def _unpack_indices(data: bytes, k: int, d: int) -> tuple[int, ...]:
    width = index_bit_width(d)
    if width == 0:
        return (0,) * k
    nbytes = (k * width + 7) // 8
    if len(data) < nbytes:
        raise EncodingError("truncated index payload")
    acc = int.from_bytes(data[:nbytes], "big")
    acc >>= (8 * nbytes - k * width)
    mask = (1 << width) - 1
    out = []
    for i in range(k):
        shift = (k - 1 - i) * width
        out.append((acc >> shift) & mask)
    return tuple(out)


def encode_transform(spec: TransformSpec, mode: EncodingMode | None = None) -> bytes:
    """Serialize a spec (big-endian layout, magic ``PJ``).

    SEED mode ships only the 16-byte seed. EXPLICIT additionally packs the k
    row indices at ceil(log2 d) bits each. INDICES (correlated variant) ships
    the indices alone; the sign diagonal is pre-agreed out of band.
    """
    if mode is None:
        mode = EncodingMode.INDICES if spec.kind == TransformKind.CORRELATED_SRHT \
            else EncodingMode.SEED
    mode = EncodingMode(mode)
    if mode == EncodingMode.INDICES and spec.kind != TransformKind.CORRELATED_SRHT:
        raise EncodingError("indices-only encoding is reserved for the correlated variant")
    if spec.kind == TransformKind.CORRELATED_SRHT and mode != EncodingMode.INDICES:
        raise EncodingError("correlated transforms are encoded indices-only")
    head = _HEADER.pack(_TRANSFORM_MAGIC, WIRE_VERSION, int(spec.kind), int(mode),
                        spec.d, spec.k)
    if mode == EncodingMode.SEED:
        if spec.seed is None:
            raise EncodingError("SEED mode needs a seed")
        return head + spec.seed
    if spec.indices is None:
        raise EncodingError("EXPLICIT/INDICES mode needs realized indices")
    packed = _pack_indices(spec.indices, spec.d)
    if mode == EncodingMode.EXPLICIT:
        if spec.seed is None:
            raise EncodingError("EXPLICIT mode needs a seed")
        return head + spec.seed + packed
    return head + packed


def encoded_length(data: bytes, offset: int = 0) -> int:
    """Total byte length of the transform encoding starting at ``offset``."""
    if len(data) - offset < _HEADER.size:
        raise EncodingError("truncated transform header")
    magic, version, kind, mode, d, k = _HEADER.unpack_from(data, offset)
    if magic != _TRANSFORM_MAGIC:
        raise EncodingError(f"bad transform magic 0x{magic:04X}")
    idx_bytes = (k * index_bit_width(d) + 7) // 8 if d >= 1 else 0
    if mode == EncodingMode.SEED:
        return _HEADER.size + 16
    if mode == EncodingMode.EXPLICIT:
        return _HEADER.size + 16 + idx_bytes
    if mode == EncodingMode.INDICES:
        return _HEADER.size + idx_bytes
    raise EncodingError(f"unknown encoding mode {mode}")


def decode_transform(data: bytes) -> TransformSpec:
    """Exact inverse of :func:`encode_transform`."""
    if len(data) < _HEADER.size:
        raise EncodingError("truncated transform header")
    magic, version, kind, mode, d, k = _HEADER.unpack_from(data)
    if magic != _TRANSFORM_MAGIC:
        raise EncodingError(f"bad transform magic 0x{magic:04X}")
    if version != WIRE_VERSION:
        raise EncodingError(f"unsupported wire version {version}")
    try:
        kind = TransformKind(kind)
        mode = EncodingMode(mode)
    except ValueError as exc:
        raise EncodingError(str(exc)) from exc
    if d < 1 or not 1 <= k <= d:
        raise EncodingError(f"bad dimensions d={d} k={k}")
    if len(data) != encoded_length(data):
        raise EncodingError(f"bad encoding length {len(data)}, want {encoded_length(data)}")
    pos = _HEADER.size
    seed = None
    if mode in (EncodingMode.SEED, EncodingMode.EXPLICIT):
        seed = data[pos:pos + 16]
        pos += 16
    indices = None
    if mode in (EncodingMode.EXPLICIT, EncodingMode.INDICES):
        indices = _unpack_indices(data[pos:], k, d)
        if len(set(indices)) != k:
            raise EncodingError("decoded indices are not distinct")
    try:
        return TransformSpec(kind, d, k, seed, indices)
    except DimensionError as exc:
        raise EncodingError(str(exc)) from exc


# --- ensemble diagnostics --------------------------------------------------

@dataclass(frozen=True)
class EnsembleDiagnostics:
    """Monte Carlo estimates of the quantities the error analysis depends on.

    ``opnorm_sq_estimate`` estimates E||W^T||^2, ``opnorm_excess`` its excess
    over d/k, and ``bias_norm_estimate`` the norm of E[W^T W v / ||W v||] - v.
    ``stderr`` is the standard error of the operator-norm estimate.
    """

    opnorm_sq_estimate: float
    bias_norm_estimate: float
    opnorm_excess: float
    trials: int
    stderr: float


def measure_diagnostics(kind: TransformKind, d: int, k: int, v: np.ndarray,
                        trials: int, seed: int | bytes = 0) -> EnsembleDiagnostics:
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError("diagnostics need a unit-norm direction")
    if trials < 100:
        raise ValueError("need at least 100 trials")
    kind = TransformKind(kind)
    seed = as_seed(seed)
    opnorms = np.empty(trials)
    mean_r = np.zeros(d)
    for t in range(trials):
        sub = derive_seed(seed, "diag", t)
        if kind == TransformKind.CORRELATED_SRHT:
            W = sample_correlated_srht(d, k, sub, derive_seed(seed, "diag-shared", t))
        else:
            W = realize(TransformSpec(kind, d, k, sub))
        if W.matrix is not None:
            opnorms[t] = np.linalg.norm(W.matrix, 2) ** 2
        else:
            # SRHT rows are orthogonal by construction: W W^T = (d/k) I
            opnorms[t] = d / k
        y = W.apply(v)
        mean_r += W.apply_adjoint(y / np.linalg.norm(y))
    mean_r /= trials
    est = float(opnorms.mean())
    stderr = float(opnorms.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return EnsembleDiagnostics(
        opnorm_sq_estimate=est,
        bias_norm_estimate=float(np.linalg.norm(mean_r - v)),
        opnorm_excess=max(0.0, est - d / k),
        trials=trials,
        stderr=stderr,
    )
