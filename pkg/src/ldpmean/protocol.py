"""Client/server protocol variants and the message wire format.

Every client projects its unit vector to k dimensions, renormalizes, runs
PrivUnitG there, and ships the privatized vector together with a compact
encoding of its projection; the server applies the adjoint projections and
averages. Variants differ in the projection ensemble and normalization:

* ``projunit_client`` with the rotation / SRHT / gaussian ensemble,
* ``correlated_client``: all clients share one seed-published sign diagonal,
  so the server adjoint collapses to a single O(d log d) transform after an
  O(nk) sparse accumulation,
* ``unbiased_rotation_client``: rescales the payload by a closed-form Gamma
  ratio so the reconstruction is exactly unbiased,
* ``nearly_unbiased_client``: completes the projected norm to a constant C
  with one extra coordinate instead of renormalizing,
* ``direct_privunitg_client``: no projection, the d-dimensional baseline.

Clients are pure functions of (input, seed) and run concurrently; servers
reduce messages associatively. Privacy of every variant reduces to the single
PrivUnitG invocation on a unit vector: the transform is input independent.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.special import gammaln

from . import transforms
from .privunitg import optimize_params, randomize
from .rng import as_seed, derive_seed, seed_digest
from .transforms import (EncodingError, EncodingMode, LinearTransform,
                         TransformKind, TransformSpec, fwht)

_MESSAGE_MAGIC = 0x4C44  # "LD"
_MSG_HEADER = struct.Struct(">HBBII8sB")  # magic, ver, variant, d, k, digest, flags
_FLAG_TRANSFORM = 0x01
_FLAG_C = 0x02
_ZERO_DIGEST = b"\x00" * 8


class ProtocolError(ValueError):
    pass


class DegenerateProjectionError(ProtocolError):
    """The projected input vanished twice in a row; cannot normalize."""


class MessageVariant(IntEnum):
    PROJUNIT_ROT = 0
    PROJUNIT_SRHT = 1
    PROJUNIT_GAUSS = 2
    CORRELATED = 3
    UNBIASED_ROT = 4
    NEARLY_UNBIASED_SRHT = 5
    DIRECT_PRIVUNITG = 6


_ENSEMBLE_VARIANTS = {
    "rotation": MessageVariant.PROJUNIT_ROT,
    "srht": MessageVariant.PROJUNIT_SRHT,
    "gaussian": MessageVariant.PROJUNIT_GAUSS,
}

_VARIANT_KINDS = {
    MessageVariant.PROJUNIT_ROT: TransformKind.ROTATION,
    MessageVariant.PROJUNIT_SRHT: TransformKind.SRHT,
    MessageVariant.PROJUNIT_GAUSS: TransformKind.GAUSSIAN,
    MessageVariant.UNBIASED_ROT: TransformKind.ROTATION,
}


def payload_length(variant: MessageVariant, d: int, k: int) -> int:
    if variant == MessageVariant.DIRECT_PRIVUNITG:
        return d
    if variant == MessageVariant.NEARLY_UNBIASED_SRHT:
        return k + 1
    return k


@dataclass
class ClientMessage:
    """One client's wire object: variant tag, transform encoding, payload.

    The payload is stored exactly as transmitted (32-bit floats); servers
    widen to float64 when aggregating. ``realized`` is an in-process shortcut
    to the sender's realized transform: it never travels (serialize drops it,
    deserialize leaves it None) and servers that see None re-derive the exact
    same transform from the encoding.
    """

    variant: MessageVariant
    d: int
    k: int
    transform_encoding: bytes | None
    payload: np.ndarray
    c_value: float | None = None
    seed_digest: bytes = _ZERO_DIGEST
    realized: LinearTransform | None = None

    def __post_init__(self):
        self.payload = np.asarray(self.payload, dtype=np.float32)
        want = payload_length(self.variant, self.d, self.k)
        if self.payload.shape != (want,):
            raise ProtocolError(
                f"variant {self.variant.name} expects payload length {want}, "
                f"got {self.payload.shape}")
        has_c = self.c_value is not None
        if has_c != (self.variant == MessageVariant.NEARLY_UNBIASED_SRHT):
            raise ProtocolError("c_value present iff variant is NEARLY_UNBIASED_SRHT")
        if has_c:
            self.c_value = float(np.float32(self.c_value))
            if self.c_value < 1.0:
                raise ProtocolError(f"norm completion constant must be >= 1, got {self.c_value}")
        if (self.transform_encoding is None) != (self.variant == MessageVariant.DIRECT_PRIVUNITG):
            raise ProtocolError("transform encoding absent iff variant is DIRECT_PRIVUNITG")
        if len(self.seed_digest) != 8:
            raise ProtocolError("seed digest must be 8 bytes")


@dataclass
class ServerEstimate:
    mu_hat: np.ndarray
    n: int
    total_bits: int
    server_nanos: int


@dataclass(frozen=True)
class CorrelatedConfig:
    """Server-published randomness for the correlated variants.

    ``groups`` > 1 splits clients over independently seeded transforms; the
    accuracy claims in this library are only exercised at the default G=1.
    """

    shared_seed: bytes
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "shared_seed", as_seed(self.shared_seed))
        if self.groups < 1:
            raise ValueError("groups must be >= 1")

    def group_seed(self, group: int) -> bytes:
        if self.groups == 1:
            return self.shared_seed
        return derive_seed(self.shared_seed, "group", group % self.groups)

    def group_digests(self) -> dict[bytes, bytes]:
        return {seed_digest(self.group_seed(g)): self.group_seed(g)
                for g in range(self.groups)}


def completion_constant(k: int, delta: float) -> float:
    """C = 1 + 2 * sqrt(log^2(k/delta) / k), the norm-completion bound.

    The 2.0 is a calibrated stand-in for the concentration constant and is
    carried on the wire so both sides agree.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    return 1.0 + 2.0 * abs(math.log(k / delta)) / math.sqrt(k)


def default_bias_delta(d: int, k: int, n: int) -> float:
    """The bias-probability target delta = k / (n^2 d)."""
    return min(k / (n * n * d), 0.5)


def unbiased_rotation_scale(d: int, k: int) -> float:
    """c = sqrt(k/d) * Gamma((d+1)/2) Gamma(k/2) / (Gamma((k+1)/2) Gamma(d/2)).

    Scaling a rotation-ensemble payload by c makes E[W^T c u] = v exactly;
    c = 1 when k = d and c -> 1 + Theta(1/k) for k << d.
    """
    lg = gammaln((d + 1) / 2.0) + gammaln(k / 2.0) - gammaln((k + 1) / 2.0) - gammaln(d / 2.0)
    return math.sqrt(k / d) * math.exp(lg)


def _check_unit_input(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ProtocolError("client input must be a vector")
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ProtocolError(f"client input must be unit norm, got {np.linalg.norm(v)}")
    return v


def _project_normalized(sample_fn, v: np.ndarray, seed: bytes):
    """Sample a transform, project, and normalize; resample once on ||Wv|| = 0."""
    for label in ("transform", "transform-retry"):
        W = sample_fn(derive_seed(seed, label))
        v_p = W.apply(v)
        norm = float(np.linalg.norm(v_p))
        if norm > 0.0:
            return W, v_p / norm
    raise DegenerateProjectionError("projected input is the zero vector")


def projunit_client(v: np.ndarray, k: int, eps: float, seed: int | bytes,
                    ensemble: str = "srht", mode: EncodingMode | None = None,
                    noiseless: bool = False) -> ClientMessage:
    """Project v with a fresh transform, privatize in dimension k, package.

    ``noiseless=True`` replaces the randomizer by the identity; it exists so
    reconstruction paths can be tested exactly and is never private.
    """
    v = _check_unit_input(v)
    if ensemble not in _ENSEMBLE_VARIANTS:
        raise ProtocolError(f"unknown ensemble {ensemble!r}")
    variant = _ENSEMBLE_VARIANTS[ensemble]
    seed = as_seed(seed)
    d = v.shape[0]
    sample = {
        "rotation": lambda s: transforms.sample_rotation(d, k, s),
        "srht": lambda s: transforms.sample_srht(d, k, s),
        "gaussian": lambda s: transforms.sample_gaussian(d, k, s),
    }[ensemble]
    W, u = _project_normalized(sample, v, seed)
    u_hat = u if noiseless else randomize(u, optimize_params(eps, k), derive_seed(seed, "noise"))
    return ClientMessage(
        variant=variant, d=d, k=k,
        transform_encoding=transforms.encode_transform(W.spec, mode),
        payload=u_hat.astype(np.float32),
        realized=W,
    )


def unbiased_rotation_client(v: np.ndarray, k: int, eps: float, seed: int | bytes,
                             noiseless: bool = False) -> ClientMessage:
    """Rotation-ensemble client whose payload is scaled to kill the O(1/k)
    shrinkage of the plain variant."""
    v = _check_unit_input(v)
    seed = as_seed(seed)
    d = v.shape[0]
    W, u = _project_normalized(lambda s: transforms.sample_rotation(d, k, s), v, seed)
    u_hat = u if noiseless else randomize(u, optimize_params(eps, k), derive_seed(seed, "noise"))
    u_hat = unbiased_rotation_scale(d, k) * u_hat
    return ClientMessage(
        variant=MessageVariant.UNBIASED_ROT, d=d, k=k,
        transform_encoding=transforms.encode_transform(W.spec, EncodingMode.SEED),
        payload=u_hat.astype(np.float32),
        realized=W,
    )


def correlated_client(v: np.ndarray, k: int, eps: float, config: CorrelatedConfig,
                      seed: int | bytes, group: int = 0,
                      noiseless: bool = False) -> ClientMessage:
    """SRHT client using the pre-agreed sign diagonal; ships only row indices."""
    v = _check_unit_input(v)
    seed = as_seed(seed)
    d = v.shape[0]
    shared = config.group_seed(group)
    W, u = _project_normalized(
        lambda s: transforms.sample_correlated_srht(d, k, s, shared), v, seed)
    u_hat = u if noiseless else randomize(u, optimize_params(eps, k), derive_seed(seed, "noise"))
    return ClientMessage(
        variant=MessageVariant.CORRELATED, d=d, k=k,
        transform_encoding=transforms.encode_transform(W.spec, EncodingMode.INDICES),
        payload=u_hat.astype(np.float32),
        seed_digest=seed_digest(shared),
    )


def complete_norm(v_p: np.ndarray, c: float) -> np.ndarray:
    """Norm completion: lift v_p to an exactly unit (k+1)-vector.

    Appends sqrt(C - ||v_p||^2)/sqrt(C) when the projected norm is within the
    bound, otherwise falls back to plain renormalization with a zero tail.
    """
    nsq = float(np.dot(v_p, v_p))
    if nsq <= c:
        return np.append(v_p, math.sqrt(c - nsq)) / math.sqrt(c)
    return np.append(v_p / math.sqrt(nsq), 0.0)


def nearly_unbiased_client(v: np.ndarray, k: int, eps: float, delta: float,
                           config: CorrelatedConfig, seed: int | bytes,
                           group: int = 0, noiseless: bool = False) -> ClientMessage:
    """Correlated SRHT client with norm completion instead of renormalization.

    PrivUnitG runs in dimension k+1 and the message carries the completion
    constant C, which the server needs to undo the scaling.
    """
    v = _check_unit_input(v)
    seed = as_seed(seed)
    d = v.shape[0]
    # quantize C to its wire precision up front so client and server use the
    # exact same constant
    c = float(np.float32(completion_constant(k, delta)))
    shared = config.group_seed(group)
    W = transforms.sample_correlated_srht(d, k, derive_seed(seed, "transform"), shared)
    u = complete_norm(W.apply(v), c)
    u_hat = u if noiseless else randomize(u, optimize_params(eps, k + 1),
                                          derive_seed(seed, "noise"))
    return ClientMessage(
        variant=MessageVariant.NEARLY_UNBIASED_SRHT, d=d, k=k,
        transform_encoding=transforms.encode_transform(W.spec, EncodingMode.INDICES),
        payload=u_hat.astype(np.float32),
        c_value=c,
        seed_digest=seed_digest(shared),
    )


def direct_privunitg_client(v: np.ndarray, eps: float, seed: int | bytes,
                            noiseless: bool = False) -> ClientMessage:
    """The no-projection baseline: PrivUnitG in the ambient dimension."""
    v = _check_unit_input(v)
    d = v.shape[0]
    u_hat = v if noiseless else randomize(v, optimize_params(eps, d),
                                          derive_seed(as_seed(seed), "noise"))
    return ClientMessage(
        variant=MessageVariant.DIRECT_PRIVUNITG, d=d, k=d,
        transform_encoding=None,
        payload=u_hat.astype(np.float32),
    )


# --- servers -----------------------------------------------------------------

def _common_dims(messages: list[ClientMessage]) -> tuple[int, int]:
    if not messages:
        raise ProtocolError("no messages to aggregate")
    d, k = messages[0].d, messages[0].k
    for msg in messages:
        if msg.d != d or msg.k != k:
            raise ProtocolError(f"mixed dimensions: ({msg.d},{msg.k}) vs ({d},{k})")
    return d, k


def projunit_server(messages: list[ClientMessage]) -> ServerEstimate:
    """mu_hat = (1/n) sum_i W_i^T u_hat_i, decoding each transform in turn."""
    start = time.perf_counter_ns()
    d, k = _common_dims(messages)
    direct = {MessageVariant.DIRECT_PRIVUNITG}
    projected = set(_VARIANT_KINDS)
    kinds = {msg.variant for msg in messages}
    if not (kinds <= direct or kinds <= projected):
        raise ProtocolError(f"incompatible variants for this server: {sorted(kinds)}")
    acc = np.zeros(d)
    for msg in messages:
        payload = msg.payload.astype(np.float64)
        if msg.variant == MessageVariant.DIRECT_PRIVUNITG:
            acc += payload
            continue
        W = msg.realized
        if W is None:
            spec = transforms.decode_transform(msg.transform_encoding)
            if spec.kind != _VARIANT_KINDS[msg.variant]:
                raise ProtocolError(
                    f"variant {msg.variant.name} carries a {spec.kind.name} transform")
            W = transforms.realize(spec)
        acc += W.apply_adjoint(payload)
    mu = acc / len(messages)
    return ServerEstimate(mu_hat=mu, n=len(messages),
                          total_bits=sum(bit_cost(m) for m in messages),
                          server_nanos=time.perf_counter_ns() - start)


def _scatter_accumulate(messages: list[ClientMessage], d: int, take: int) -> dict[bytes, np.ndarray]:
    """Per-group sparse sums sum_i S_i^T u_hat_i (the O(nk) half of Alg. 4)."""
    sums: dict[bytes, np.ndarray] = {}
    for msg in messages:
        spec = transforms.decode_transform(msg.transform_encoding)
        if spec.indices is None:
            raise ProtocolError("correlated message lost its indices")
        acc = sums.setdefault(msg.seed_digest, np.zeros(d))
        np.add.at(acc, np.asarray(spec.indices, dtype=np.int64),
                  msg.payload[:take].astype(np.float64))
    return sums


def _shared_adjoint(acc: np.ndarray, shared: bytes, d: int, k: int) -> np.ndarray:
    signs = transforms._rademacher(d, shared)
    return math.sqrt(d / k) * (fwht(acc) * signs)


def correlated_server(messages: list[ClientMessage],
                      config: CorrelatedConfig) -> ServerEstimate:
    """Accumulate the k-sparse payload scatters, then apply one shared adjoint
    per group: numerically identical to the per-client aggregation."""
    start = time.perf_counter_ns()
    d, k = _common_dims(messages)
    if any(m.variant != MessageVariant.CORRELATED for m in messages):
        raise ProtocolError("correlated_server only aggregates CORRELATED messages")
    digests = config.group_digests()
    unknown = {m.seed_digest for m in messages} - set(digests)
    if unknown:
        raise ProtocolError("message shared-seed digest does not match the config")
    acc = np.zeros(d)
    for digest, sparse_sum in _scatter_accumulate(messages, d, k).items():
        acc += _shared_adjoint(sparse_sum, digests[digest], d, k)
    mu = acc / len(messages)
    return ServerEstimate(mu_hat=mu, n=len(messages),
                          total_bits=sum(bit_cost(m) for m in messages),
                          server_nanos=time.perf_counter_ns() - start)


def nearly_unbiased_server(messages: list[ClientMessage],
                           config: CorrelatedConfig) -> ServerEstimate:
    """Drops the completion coordinate, rescales by sqrt(C), aggregates."""
    start = time.perf_counter_ns()
    d, k = _common_dims(messages)
    if any(m.variant != MessageVariant.NEARLY_UNBIASED_SRHT for m in messages):
        raise ProtocolError("nearly_unbiased_server only aggregates NEARLY_UNBIASED_SRHT")
    c_values = {m.c_value for m in messages}
    if len(c_values) != 1:
        raise ProtocolError(f"inconsistent completion constants: {sorted(c_values)}")
    c = c_values.pop()
    digests = config.group_digests()
    unknown = {m.seed_digest for m in messages} - set(digests)
    if unknown:
        raise ProtocolError("message shared-seed digest does not match the config")
    acc = np.zeros(d)
    for digest, sparse_sum in _scatter_accumulate(messages, d, k).items():
        acc += _shared_adjoint(sparse_sum, digests[digest], d, k)
    mu = math.sqrt(c) * acc / len(messages)
    return ServerEstimate(mu_hat=mu, n=len(messages),
                          total_bits=sum(bit_cost(m) for m in messages),
                          server_nanos=time.perf_counter_ns() - start)


# --- serialization -----------------------------------------------------------

def serialize(msg: ClientMessage) -> bytes:
    flags = 0
    parts = []
    if msg.transform_encoding is not None:
        flags |= _FLAG_TRANSFORM
        parts.append(msg.transform_encoding)
    if msg.c_value is not None:
        flags |= _FLAG_C
        parts.append(struct.pack(">f", msg.c_value))
    parts.append(msg.payload.astype(">f4").tobytes())
    head = _MSG_HEADER.pack(_MESSAGE_MAGIC, transforms.WIRE_VERSION, int(msg.variant),
                            msg.d, msg.k, msg.seed_digest, flags)
    return head + b"".join(parts)


def deserialize(data: bytes) -> ClientMessage:
    if len(data) < _MSG_HEADER.size:
        raise EncodingError("truncated message header")
    magic, version, variant, d, k, digest, flags = _MSG_HEADER.unpack_from(data)
    if magic != _MESSAGE_MAGIC:
        raise EncodingError(f"bad message magic 0x{magic:04X}")
    if version != transforms.WIRE_VERSION:
        raise EncodingError(f"unsupported wire version {version}")
    try:
        variant = MessageVariant(variant)
    except ValueError as exc:
        raise EncodingError(str(exc)) from exc
    pos = _MSG_HEADER.size
    encoding = None
    if flags & _FLAG_TRANSFORM:
        length = transforms.encoded_length(data, pos)
        encoding = data[pos:pos + length]
        if len(encoding) != length:
            raise EncodingError("truncated transform encoding")
        pos += length
    c_value = None
    if flags & _FLAG_C:
        if len(data) < pos + 4:
            raise EncodingError("truncated completion constant")
        (c_value,) = struct.unpack_from(">f", data, pos)
        pos += 4
    want = payload_length(variant, d, k)
    if len(data) != pos + 4 * want:
        raise EncodingError(f"bad payload length: {len(data) - pos} bytes for {want} floats")
    payload = np.frombuffer(data, dtype=">f4", count=want, offset=pos).astype(np.float32)
    try:
        return ClientMessage(variant=variant, d=d, k=k, transform_encoding=encoding,
                             payload=payload, c_value=c_value, seed_digest=digest)
    except ProtocolError as exc:
        raise EncodingError(str(exc)) from exc


def bit_cost(msg: ClientMessage) -> int:
    """Exact serialized size in bits (header + transform + C + payload)."""
    size = _MSG_HEADER.size
    if msg.transform_encoding is not None:
        size += len(msg.transform_encoding)
    if msg.c_value is not None:
        size += 4
    size += 4 * msg.payload.shape[0]
    return 8 * size
