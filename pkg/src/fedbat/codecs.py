"""Uplink compressors and the binary wire format.

Wire layout (all integers little-endian)::

    message  := "FBAT" | version:u8 | kind:u8 | round:u32 | client:u32 | n_layers:u32 | layer*
    binary   := layer_id:u32 | d:u32 | alpha:f32 | packed_signs[ceil(d/8)]
    raw      := layer_id:u32 | d:u32 | values:f32[d]

Sign bits are packed LSB-first, bit 1 for +1 and bit 0 for -1, with the pad
bits of the last byte zero. Values are carried in float64 in memory and
narrowed to float32 only when serialized.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import SeededRng, norms

MAGIC = b"FBAT"
VERSION = 1
KIND_RAW, KIND_BINARY = 0, 1

HEADER = struct.Struct("<4sBBIII")
LAYER_HEADER = struct.Struct("<II")
HEADER_BYTES = HEADER.size  # 18
LAYER_HEADER_BYTES = LAYER_HEADER.size  # 8

# defaults tuned for the baselines in the FedBAT experiments
SIGNSGD_ALPHA = 0.001
NOISY_ALPHA = 0.01
NOISY_SIGMA = 0.01
STOC_ALPHA = 0.01

CODEC_NAMES = ("fedavg-raw", "signsgd", "ef-signsgd", "noisy-signsgd", "stoc-signsgd", "fedbat")


class WireFormatError(ValueError):
    pass


class SignContractError(ValueError):
    pass


@dataclass(frozen=True)
class CodecKind:
    name: str
    alpha: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.name not in CODEC_NAMES:
            raise ValueError(f"unknown codec {self.name!r}; choose from {', '.join(CODEC_NAMES)}")
        if self.name in ("signsgd", "noisy-signsgd", "stoc-signsgd"):
            if self.alpha is None or not self.alpha > 0:
                raise ValueError(f"{self.name} needs a positive alpha")
        if self.name == "noisy-signsgd" and (self.sigma is None or self.sigma < 0):
            raise ValueError("noisy-signsgd needs a nonnegative sigma")

    @classmethod
    def default(cls, name: str) -> "CodecKind":
        if name == "signsgd":
            return cls(name, alpha=SIGNSGD_ALPHA)
        if name == "noisy-signsgd":
            return cls(name, alpha=NOISY_ALPHA, sigma=NOISY_SIGMA)
        if name == "stoc-signsgd":
            return cls(name, alpha=STOC_ALPHA)
        return cls(name)

    @property
    def stateful(self) -> bool:
        return self.name == "ef-signsgd"


# -- sign packing -------------------------------------------------------------

def encode_signs(m_bar) -> bytes:
    m_bar = np.asarray(m_bar, dtype=np.float64).reshape(-1)
    pos = m_bar == 1.0
    if not np.all(pos | (m_bar == -1.0)):
        raise SignContractError("sign vector must contain only +1 and -1")
    return np.packbits(pos, bitorder="little").tobytes()


def decode_signs(payload: bytes, d: int) -> np.ndarray:
    nbytes = (d + 7) // 8
    if len(payload) != nbytes:
        raise WireFormatError(f"expected {nbytes} sign bytes for d={d}, got {len(payload)}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if np.any(bits[d:]):
        raise WireFormatError("nonzero pad bits")
    return np.where(bits[:d] == 1, 1.0, -1.0)


# -- messages -----------------------------------------------------------------

@dataclass
class BinaryLayer:
    layer_id: int
    d: int
    alpha: float
    packed: bytes

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if len(self.packed) != (self.d + 7) // 8:
            raise WireFormatError("packed length does not match d")

    @classmethod
    def from_signs(cls, layer_id: int, signs, alpha: float) -> "BinaryLayer":
        signs = np.asarray(signs).reshape(-1)
        return cls(layer_id, signs.size, float(alpha), encode_signs(signs))

    def signs(self) -> np.ndarray:
        return decode_signs(self.packed, self.d)

    def values(self) -> np.ndarray:
        return self.alpha * self.signs()


@dataclass
class RawLayer:
    layer_id: int
    values: np.ndarray

    @property
    def d(self) -> int:
        return self.values.size


@dataclass
class BinaryUpdateMessage:
    round: int
    client_id: int
    layers: list[BinaryLayer] = field(default_factory=list)

    kind = KIND_BINARY

    def decode(self) -> list[np.ndarray]:
        return [layer.values() for layer in self.layers]


@dataclass
class RawUpdateMessage:
    round: int
    client_id: int
    layers: list[RawLayer] = field(default_factory=list)

    kind = KIND_RAW

    def decode(self) -> list[np.ndarray]:
        return [layer.values.copy() for layer in self.layers]


def to_bytes(msg) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, msg.kind, msg.round, msg.client_id, len(msg.layers))]
    for layer in msg.layers:
        parts.append(LAYER_HEADER.pack(layer.layer_id, layer.d))
        if msg.kind == KIND_BINARY:
            parts.append(struct.pack("<f", layer.alpha))
            parts.append(layer.packed)
        else:
            parts.append(np.asarray(layer.values, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes):
    if len(buf) < HEADER_BYTES:
        raise WireFormatError("buffer shorter than message header")
    magic, version, kind, rnd, client, n_layers = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireFormatError(f"unsupported format version {version}")
    if kind not in (KIND_RAW, KIND_BINARY):
        raise WireFormatError(f"unknown message kind {kind}")
    off = HEADER_BYTES
    layers = []
    for _ in range(n_layers):
        if off + LAYER_HEADER_BYTES > len(buf):
            raise WireFormatError("truncated layer header")
        layer_id, d = LAYER_HEADER.unpack_from(buf, off)
        off += LAYER_HEADER_BYTES
        if kind == KIND_BINARY:
            end = off + 4 + (d + 7) // 8
            if end > len(buf):
                raise WireFormatError("truncated binary layer")
            (alpha,) = struct.unpack_from("<f", buf, off)
            packed = bytes(buf[off + 4:end])
            decode_signs(packed, d)  # validates pad bits
            layers.append(BinaryLayer(layer_id, d, float(alpha), packed))
        else:
            end = off + 4 * d
            if end > len(buf):
                raise WireFormatError("truncated raw layer")
            values = np.frombuffer(buf, dtype="<f4", count=d, offset=off).astype(np.float64)
            layers.append(RawLayer(layer_id, values))
        off = end
    if off != len(buf):
        raise WireFormatError(f"{len(buf) - off} trailing bytes")
    cls = BinaryUpdateMessage if kind == KIND_BINARY else RawUpdateMessage
    return cls(rnd, client, layers)


def save_message(path, msg) -> None:
    Path(path).write_bytes(to_bytes(msg))


def load_message(path):
    return from_bytes(Path(path).read_bytes())


def uplink_bytes(msg) -> int:
    """Serialized size of ``msg``, computed from the layout without encoding it."""
    if msg.kind == KIND_BINARY:
        body = sum(LAYER_HEADER_BYTES + 4 + (layer.d + 7) // 8 for layer in msg.layers)
    else:
        body = sum(LAYER_HEADER_BYTES + 4 * layer.d for layer in msg.layers)
    return HEADER_BYTES + body


def binary_bytes(layer_sizes) -> int:
    return HEADER_BYTES + sum(LAYER_HEADER_BYTES + 4 + (d + 7) // 8 for d in layer_sizes)


def raw_bytes(layer_sizes) -> int:
    return HEADER_BYTES + sum(LAYER_HEADER_BYTES + 4 * d for d in layer_sizes)


# -- compressors ----------------------------------------------------------------

@dataclass
class BinarizedUpdate:
    """Output of binarization-aware local training: per-layer signs and step sizes."""

    signs: list[np.ndarray]
    alphas: list[float]


@dataclass
class ErrorFeedbackState:
    residual: list[np.ndarray]

    @classmethod
    def zeros(cls, layer_sizes) -> "ErrorFeedbackState":
        return cls([np.zeros(d) for d in layer_sizes])


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(x >= 0.0, 1.0, -1.0)


def compress(kind: CodecKind, update, state: ErrorFeedbackState | None = None,
             rng: SeededRng | None = None, *, round: int = 0, client_id: int = 0):
    """Turn a client update into an uplink message.

    ``update`` is a list of per-layer vectors, or a :class:`BinarizedUpdate`
    for ``fedbat``. Returns ``(message, new_state)``; ``new_state`` is the
    updated residual for ``ef-signsgd`` and ``state`` unchanged otherwise.
    """
    name = kind.name
    if name == "fedbat":
        if not isinstance(update, BinarizedUpdate):
            raise TypeError("fedbat expects a BinarizedUpdate from local training")
        layers = [BinaryLayer.from_signs(i, s, a) for i, (s, a) in enumerate(zip(update.signs, update.alphas))]
        return BinaryUpdateMessage(round, client_id, layers), state

    m = [np.asarray(v, dtype=np.float64).reshape(-1) for v in update]
    if name == "fedavg-raw":
        return RawUpdateMessage(round, client_id, [RawLayer(i, v.copy()) for i, v in enumerate(m)]), state

    layers = []
    if name == "ef-signsgd":
        if state is None:
            raise ValueError("ef-signsgd needs an error-feedback state")
        new_res = []
        for i, (ml, el) in enumerate(zip(m, state.residual)):
            b = ml + el
            l1, _, _ = norms(b)
            alpha = l1 / b.size
            s = sign(b)
            if alpha == 0.0:
                # all-zero input: nothing to send, keep the residual (zero)
                alpha = np.finfo(np.float32).tiny
            new_res.append(b - alpha * s)
            layers.append(BinaryLayer.from_signs(i, s, alpha))
        return BinaryUpdateMessage(round, client_id, layers), ErrorFeedbackState(new_res)

    if rng is None and name in ("noisy-signsgd", "stoc-signsgd"):
        raise ValueError(f"{name} needs an rng")
    for i, ml in enumerate(m):
        if name == "signsgd":
            s = sign(ml)
        elif name == "noisy-signsgd":
            s = sign(ml + rng.gaussian(kind.sigma, size=ml.size))
        else:
            _, _, linf = norms(ml)
            zeta = (2.0 * rng.uniform(ml.size) - 1.0) * linf
            s = sign(ml + zeta)
        layers.append(BinaryLayer.from_signs(i, s, kind.alpha))
    return BinaryUpdateMessage(round, client_id, layers), state


def compression_ratio(layer_sizes) -> float:
    return raw_bytes(layer_sizes) / binary_bytes(layer_sizes)


def bench(layer_sizes) -> list[dict]:
    """Per-codec message sizes for a model with the given layer sizes."""
    raw = raw_bytes(layer_sizes)
    rows = []
    for name in CODEC_NAMES:
        size = raw if name == "fedavg-raw" else binary_bytes(layer_sizes)
        rows.append({"codec": name, "bytes": size, "ratio": raw / size})
    return rows


def layer_breakdown(layer_sizes) -> list[dict]:
    """Per-layer bytes for raw and binary messages; the shared header is listed separately."""
    rows = [{"layer": "header", "params": 0, "raw_bytes": HEADER_BYTES, "binary_bytes": HEADER_BYTES}]
    for i, d in enumerate(layer_sizes):
        rows.append({
            "layer": i,
            "params": d,
            "raw_bytes": LAYER_HEADER_BYTES + 4 * d,
            "binary_bytes": LAYER_HEADER_BYTES + 4 + math.ceil(d / 8),
        })
    return rows
