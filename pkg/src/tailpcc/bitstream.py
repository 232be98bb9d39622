"""Progressive container: importance-ordered channel layers that truncate at any layer boundary.

Layout (all integers little-endian)::

    magic "PDAT" | version u8 | flags u8 | C u8 | C_xyz u8 | N u32 | M u32     (16 bytes)
    perm_z  u8[C]     z channel indices, most important first
    perm_xyz u8[C_xyz]
    layer lengths u32[C + C_xyz] in body order (0 = layer not present)
    body: density payload, then the layers in body order

Each layer is ``lo i16 | span u16 | range-coded symbols`` for one channel,
coded against the entropy model's pmf on ``lo .. lo + span`` plus one
never-coded symbol holding the remaining mass.
The density payload holds the per-anchor counts as order-k Exp-Golomb codes.

Layer ``j`` (1-based) of a space with ``C_s`` channels is needed once the
progressive ratio exceeds ``(j - 1) / C_s``. Sorting layers by that
threshold (coordinate layer first on ties) makes every truncation a body
prefix. With ``C == C_xyz`` this is the plain alternation
``xyz1, z1, xyz2, z2, ...``. Feature-only streams put all coordinate
layers first and never drop them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import rangecoder
from .entropy import FactorizedEntropyModel, QuantizedLatent, estimate_bpp
from .pcio import PointCloud

MAGIC = b"PDAT"
VERSION = 1
FIXED_HEADER = 16
FLAG_FEATURE_ONLY = 1
LAYER_PREFIX = 4
_HEAD = struct.Struct("<4sBBBBII")
_LAYER_HEAD = struct.Struct("<hH")


class BitstreamError(ValueError):
    pass


class VersionError(BitstreamError):
    """Stream version or dimensions do not match the decoding model."""


def layer_order(C: int, C_xyz: int, feature_only: bool = False) -> list:
    """Body order as ``(space, rank)`` pairs, ``rank`` 0-based within the space."""
    if feature_only:
        return [("xyz", r) for r in range(C_xyz)] + [("z", r) for r in range(C)]
    layers = [(Fraction(r, C_xyz), 0, "xyz", r) for r in range(C_xyz)]
    layers += [(Fraction(r, C), 1, "z", r) for r in range(C)]
    return [(space, r) for _, _, space, r in sorted(layers)]


def retained_layers(alpha: float, C: int, C_xyz: int, feature_only: bool = False) -> tuple:
    """``(k_z, k_xyz)`` for progressive ratio ``alpha``; off-grid ratios round up."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"progressive ratio must lie in (0, 1], got {alpha}")
    k_z = _ceil_guarded(alpha * C)
    k_xyz = C_xyz if feature_only else _ceil_guarded(alpha * C_xyz)
    return k_z, k_xyz


def _ceil_guarded(x: float) -> int:
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 else int(math.ceil(x))


@dataclass(frozen=True)
class ProgressiveBitstream:
    n_points: int
    m: int
    perm_z: tuple
    perm_xyz: tuple
    lengths: tuple
    body: bytes
    feature_only: bool = False
    version: int = VERSION

    @property
    def C(self) -> int:
        return len(self.perm_z)

    @property
    def C_xyz(self) -> int:
        return len(self.perm_xyz)

    @property
    def order(self) -> list:
        return layer_order(self.C, self.C_xyz, self.feature_only)

    @property
    def header_length(self) -> int:
        return FIXED_HEADER + self.C + self.C_xyz + 4 * (self.C + self.C_xyz)

    @property
    def density_length(self) -> int:
        return len(self.body) - sum(self.lengths)

    @property
    def retained(self) -> tuple:
        """``(k_z, k_xyz)``: number of present layers per space."""
        kz = sum(1 for (s, _), n in zip(self.order, self.lengths) if s == "z" and n)
        kx = sum(1 for (s, _), n in zip(self.order, self.lengths) if s == "xyz" and n)
        return kz, kx

    def layer_spans(self) -> list:
        """``(space, rank, start, stop)`` byte ranges of the present layers in the body."""
        pos = self.density_length
        out = []
        for (space, rank), n in zip(self.order, self.lengths):
            if n:
                out.append((space, rank, pos, pos + n))
            pos += n
        return out

    def to_bytes(self) -> bytes:
        flags = FLAG_FEATURE_ONLY if self.feature_only else 0
        head = _HEAD.pack(MAGIC, self.version, flags, self.C, self.C_xyz, self.n_points, self.m)
        perms = bytes(self.perm_z) + bytes(self.perm_xyz)
        lengths = struct.pack(f"<{len(self.lengths)}I", *self.lengths)
        return head + perms + lengths + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProgressiveBitstream":
        if len(data) < FIXED_HEADER:
            raise BitstreamError(f"stream of {len(data)} bytes is shorter than the fixed header")
        magic, version, flags, C, C_xyz, n, m = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise VersionError(f"unsupported stream version {version}")
        pos = FIXED_HEADER
        end = pos + C + C_xyz + 4 * (C + C_xyz)
        if len(data) < end:
            raise BitstreamError("stream ends inside the header tables")
        perm_z = tuple(data[pos:pos + C])
        perm_xyz = tuple(data[pos + C:pos + C + C_xyz])
        if sorted(perm_z) != list(range(C)) or sorted(perm_xyz) != list(range(C_xyz)):
            raise BitstreamError("channel permutation tables are not permutations")
        lengths = struct.unpack_from(f"<{C + C_xyz}I", data, pos + C + C_xyz)
        body = bytes(data[end:])
        if sum(lengths) > len(body):
            raise BitstreamError(f"layer lengths sum to {sum(lengths)} but body has {len(body)} bytes")
        return cls(n, m, perm_z, perm_xyz, tuple(lengths), body, bool(flags & FLAG_FEATURE_ONLY), version)


# ---------------------------------------------------------------------------
# density payload

def _eg_len(v: np.ndarray, k: int) -> int:
    x = (v >> k) + 1
    return int(np.sum(2 * np.floor(np.log2(x)).astype(np.int64) + 1 + k))


def encode_counts(values) -> bytes:
    """Non-negative integers as order-k Exp-Golomb codes; the first byte stores k."""
    v = np.asarray(values, dtype=np.int64)
    if v.size and v.min() < 0:
        raise ValueError("counts must be non-negative")
    k = min(range(16), key=lambda kk: _eg_len(v, kk)) if v.size else 0
    bits = []
    for x in v.tolist():
        q = (x >> k) + 1
        nb = q.bit_length()
        bits.append("0" * (nb - 1) + format(q, "b") + (format(x & ((1 << k) - 1), f"0{k}b") if k else ""))
    s = "".join(bits)
    s += "0" * (-len(s) % 8)
    return bytes([k]) + int(s, 2).to_bytes(len(s) // 8, "big") if s else bytes([k])


def decode_counts(data: bytes, count: int) -> np.ndarray:
    if not data:
        raise BitstreamError("empty density payload")
    k = data[0]
    bits = "".join(format(b, "08b") for b in data[1:])
    out = np.empty(count, dtype=np.int64)
    pos = 0
    for i in range(count):
        zeros = 0
        while pos < len(bits) and bits[pos] == "0":
            zeros += 1
            pos += 1
        if pos + zeros + k > len(bits):
            raise BitstreamError(f"density payload ends inside code {i}")
        q = int(bits[pos:pos + zeros + 1], 2)
        pos += zeros + 1
        r = int(bits[pos:pos + k], 2) if k else 0
        pos += k
        out[i] = ((q - 1) << k) | r
    if len(bits) - pos >= 8 or bits[pos:].strip("0"):
        raise BitstreamError("trailing data in density payload")
    return out


# ---------------------------------------------------------------------------
# layers

def _channel_freqs(model: FactorizedEntropyModel, channel: int, lo: int, hi: int) -> np.ndarray:
    # the mass outside lo..hi becomes an unused escape symbol so coded lengths track the model
    pmf = model.pmf_tables(lo, hi)[channel]
    return rangecoder.quantize_pmf(np.append(pmf, max(1.0 - pmf.sum(), 0.0)))


def _encode_layer(values: np.ndarray, model: FactorizedEntropyModel, channel: int) -> bytes:
    lo, hi = int(values.min()), int(values.max())
    if lo < -32768 or hi - lo > 65535 or lo > 32767:
        raise BitstreamError(f"channel {channel} symbol range [{lo}, {hi}] does not fit the layer prefix")
    freqs = _channel_freqs(model, channel, lo, hi)
    return _LAYER_HEAD.pack(lo, hi - lo) + rangecoder.encode(values - lo, freqs)


def _decode_layer(data: bytes, model: FactorizedEntropyModel, channel: int, m: int) -> np.ndarray:
    if len(data) < LAYER_PREFIX:
        raise BitstreamError("layer shorter than its prefix")
    lo, span = _LAYER_HEAD.unpack_from(data, 0)
    freqs = _channel_freqs(model, channel, lo, lo + span)
    return rangecoder.decode(data[LAYER_PREFIX:], freqs, m) + lo


def serialize_progressive(quantized: QuantizedLatent, importance_z, importance_xyz,
                          model_z: FactorizedEntropyModel, model_xyz: FactorizedEntropyModel,
                          d_num, n_points: int, feature_only: bool = False) -> ProgressiveBitstream:
    """Code every channel of ``quantized`` as one layer, in importance order."""
    perm_z = tuple(int(c) for c in _order(importance_z))
    perm_xyz = tuple(int(c) for c in _order(importance_xyz))
    C, C_xyz = len(perm_z), len(perm_xyz)
    z = np.asarray(quantized.z, dtype=np.int64)
    zx = np.asarray(quantized.z_xyz, dtype=np.int64)
    if z.shape[0] != C or zx.shape[0] != C_xyz:
        raise ValueError("importance orders do not match latent channel counts")
    m = z.shape[1]
    chunks, lengths = [encode_counts(d_num)], []
    for space, rank in layer_order(C, C_xyz, feature_only):
        if space == "z":
            layer = _encode_layer(z[perm_z[rank]], model_z, perm_z[rank])
        else:
            layer = _encode_layer(zx[perm_xyz[rank]], model_xyz, perm_xyz[rank])
        chunks.append(layer)
        lengths.append(len(layer))
    return ProgressiveBitstream(int(n_points), m, perm_z, perm_xyz, tuple(lengths), b"".join(chunks),
                                feature_only)


def _order(importance) -> np.ndarray:
    order = getattr(importance, "order", None)
    return np.asarray(order if order is not None else importance, dtype=np.int64)


def truncate(bs: ProgressiveBitstream, alpha: float) -> ProgressiveBitstream:
    """Keep the density payload and the first ``ceil(alpha C)`` z and ``ceil(alpha C_xyz)`` xyz layers."""
    k_z, k_xyz = retained_layers(alpha, bs.C, bs.C_xyz, bs.feature_only)
    lengths, cut = [], bs.density_length
    for (space, rank), n in zip(bs.order, bs.lengths):
        # layers already absent stay absent, so truncating twice keeps the smaller ratio
        keep = rank < (k_z if space == "z" else k_xyz)
        lengths.append(n if keep else 0)
        cut += n if keep else 0
    return replace(bs, lengths=tuple(lengths), body=bs.body[:cut])


def parse_layers(bs: ProgressiveBitstream, model_z: FactorizedEntropyModel,
                 model_xyz: FactorizedEntropyModel):
    """Decode present layers; absent channels are zero. Returns ``(QuantizedLatent, d_num, mask_z, mask_xyz)``."""
    if model_z.channels != bs.C or model_xyz.channels != bs.C_xyz:
        raise VersionError(f"stream has C={bs.C}, C_xyz={bs.C_xyz}; model has "
                           f"C={model_z.channels}, C_xyz={model_xyz.channels}")
    d_num = decode_counts(bs.body[:bs.density_length], bs.m)
    z = np.zeros((bs.C, bs.m), dtype=np.int64)
    zx = np.zeros((bs.C_xyz, bs.m), dtype=np.int64)
    mz = np.zeros(bs.C, dtype=np.uint8)
    mx = np.zeros(bs.C_xyz, dtype=np.uint8)
    for space, rank, start, stop in bs.layer_spans():
        chunk = bs.body[start:stop]
        if space == "z":
            c = bs.perm_z[rank]
            z[c] = _decode_layer(chunk, model_z, c, bs.m)
            mz[c] = 1
        else:
            c = bs.perm_xyz[rank]
            zx[c] = _decode_layer(chunk, model_xyz, c, bs.m)
            mx[c] = 1
    return QuantizedLatent(z, zx), d_num, mz, mx


def progressive_decode(bs: ProgressiveBitstream, model) -> PointCloud:
    """Reconstruct a cloud from a (possibly truncated) stream with a :class:`~tailpcc.codec.Codec`."""
    if bs.C != model.cfg.C or bs.C_xyz != model.cfg.C_xyz:
        raise VersionError(f"stream has C={bs.C}, C_xyz={bs.C_xyz}; checkpoint has "
                           f"C={model.cfg.C}, C_xyz={model.cfg.C_xyz}")
    q, d_num, _, _ = parse_layers(bs, model.bottleneck_z, model.bottleneck_xyz)
    return model.decode(q.z, q.z_xyz, d_num)


# ---------------------------------------------------------------------------
# rate accounting

def file_bpp(bs: ProgressiveBitstream) -> float:
    return 8.0 * len(bs.to_bytes()) / bs.n_points


def entropy_bpp(bs: ProgressiveBitstream, model_z, model_xyz, quantized: QuantizedLatent | None = None) -> float:
    """Model bits of the present channels plus the density payload, per input point."""
    if quantized is None:
        quantized, _, _, _ = parse_layers(bs, model_z, model_xyz)
    kz, kx = bs.retained
    return estimate_bpp(quantized, model_z, model_xyz, bs.perm_z[:kz], bs.perm_xyz[:kx], bs.n_points,
                        density_bits=8 * bs.density_length)


def overhead_bits(bs: ProgressiveBitstream) -> int:
    """Side information outside the model bits: header tables plus each layer's prefix and coder flush."""
    present = sum(1 for n in bs.lengths if n)
    return 8 * bs.header_length + present * 8 * (LAYER_PREFIX + 4)
