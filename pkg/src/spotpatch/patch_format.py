"""The ``.sptp`` patch container and footprint accounting.

Byte layout (all multi-byte integers and floats little-endian)::

    magic      4 bytes  b"SPTP"
    version    u16      FORMAT_VERSION
    n_layers   u16
    n_layers times:
        layer id   u16
        flags      u8   bit0 gate open, bit1 has batch-norm,
                        bit2 multiplicative mask (no scale stored)
        if gate:   [scale f32 unless bit2] mask_bits u32, packed mask bytes
        if bn:     channels u32, then scale, shift, running mean,
                   running variance as ``channels`` f32 values each

Masks are flattened row-major, packed LSB-first within each byte and
zero-padded to a byte boundary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional

import numpy as np

from .exceptions import ArgumentError, ConfigurationError, FormatError
from .model import BNParams, SourceModel

MAGIC = b"SPTP"
FORMAT_VERSION = 1
FILE_EXTENSION = ".sptp"

FLAG_GATE = 0x01
FLAG_BN = 0x02
FLAG_MULTIPLICATIVE = 0x04
_KNOWN_FLAGS = FLAG_GATE | FLAG_BN | FLAG_MULTIPLICATIVE

BIT_MODES = {"base32": 32, "base8": 8}


def pack_mask(mask) -> bytes:
    bits = np.asarray(mask).reshape(-1)
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise ArgumentError("mask must be 0/1 valued")
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def unpack_mask(data: bytes, nbits: int) -> np.ndarray:
    arr = np.frombuffer(data, dtype=np.uint8)
    return np.unpackbits(arr, count=nbits, bitorder="little")


@dataclass
class LayerPatch:
    """Patch entry of one model layer.

    A weight layer entry carries ``gate``; when the gate is open it also
    carries the flattened 0/1 ``mask`` and (unless ``multiplicative``) the
    float32 ``scale``. A batch-norm layer entry carries ``bn``.
    """

    layer_id: int
    gate: bool = False
    mask: Optional[np.ndarray] = None
    scale: Optional[np.float32] = None
    multiplicative: bool = False
    bn: Optional[BNParams] = None

    def __post_init__(self):
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8).reshape(-1)
        if self.scale is not None:
            self.scale = np.float32(self.scale)
        if self.gate and self.mask is None:
            raise ArgumentError(f"layer {self.layer_id}: open gate without a mask")
        if self.gate and not self.multiplicative and self.scale is None:
            raise ArgumentError(f"layer {self.layer_id}: open gate without a scale")
        if not self.gate and (self.mask is not None or self.scale is not None):
            raise ArgumentError(f"layer {self.layer_id}: closed gate must not carry mask or scale")

    @property
    def flags(self) -> int:
        f = 0
        if self.gate:
            f |= FLAG_GATE
            if self.multiplicative:
                f |= FLAG_MULTIPLICATIVE
        if self.bn is not None:
            f |= FLAG_BN
        return f

    def __eq__(self, other):
        if not isinstance(other, LayerPatch):
            return NotImplemented
        if (self.layer_id, self.flags) != (other.layer_id, other.flags):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        if self.mask is not None and not np.array_equal(self.mask, other.mask):
            return False
        if (self.scale is None) != (other.scale is None):
            return False
        if self.scale is not None and self.scale.tobytes() != other.scale.tobytes():
            return False
        if self.bn is not None:
            return all(a.astype("<f4").tobytes() == b.astype("<f4").tobytes()
                       for a, b in zip(self.bn.arrays(), other.bn.arrays()))
        return True


@dataclass
class DeployedPatch:
    layers: List[LayerPatch] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, DeployedPatch):
            return NotImplemented
        return len(self.layers) == len(other.layers) and all(
            a == b for a, b in zip(self.layers, other.layers))

    @property
    def gate_layers(self) -> List[LayerPatch]:
        return [lp for lp in self.layers if lp.bn is None]

    @property
    def gates(self) -> List[int]:
        return [int(lp.gate) for lp in self.gate_layers]

    def to_bytes(self) -> bytes:
        return serialize(self)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(serialize(self))

    @classmethod
    def load(cls, path) -> "DeployedPatch":
        with open(path, "rb") as fh:
            return deserialize(fh.read())


def serialize(patch: DeployedPatch) -> bytes:
    if len(patch.layers) > 0xFFFF:
        raise ArgumentError("too many layers for the container")
    out = bytearray(MAGIC)
    out += struct.pack("<HH", FORMAT_VERSION, len(patch.layers))
    for lp in patch.layers:
        out += struct.pack("<HB", lp.layer_id, lp.flags)
        if lp.gate:
            if not lp.multiplicative:
                out += struct.pack("<f", lp.scale)
            out += struct.pack("<I", lp.mask.size)
            out += pack_mask(lp.mask)
        if lp.bn is not None:
            channels = lp.bn.scale.size
            out += struct.pack("<I", channels)
            for arr in lp.bn.arrays():
                a = np.asarray(arr, dtype="<f4").reshape(-1)
                if a.size != channels:
                    raise ArgumentError(f"layer {lp.layer_id}: batch-norm arrays differ in length")
                out += a.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        have = len(self.data) - self.pos
        if have < n:
            raise FormatError(f"truncated {what}: expected {n} bytes, got {have}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize(data: bytes) -> DeployedPatch:
    r = _Reader(bytes(data))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("bad magic", 0)
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (count,) = r.unpack("<H", "layer count")
    layers = []
    for _ in range(count):
        layer_id, flags = r.unpack("<HB", "layer record")
        if flags & ~_KNOWN_FLAGS:
            raise FormatError(f"unknown flag bits 0x{flags:02x}", r.pos - 1)
        gate = bool(flags & FLAG_GATE)
        mult = bool(flags & FLAG_MULTIPLICATIVE)
        if mult and not gate:
            raise FormatError("multiplicative flag without open gate", r.pos - 1)
        mask = scale = bn = None
        if gate:
            if not mult:
                (scale,) = r.unpack("<f", "scale")
            (nbits,) = r.unpack("<I", "mask length")
            nbytes = (nbits + 7) // 8
            mask = unpack_mask(bytes(r.take(nbytes, f"mask payload ({nbits} bits)")), nbits)
        if flags & FLAG_BN:
            (channels,) = r.unpack("<I", "channel count")
            arrays = [np.frombuffer(bytes(r.take(4 * channels, "batch-norm payload")), dtype="<f4")
                      .astype(np.float32) for _ in range(4)]
            bn = BNParams(*arrays)
        layers.append(LayerPatch(layer_id, gate, mask, scale, mult, bn))
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    return DeployedPatch(layers)


def inspect(patch: DeployedPatch) -> dict:
    """JSON-ready layer table."""
    rows = []
    for lp in patch.layers:
        rows.append({
            "layer": lp.layer_id,
            "gate": int(lp.gate) if lp.bn is None else None,
            "mask_bits": int(lp.mask.size) if lp.mask is not None else 0,
            "omega": float(lp.scale) if lp.scale is not None else None,
            "multiplicative": lp.multiplicative,
            "bn_channels": int(lp.bn.scale.size) if lp.bn is not None else 0,
        })
    return {"format_version": FORMAT_VERSION, "n_layers": len(rows), "layers": rows}


# -- footprint ---------------------------------------------------------------

def bit_width(mode) -> int:
    """Float width in bits for "base32"/"base8" (or 32/8)."""
    if mode in (32, "32"):
        mode = "base32"
    elif mode in (8, "8"):
        mode = "base8"
    try:
        return BIT_MODES[mode]
    except KeyError:
        raise ConfigurationError(f"unknown bit mode {mode!r}; use base32 or base8") from None


def mode_name(mode) -> str:
    return "base32" if bit_width(mode) == 32 else "base8"


@dataclass(frozen=True)
class FootprintReport:
    bits_gamma: int
    bits_theta: int
    mode: str
    patched_layer_fraction: float
    mask_bits: int = 0
    float_bits: int = 0

    @property
    def ratio_exact(self) -> Fraction:
        return Fraction(self.bits_gamma, self.bits_theta)

    @property
    def ratio(self) -> float:
        return float(self.ratio_exact)

    @property
    def mask_ratio(self) -> Fraction:
        return Fraction(self.mask_bits, self.bits_theta)

    @property
    def float_ratio(self) -> Fraction:
        return Fraction(self.float_bits, self.bits_theta)

    def to_dict(self) -> dict:
        return {"bits_gamma": self.bits_gamma, "bits_theta": self.bits_theta,
                "ratio": self.ratio, "mode": self.mode,
                "patched_layer_fraction": self.patched_layer_fraction,
                "mask_bits": self.mask_bits, "float_bits": self.float_bits}


def bitsize_theta(model: SourceModel, mode="base32") -> int:
    return model.num_params() * bit_width(mode)


def footprint(patch: DeployedPatch, model: SourceModel, mode="base32") -> FootprintReport:
    """Relative footprint bits(patch) / bits(model).

    Masks count one bit per weight. Scales and batch-norm values count at the
    mode's float width, the same width as the base weights. Gate bits and
    container framing are not counted.
    """
    width = bit_width(mode)
    mask_bits = float_bits = 0
    seen = set()
    for lp in patch.layers:
        i = lp.layer_id
        if i >= len(model.layers):
            raise ConfigurationError(f"patch layer {i} not in model ({len(model.layers)} layers)")
        if i in seen:
            raise ConfigurationError(f"layer {i} patched twice")
        seen.add(i)
        spec = model.layers[i]
        if lp.bn is not None:
            if spec.patchable:
                raise ConfigurationError(f"batch-norm payload on {spec.kind} layer {i}")
            if lp.bn.scale.size != spec.shape[0]:
                raise ConfigurationError(f"layer {i}: {lp.bn.scale.size} channels, model has {spec.shape[0]}")
            float_bits += 4 * spec.shape[0] * width
        elif not spec.patchable:
            raise ConfigurationError(f"gate entry on batchnorm layer {i}")
        if lp.gate:
            n = int(np.prod(spec.shape))
            if lp.mask.size != n:
                raise ConfigurationError(f"layer {i}: mask has {lp.mask.size} bits, weight has {n}")
            mask_bits += n
            if not lp.multiplicative:
                float_bits += width
    n_patchable = len(model.patchable_layers)
    opened = sum(1 for lp in patch.layers if lp.gate)
    return FootprintReport(mask_bits + float_bits, bitsize_theta(model, mode), mode_name(mode),
                           opened / n_patchable if n_patchable else 0.0, mask_bits, float_bits)


def finetune_footprint(model: SourceModel, mode="base32") -> FootprintReport:
    """A fine-tuned copy ships the full parameter set: ratio 1 by construction."""
    bits = bitsize_theta(model, mode)
    return FootprintReport(bits, bits, mode_name(mode), 1.0, 0, bits)
