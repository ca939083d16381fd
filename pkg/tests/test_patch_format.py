import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import count_params, pack_bits_lsb
from spotpatch.exceptions import ConfigurationError, FormatError
from spotpatch.model import BNParams, LayerSpec, SourceModel, detector_layers, init_model
from spotpatch.patch_format import (DeployedPatch, LayerPatch, bitsize_theta, deserialize,
                                    finetune_footprint, footprint, inspect, pack_mask, serialize,
                                    unpack_mask)


def bn(channels, rng):
    return BNParams(*(rng.standard_normal(channels).astype(np.float32) for _ in range(4)))


@st.composite
def patches(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    layers = []
    for i in range(draw(st.integers(0, 6))):
        kind = draw(st.sampled_from(["closed", "open", "mult", "bn"]))
        if kind == "closed":
            layers.append(LayerPatch(i, gate=False))
        elif kind == "bn":
            layers.append(LayerPatch(i, bn=bn(draw(st.integers(0, 9)), rng)))
        else:
            nbits = draw(st.integers(0, 70))
            mask = rng.integers(0, 2, nbits)
            scale = None if kind == "mult" else np.float32(rng.standard_normal())
            layers.append(LayerPatch(i, True, mask, scale, multiplicative=kind == "mult"))
    return DeployedPatch(layers)


def test_empty_patch_is_header_only():
    data = serialize(DeployedPatch())
    assert data == b"SPTP" + struct.pack("<HH", 1, 0)
    assert len(data) == 8


def test_two_by_two_mask_byte():
    lp = LayerPatch(0, True, np.array([[0, 1], [1, 0]]), np.float32(0.5))
    data = serialize(DeployedPatch([lp]))
    assert pack_mask(np.array([[0, 1], [1, 0]])) == bytes([0b00000110])
    assert data[-1] == 0b00000110
    # header 8, id+flags 3, omega 4, nbits 4, 1 mask byte
    assert len(data) == 20
    assert struct.unpack("<I", data[15:19]) == (4,)


@given(st.lists(st.integers(0, 1), max_size=100))
def test_pack_matches_oracle_and_round_trips(bits):
    packed = pack_mask(np.array(bits, dtype=np.uint8))
    assert packed == pack_bits_lsb(bits)
    assert unpack_mask(packed, len(bits)).tolist() == bits


@given(patches())
def test_round_trip(p):
    data = serialize(p)
    back = deserialize(data)
    assert back == p
    assert serialize(back) == data


def test_bad_magic_offset_zero():
    with pytest.raises(FormatError) as e:
        deserialize(b"XPTP" + struct.pack("<HH", 1, 0))
    assert e.value.offset == 0


def test_bad_version():
    with pytest.raises(FormatError) as e:
        deserialize(b"SPTP" + struct.pack("<HH", 9, 0))
    assert e.value.offset == 4


def test_truncated_mask_names_lengths():
    data = serialize(DeployedPatch([LayerPatch(3, True, np.ones(20), np.float32(1))]))
    with pytest.raises(FormatError, match="expected 3 bytes, got 1") as e:
        deserialize(data[:-2])
    assert e.value.offset == len(data) - 3


@given(patches(), st.data())
def test_any_truncation_is_a_format_error(p, data):
    blob = serialize(p)
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises(FormatError):
        deserialize(blob[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        deserialize(serialize(DeployedPatch()) + b"\0")


def test_unknown_flags_rejected():
    blob = bytearray(serialize(DeployedPatch([LayerPatch(0)])))
    blob[10] = 0x80
    with pytest.raises(FormatError) as e:
        deserialize(bytes(blob))
    assert e.value.offset == 10


def test_closed_gate_carries_nothing():
    with pytest.raises(ValueError):
        LayerPatch(0, gate=False, mask=np.ones(3))


def test_inspect_table():
    p = DeployedPatch([LayerPatch(0, True, np.ones(9), np.float32(0.25)), LayerPatch(1, bn=BNParams.fresh(3)),
                       LayerPatch(2)])
    rows = inspect(p)["layers"]
    assert rows[0] == {"layer": 0, "gate": 1, "mask_bits": 9, "omega": 0.25, "multiplicative": False,
                       "bn_channels": 0}
    assert rows[1]["bn_channels"] == 3 and rows[1]["gate"] is None
    assert rows[2]["gate"] == 0 and rows[2]["omega"] is None


# -- footprint ---------------------------------------------------------------------

def tiny_model(bn_channels=None):
    layers = [LayerSpec("dense", (2, 2))]
    weights = {0: np.ones((2, 2), np.float32)}
    bns = {}
    if bn_channels:
        layers.append(LayerSpec("batchnorm", (bn_channels,)))
        bns[1] = BNParams.fresh(bn_channels)
    return SourceModel(layers, weights, bns)


def test_bitsize_theta_examples():
    assert bitsize_theta(tiny_model(), "base32") == 128
    assert bitsize_theta(tiny_model(), "base8") == 32
    assert bitsize_theta(tiny_model(2), "base32") == 384


def test_bitsize_theta_counts_every_parameter():
    model = init_model(detector_layers(), np.random.default_rng(0))
    assert bitsize_theta(model, 32) == 32 * count_params(model.layers)


def random_patch(model, rng, p_open=0.5):
    layers = []
    for i in model.patchable_layers:
        if rng.random() < p_open:
            n = int(np.prod(model.layers[i].shape))
            layers.append(LayerPatch(i, True, rng.integers(0, 2, n), np.float32(rng.standard_normal())))
        else:
            layers.append(LayerPatch(i))
    for i in model.bn_layers:
        layers.append(LayerPatch(i, bn=model.bn[i].copy()))
    return DeployedPatch(layers)


def test_footprint_counts_bits_by_hand():
    model = tiny_model(2)
    p = DeployedPatch([LayerPatch(0, True, np.ones(4), np.float32(0.1)), LayerPatch(1, bn=BNParams.fresh(2))])
    r32 = footprint(p, model, "base32")
    assert (r32.mask_bits, r32.float_bits, r32.bits_theta) == (4, 32 + 8 * 32, 384)
    assert r32.ratio_exact == Fraction(4 + 32 + 256, 384)
    r8 = footprint(p, model, "base8")
    assert r8.ratio_exact == Fraction(4 + 8 + 64, 96)


def test_closed_gates_do_not_count():
    model = tiny_model()
    assert footprint(DeployedPatch([LayerPatch(0)]), model).bits_gamma == 0


def test_finetune_is_one():
    model = tiny_model(2)
    assert finetune_footprint(model, "base32").ratio_exact == 1
    assert finetune_footprint(model, "base8").ratio_exact == 1


def test_layer_mismatch_errors():
    model = tiny_model()
    with pytest.raises(ConfigurationError):
        footprint(DeployedPatch([LayerPatch(5)]), model)
    with pytest.raises(ConfigurationError):
        footprint(DeployedPatch([LayerPatch(0, True, np.ones(3), np.float32(1))]), model)
    with pytest.raises(ConfigurationError):
        footprint(DeployedPatch([LayerPatch(0, bn=BNParams.fresh(2))]), model)


@given(st.integers(0, 2**32 - 1))
def test_base8_identity_and_monotonicity(seed):
    model = init_model(detector_layers(3, (4, 6), (2, 2)), np.random.default_rng(0))
    rng = np.random.default_rng(seed)
    p = random_patch(model, rng)
    r32, r8 = footprint(p, model, "base32"), footprint(p, model, "base8")
    assert r8.ratio_exact == 4 * r32.mask_ratio + r32.float_ratio
    closed = [lp for lp in p.layers if lp.bn is None and not lp.gate]
    if closed:
        i = closed[0].layer_id
        n = int(np.prod(model.layers[i].shape))
        opened = DeployedPatch([LayerPatch(i, True, np.zeros(n), np.float32(0)) if lp.layer_id == i else lp
                                for lp in p.layers])
        assert footprint(opened, model).bits_gamma > r32.bits_gamma


def test_pure_float_patch_same_ratio_in_both_modes():
    model = init_model(detector_layers(3, (4, 6), (2, 2)), np.random.default_rng(0))
    p = random_patch(model, np.random.default_rng(0), p_open=0.0)
    assert footprint(p, model, "base32").ratio_exact == footprint(p, model, "base8").ratio_exact


def test_unknown_bit_mode():
    with pytest.raises(ConfigurationError):
        footprint(DeployedPatch(), tiny_model(), "base16")
