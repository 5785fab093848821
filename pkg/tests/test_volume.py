import struct

import numpy as np
import pytest

from voxatlas.volume import (
    BadMagicError,
    DimOverflowError,
    Kind,
    TruncatedPayloadError,
    Volume,
    VolumeFormatError,
    normalize,
    read_vvol,
    sample_nearest,
    sample_trilinear,
    write_vvol,
)


def test_trilinear_reproduces_nodes(rng):
    v = Volume(rng.random((4, 5, 6)))
    for ijk in [(0, 0, 0), (3, 4, 5), (1, 2, 3)]:
        assert sample_trilinear(v, ijk) == v.data[ijk]


def test_trilinear_midpoint_and_linearity():
    data = np.zeros((2, 2, 2))
    data[1] = 1.0
    v = Volume(data)
    assert sample_trilinear(v, (0.5, 0, 0)) == pytest.approx(0.5)
    assert sample_trilinear(v, (0.25, 0.7, 0.1)) == pytest.approx(0.25)


def test_trilinear_clamps_outside(rng):
    v = Volume(rng.random((3, 3, 3)))
    assert sample_trilinear(v, (-3.0, 0, 0)) == v.data[0, 0, 0]
    assert sample_trilinear(v, (9.0, 2.0, 5.0)) == v.data[2, 2, 2]


def test_trilinear_rejects_labels():
    with pytest.raises(ValueError):
        sample_trilinear(Volume.label(np.ones((2, 2, 2))), (0, 0, 0))


def test_nearest_rounding_and_ties(rng):
    v = Volume(rng.random((4, 4, 4)))
    assert sample_nearest(v, (1.4, 2.6, 0.0)) == v.data[1, 3, 0]
    assert sample_nearest(v, (1.5, 0, 0)) == v.data[2, 0, 0]
    assert sample_nearest(v, (2, 3, 1)) == v.data[2, 3, 1]
    assert sample_nearest(v, (-0.5, 7.2, 0)) == v.data[0, 3, 0]


def test_normalize_cases():
    v = Volume(np.linspace(10, 30, 27).reshape(3, 3, 3))
    n = normalize(v)
    np.testing.assert_allclose(n.data, (v.data - 10) / 20)
    assert not normalize(Volume(np.full((2, 2, 2), 7.0))).data.any()
    unit = Volume(np.linspace(0, 1, 8).reshape(2, 2, 2))
    assert normalize(unit) is unit


def test_normalize_idempotent(rng):
    v = Volume(rng.normal(5, 3, (5, 4, 3)))
    once = normalize(v)
    np.testing.assert_array_equal(normalize(once).data, once.data)
    assert once.data.min() == 0 and once.data.max() == 1


def test_label_invariant_and_immutability(rng):
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), 0.5), kind=Kind.LABEL)
    v = Volume(rng.random((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 3.0


@pytest.mark.parametrize("kind", [Kind.INTENSITY, Kind.LABEL])
def test_vvol_roundtrip_exact(tmp_path, rng, kind):
    data = rng.random((5, 3, 4)).astype(np.float32)
    if kind is Kind.LABEL:
        data = (data > 0.5).astype(np.float32)
    v = Volume(data, (0.5, 1.25, 2.0), kind)
    write_vvol(tmp_path / "a.vvol", v)
    back = read_vvol(tmp_path / "a.vvol")
    assert back.kind is kind and back.spacing == v.spacing
    assert back.data.tobytes() == data.tobytes()


def test_vvol_roundtrip_special_values(tmp_path):
    data = np.array([0.0, -0.0, 1e-38, 3.4e38, -1.5, 7.0, 1e-45, 2.5], np.float32).reshape(2, 2, 2)
    write_vvol(tmp_path / "s.vvol", Volume(data))
    assert read_vvol(tmp_path / "s.vvol").data.tobytes() == data.tobytes()


def test_vvol_layout_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_vvol(tmp_path / "o.vvol", Volume(data))
    raw = (tmp_path / "o.vvol").read_bytes()
    magic, version, kind, nx, ny, nz = struct.unpack_from("<4sIB3x3I", raw)
    assert (magic, version, kind, nx, ny, nz) == (b"VVOL", 1, 0, 2, 3, 4)
    payload = np.frombuffer(raw, "<f4", offset=36)
    # element (i, j, k) lives at i + nx*(j + ny*k)
    assert payload[1 + 2 * (2 + 3 * 3)] == data[1, 2, 3]


def test_vvol_errors_name_fields(tmp_path):
    good = tmp_path / "g.vvol"
    write_vvol(good, Volume(np.zeros((2, 2, 2))))
    raw = good.read_bytes()

    (tmp_path / "m.vvol").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError) as e:
        read_vvol(tmp_path / "m.vvol")
    assert e.value.field == "magic"

    (tmp_path / "t.vvol").write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError) as e:
        read_vvol(tmp_path / "t.vvol")
    assert e.value.field == "payload"

    huge = bytearray(raw)
    struct.pack_into("<3I", huge, 12, 2**11, 2**11, 2**11)
    (tmp_path / "d.vvol").write_bytes(bytes(huge))
    with pytest.raises(DimOverflowError):
        read_vvol(tmp_path / "d.vvol")

    zero = bytearray(raw)
    struct.pack_into("<I", zero, 16, 0)
    (tmp_path / "z.vvol").write_bytes(bytes(zero))
    with pytest.raises(VolumeFormatError) as e:
        read_vvol(tmp_path / "z.vvol")
    assert e.value.field == "ny"
