"""Image decode/encode, datasets, checkpoints, raw map files."""

import os
import struct

import cv2
import numpy as np
import pytest

from conftest import random_image
from ssgnet import dataio as D
from ssgnet.errors import (CheckpointVersionError, ContractError, DecodeError,
                           DimensionError)
from ssgnet.losses import AdamState
from ssgnet.model import SsgNet


# -- image decode -----------------------------------------------------------------

def test_ppm_2x2_exact_decode(tmp_path):
    """Binary PPM with the four primary-ish pixels decodes to exact 0/1."""
    body = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255])
    p = tmp_path / "probe.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + body)
    img = D.load_image(p)
    assert img.shape == (3, 2, 2) and img.dtype == np.float32
    np.testing.assert_array_equal(img[0], [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(img[1], [[0.0, 1.0], [0.0, 1.0]])
    np.testing.assert_array_equal(img[2], [[0.0, 0.0], [1.0, 1.0]])


def test_png_16bit_full_scale(tmp_path):
    gray = np.array([[65535, 0], [32768, 65535]], dtype=np.uint16)
    p = tmp_path / "probe16.png"
    assert cv2.imwrite(str(p), gray)
    img = D.load_image(p)
    assert img[0, 0, 0] == 1.0
    assert img[0, 0, 1] == 0.0
    assert img[0, 1, 0] == np.float32(32768) / np.float32(65535)
    # grayscale replicates across channels
    np.testing.assert_array_equal(img[0], img[1])
    np.testing.assert_array_equal(img[0], img[2])


def test_save_load_quantized_round_trip(tmp_path, rng):
    img = random_image(rng, 6, 5)
    p = tmp_path / "rt.png"
    D.save_image(p, img)
    back = D.load_image(p)
    expect = np.rint(np.clip(img, 0, 1) * 255.0).astype(np.float32) / 255.0
    np.testing.assert_allclose(back, expect, atol=1e-7)


def test_load_image_rejections(tmp_path):
    with pytest.raises(DecodeError):
        D.load_image(tmp_path / "missing.png")
    bad = tmp_path / "notes.jpg"
    bad.write_bytes(b"xx")
    with pytest.raises(DecodeError):
        D.load_image(bad)
    trunc = tmp_path / "trunc.png"
    trunc.write_bytes(b"\x89PNG\r\n")
    with pytest.raises(DecodeError):
        D.load_image(trunc)


def test_save_image_shape_contract(tmp_path):
    with pytest.raises(DimensionError):
        D.save_image(tmp_path / "x.png", np.zeros((4, 4), dtype=np.float32))


# -- resize / crop ----------------------------------------------------------------

def test_bilinear_resize_constant_and_range(rng):
    img = np.full((3, 5, 9), 0.7, dtype=np.float32)
    out = D.bilinear_resize(img, 8, 8)
    assert out.shape == (3, 8, 8)
    np.testing.assert_allclose(out, 0.7, atol=1e-6)
    noisy = random_image(rng, 7, 7)
    out2 = D.bilinear_resize(noisy, 3, 11)
    assert out2.min() >= 0.0 and out2.max() <= 1.0


def test_center_crop_window():
    img = np.zeros((3, 4, 4), dtype=np.float32)
    img[:, 1:3, 1:3] = 1.0
    out = D.center_crop(img, 2, 2)
    np.testing.assert_array_equal(out, np.ones((3, 2, 2), dtype=np.float32))
    with pytest.raises(ContractError):
        D.center_crop(img, 5, 2)


# -- datasets ----------------------------------------------------------------------

def test_dataset_spec_and_loading(tmp_path, rng):
    for i in range(3):
        D.save_image(tmp_path / f"img_{i}.png", random_image(rng, 10, 12))
    spec = D.dataset_from_dir(tmp_path, 8, "resize-bilinear")
    assert spec.files == ("img_0.png", "img_1.png", "img_2.png")
    images = D.load_dataset(spec)
    assert len(images) == 3
    assert all(im.shape == (3, 8, 8) for im in images)

    cropped = D.load_dataset(D.dataset_from_dir(tmp_path, 8, "center-crop"))
    assert all(im.shape == (3, 8, 8) for im in cropped)
    assert not np.array_equal(images[0], cropped[0])


def test_dataset_spec_contracts(tmp_path):
    with pytest.raises(ContractError):
        D.DatasetSpec(root=str(tmp_path), files=("a.png",), resolution=8,
                      crop_mode="nearest")
    with pytest.raises(ContractError):
        D.DatasetSpec(root=str(tmp_path), files=(), resolution=8)
    with pytest.raises(ContractError):
        D.DatasetSpec(root=str(tmp_path), files=("a.png",), resolution=0)
    with pytest.raises(ContractError):
        D.dataset_from_dir(tmp_path, 8)  # no images present


# -- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    net = SsgNet.build(seed=4)
    adam = AdamState.init(net.parameters(), lr=3e-4)
    adam.step = 17
    for name in adam.m:
        adam.m[name] = rng.standard_normal(adam.m[name].shape).astype(np.float32)
    model_e, opt_e = D.checkpoint_from_model(net, adam)
    p = tmp_path / "net.ssgn"
    D.save_checkpoint(p, model_e, opt_e)
    model_b, opt_b = D.load_checkpoint(p)
    assert set(model_b) == set(model_e)
    for k in model_e:
        assert model_b[k].dtype == model_e[k].dtype
        assert model_b[k].tobytes() == model_e[k].tobytes()
    for k in opt_e:
        assert opt_b[k].tobytes() == opt_e[k].tobytes()

    net2 = D.model_from_checkpoint(model_b)
    assert net2.n_eigenmaps == net.n_eigenmaps
    assert net2.widths == net.widths
    for (na, pa), (nb, pb) in zip(net.parameters(), net2.parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    adam2 = D.adam_from_checkpoint(opt_b, net2)
    assert adam2.step == 17 and adam2.lr == pytest.approx(3e-4)
    for name in adam.m:
        assert np.array_equal(adam.m[name], adam2.m[name])


def test_checkpoint_without_optimizer(tmp_path):
    net = SsgNet.build(seed=1)
    model_e, opt_e = D.checkpoint_from_model(net, None)
    assert opt_e is None
    p = tmp_path / "bare.ssgn"
    D.save_checkpoint(p, model_e)
    model_b, opt_b = D.load_checkpoint(p)
    assert opt_b is None
    assert set(model_b) == set(model_e)


def test_checkpoint_corruption_detected(tmp_path):
    net = SsgNet.build(seed=2)
    model_e, _ = D.checkpoint_from_model(net, None)
    p = tmp_path / "net.ssgn"
    D.save_checkpoint(p, model_e)
    blob = bytearray(p.read_bytes())

    wrong_magic = tmp_path / "magic.ssgn"
    wrong_magic.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(DecodeError):
        D.load_checkpoint(wrong_magic)

    future = tmp_path / "future.ssgn"
    v = bytearray(blob)
    v[4:8] = struct.pack("<I", 99)
    future.write_bytes(bytes(v))
    with pytest.raises(CheckpointVersionError):
        D.load_checkpoint(future)

    short = tmp_path / "short.ssgn"
    short.write_bytes(bytes(blob[:len(blob) // 2]))
    with pytest.raises(DecodeError):
        D.load_checkpoint(short)


# -- raw map files ------------------------------------------------------------------

def test_raw_maps_header_and_round_trip(tmp_path, rng):
    maps = rng.random((3, 5, 7)).astype(np.float32)
    p = tmp_path / "maps.ssgm"
    D.save_raw_maps(p, maps)
    blob = p.read_bytes()
    assert len(blob) == 16 + 4 * maps.size
    assert blob[:4] == b"SSGM"
    n, h, w = struct.unpack("<III", blob[4:16])
    assert (n, h, w) == (3, 5, 7)
    payload = np.frombuffer(blob[16:], dtype="<f4").reshape(3, 5, 7)
    np.testing.assert_array_equal(payload, maps)
    back = D.load_raw_maps(p)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, maps)


def test_raw_maps_corruption(tmp_path, rng):
    maps = rng.random((2, 3, 3)).astype(np.float32)
    p = tmp_path / "maps.ssgm"
    D.save_raw_maps(p, maps)
    blob = bytearray(p.read_bytes())
    bad = tmp_path / "bad.ssgm"
    bad.write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(DecodeError):
        D.load_raw_maps(bad)
    trunc = tmp_path / "trunc.ssgm"
    trunc.write_bytes(bytes(blob[:-5]))
    with pytest.raises(DecodeError):
        D.load_raw_maps(trunc)


def test_save_maps_constant_third_png_value(tmp_path):
    maps = np.full((1, 4, 4), 1.0 / 3.0, dtype=np.float32)
    written = D.save_maps(maps, tmp_path, basename="m", formats=("png8",))
    assert len(written) == 1
    raw = cv2.imread(str(written[0]), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint8
    np.testing.assert_array_equal(raw, np.full((4, 4), 85, dtype=np.uint8))


def test_save_maps_formats(tmp_path, rng):
    maps = rng.random((2, 3, 3)).astype(np.float32)
    written = D.save_maps(maps, tmp_path, basename="g")
    names = sorted(os.path.basename(str(w)) for w in written)
    assert names == ["g.ssgm", "g_00.png", "g_01.png"]
    with pytest.raises(ContractError):
        D.save_maps(maps, tmp_path, formats=("bmp",))
    with pytest.raises(DimensionError):
        D.save_maps(maps[0], tmp_path)


# -- misc helpers --------------------------------------------------------------------

def test_trace_csv_format(tmp_path):
    from ssgnet.losses import TraceRow

    rows = [TraceRow(1, 1.5, 2.5, 101.5, 3.3),
            TraceRow(2, 1.25, 2.25, 91.25, 4.4)]
    p = tmp_path / "trace.csv"
    D.write_trace_csv(rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,l_eigen,l_spatial,l_ssg"
    assert lines[1] == "1,1.5,2.5,101.5"
    assert len(lines) == 3


def test_batched_wraps_image(rng):
    img = random_image(rng, 4, 4)
    t = D.batched(img)
    assert t.shape == (1, 3, 4, 4)
    assert t.data.dtype == np.float32
    with pytest.raises(DimensionError):
        D.batched(np.zeros((4, 4), dtype=np.float32))
