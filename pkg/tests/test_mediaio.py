import json
import math
import os

import numpy as np
import pytest

from zsvr import mediaio
from zsvr.mediaio import FormatError, FrameSequence
from zsvr.metrics import MetricsReport


def _write_pnm(path, magic, w, h, payload, maxval=255, comment=None):
    header = f"{magic}\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{w} {h}\n{maxval}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def test_read_frames_gray_p5(tmp_path):
    payload = bytes([128] * 16)
    for i in range(3):
        _write_pnm(tmp_path / f"f{i}.pgm", "P5", 4, 4, payload)
    seq = mediaio.read_frames(str(tmp_path))
    assert len(seq) == 3
    for f in seq.frames:
        assert f.shape == (4, 4, 3)
        assert np.allclose(f, 128 / 255)


def test_read_frames_empty_dir(tmp_path):
    with pytest.raises(FormatError, match="no frames"):
        mediaio.read_frames(str(tmp_path))


def test_read_frames_lexicographic_order(tmp_path):
    for name, val in (("b.pgm", 20), ("a.pgm", 10), ("c.pgm", 30)):
        _write_pnm(tmp_path / name, "P5", 2, 2, bytes([val] * 4))
    seq = mediaio.read_frames(str(tmp_path))
    got = [int(round(f[0, 0, 0] * 255)) for f in seq.frames]
    assert got == [10, 20, 30]


def test_read_frames_ignores_other_extensions(tmp_path):
    _write_pnm(tmp_path / "f.ppm", "P6", 2, 2, bytes(range(12)))
    (tmp_path / "notes.txt").write_text("not a frame")
    seq = mediaio.read_frames(str(tmp_path))
    assert len(seq) == 1


def test_p6_gradient_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    # an 8x6 gradient plus a second random frame
    grad = np.linspace(0, 1, 8 * 6 * 3).reshape(6, 8, 3)
    rand = rng.random((6, 8, 3))
    seq = FrameSequence([grad, rand])
    out = tmp_path / "out"
    mediaio.write_frames(seq, str(out))
    back = mediaio.read_frames(str(out))
    for a, b in zip(seq.frames, back.frames):
        assert np.abs(a - b).max() <= 1.0 / 510.0 + 1e-12


def test_write_frames_extremes(tmp_path):
    seq = FrameSequence([np.zeros((2, 3, 3)), np.ones((2, 3, 3))])
    mediaio.write_frames(seq, str(tmp_path / "o"))
    p0 = (tmp_path / "o" / "frame_0000.ppm").read_bytes()
    p1 = (tmp_path / "o" / "frame_0001.ppm").read_bytes()
    assert p0.endswith(bytes([0] * 18))
    assert p1.endswith(bytes([255] * 18))


def test_pnm_bad_magic(tmp_path):
    _write_pnm(tmp_path / "f.pnm", "P3", 2, 2, bytes(12))
    with pytest.raises(FormatError, match="magic"):
        mediaio.read_frames(str(tmp_path))


def test_pnm_bad_maxval(tmp_path):
    _write_pnm(tmp_path / "f.pgm", "P5", 2, 2, bytes(4), maxval=65535)
    with pytest.raises(FormatError, match="maxval"):
        mediaio.read_frames(str(tmp_path))


def test_pnm_truncated_payload(tmp_path):
    _write_pnm(tmp_path / "f.ppm", "P6", 4, 4, bytes(10))
    with pytest.raises(FormatError, match="payload"):
        mediaio.read_frames(str(tmp_path))


def test_pnm_header_comment(tmp_path):
    _write_pnm(tmp_path / "f.pgm", "P5", 2, 2, bytes([7] * 4), comment="made by hand")
    seq = mediaio.read_frames(str(tmp_path))
    assert np.allclose(seq.frames[0], 7 / 255)


def test_read_frames_inconsistent_shapes(tmp_path):
    _write_pnm(tmp_path / "a.pgm", "P5", 2, 2, bytes(4))
    _write_pnm(tmp_path / "b.pgm", "P5", 3, 2, bytes(6))
    with pytest.raises(ValueError, match="differs"):
        mediaio.read_frames(str(tmp_path))


def test_frame_sequence_validation():
    with pytest.raises(ValueError):
        FrameSequence([])
    with pytest.raises(ValueError, match="outside"):
        FrameSequence([np.full((2, 2, 3), 1.5)])
    with pytest.raises(ValueError):
        FrameSequence([np.zeros((2, 2))])


def test_flo_zero_flow(tmp_path):
    import struct

    path = tmp_path / "z.flo"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", 202021.25))
        fh.write(struct.pack("<ii", 1, 1))
        fh.write(struct.pack("<ff", 0.0, 0.0))
    assert np.array_equal(mediaio.read_flo(str(path)), np.zeros((1, 1, 2)))


def test_flo_read_order(tmp_path):
    import struct

    path = tmp_path / "o.flo"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", 202021.25))
        fh.write(struct.pack("<ii", 2, 1))
        fh.write(struct.pack("<ffff", 1.0, 0.0, -1.0, 0.0))
    flow = mediaio.read_flo(str(path))
    assert flow.shape == (1, 2, 2)
    assert flow[0, 0, 0] == 1.0 and flow[0, 1, 0] == -1.0


def test_flo_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    flow = rng.standard_normal((5, 7, 2)).astype(np.float32)
    path = tmp_path / "r.flo"
    mediaio.write_flo(flow, str(path))
    assert np.array_equal(mediaio.read_flo(str(path)), flow)


def test_flo_bad_magic(tmp_path):
    (tmp_path / "bad.flo").write_bytes(b"\x00" * 20)
    with pytest.raises(FormatError, match="magic"):
        mediaio.read_flo(str(tmp_path / "bad.flo"))


def test_flo_truncated(tmp_path):
    import struct

    path = tmp_path / "t.flo"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", 202021.25))
        fh.write(struct.pack("<ii", 3, 3))
        fh.write(b"\x00" * 8)
    with pytest.raises(FormatError):
        mediaio.read_flo(str(path))


def test_raw_tensor_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    for shape in [(4,), (2, 3), (2, 3, 4), (1, 2, 3, 4)]:
        arr = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.rtf"
        mediaio.write_raw_tensor(arr, str(path))
        back = mediaio.read_raw_tensor(str(path))
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_raw_tensor_bad_magic(tmp_path):
    (tmp_path / "x.rtf").write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(FormatError, match="magic"):
        mediaio.read_raw_tensor(str(tmp_path / "x.rtf"))


def test_report_roundtrip(tmp_path):
    rep = MetricsReport(
        psnr=[30.0, 31.5],
        ssim=[0.9, 0.95],
        e_warp=[0.001, 0.002],
        e_inter=[1.0],
        metadata={"seed": 3},
    )
    path = tmp_path / "rep.json"
    mediaio.write_report(rep, str(path))
    parsed = json.loads(path.read_text())
    assert list(parsed) == ["psnr", "ssim", "e_warp", "e_inter", "metadata"]
    assert parsed["psnr"]["per_frame"] == [30.0, 31.5]
    assert parsed["psnr"]["mean"] == pytest.approx(30.75)
    assert parsed["e_warp"]["mean_x1000"] == pytest.approx(1.5)
    assert parsed["metadata"] == {"seed": 3}


def test_report_empty_arrays_mean_null(tmp_path):
    rep = MetricsReport()
    path = tmp_path / "rep.json"
    mediaio.write_report(rep, str(path))
    parsed = json.loads(path.read_text())
    assert parsed["psnr"]["mean"] is None
    assert parsed["e_warp"]["mean_x1000"] is None


def test_report_psnr_inf_sentinel():
    rep = MetricsReport(psnr=[math.inf, 40.0])
    d = mediaio.report_to_dict(rep)
    assert d["psnr"]["per_frame"][0] == "inf"


def test_report_rejects_nan():
    rep = MetricsReport(ssim=[math.nan])
    with pytest.raises(ValueError, match="non-finite"):
        mediaio.report_to_dict(rep)


def test_report_rejects_inf_outside_psnr():
    rep = MetricsReport(e_warp=[math.inf])
    with pytest.raises(ValueError, match="non-finite"):
        mediaio.report_to_dict(rep)
