import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from halftone_shield.image import (
    CIFAR_RECORD,
    CifarFormatError,
    HeaderError,
    LabeledExample,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
    as_image,
    clamp_unit,
    encode_ppm,
    load_cifar10_batch,
    load_ppm,
    parse_ppm,
    raster_order,
    save_ppm,
)


def write(tmp_path, name, data: bytes):
    path = tmp_path / name
    path.write_bytes(data)
    return path


def test_p5_endpoints(tmp_path):
    img = load_ppm(write(tmp_path, "a.pgm", b"P5\n2 1\n255\n" + bytes([0, 255])))
    assert img.shape == (1, 2, 1)
    assert img[..., 0].tolist() == [[0.0, 1.0]]


def test_p6_scaling(tmp_path):
    img = load_ppm(write(tmp_path, "a.ppm", b"P6\n1 1\n255\n" + bytes([128, 128, 128])))
    assert img.shape == (1, 1, 3)
    assert img.ravel().tolist() == [128 / 255] * 3


def test_header_comments_allowed():
    img = parse_ppm(b"P5\n# made by hand\n1 1\n255\n" + bytes([51]))
    assert img.item() == 51 / 255


@pytest.mark.parametrize(
    "buf, err",
    [
        (b"P3\n1 1\n255\n0", HeaderError),
        (b"P5\n1\n", HeaderError),
        (b"P5\nx 1\n255\n\x00", HeaderError),
        (b"P5\n2 2\n255\n\x00\x00", TruncatedPayloadError),
        (b"P5\n1 1\n65535\n\x00\x00", UnsupportedMaxvalError),
        (b"P5\n1 1\n15\n\x00", UnsupportedMaxvalError),
    ],
)
def test_distinct_parse_errors(buf, err):
    with pytest.raises(err):
        parse_ppm(buf)


@pytest.mark.parametrize("value, byte", [(1.0, 255), (0.5, 128), (0.0, 0), (1.7, 255), (-0.3, 0), (0.2, 51)])
def test_save_rounding(tmp_path, value, byte):
    path = tmp_path / "x.pgm"
    save_ppm(np.array([[[value]]]), path)
    assert path.read_bytes()[-1] == byte


byte_images = arrays(
    np.uint8,
    st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3])),
)


@settings(max_examples=50, deadline=None)
@given(byte_images)
def test_roundtrip_is_byte_exact(raw):
    h, w, c = raw.shape
    buf = (b"P5" if c == 1 else b"P6") + b"\n%d %d\n255\n" % (w, h) + raw.tobytes()
    assert encode_ppm(parse_ppm(buf)) == buf


def test_roundtrip_through_files(tmp_path):
    raw = np.random.default_rng(0).integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    src = write(tmp_path, "a.ppm", b"P6\n4 5\n255\n" + raw.tobytes())
    dst = tmp_path / "b.ppm"
    save_ppm(load_ppm(src), dst)
    assert dst.read_bytes() == src.read_bytes()


@pytest.mark.parametrize("value, expected", [(1.3, 1.0), (-0.2, 0.0), (0.5, 0.5)])
def test_clamp_unit(value, expected):
    assert clamp_unit(np.array([value]))[0] == expected


@given(arrays(np.float64, 8, elements=st.floats(-5, 5)))
def test_clamp_idempotent(x):
    once = clamp_unit(x)
    assert np.array_equal(clamp_unit(once), once)
    assert once.min() >= 0.0 and once.max() <= 1.0


def test_raster_order():
    visits = list(raster_order(3, 4))
    assert len(visits) == 12 and len(set(visits)) == 12
    assert visits[:5] == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]
    assert visits == sorted(visits)


def test_as_image_validates():
    assert as_image(np.zeros((2, 3))).shape == (2, 3, 1)
    with pytest.raises(ValueError):
        as_image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        as_image(np.zeros((2, 2, 2)))


def cifar_record(label, pixels):
    return bytes([label]) + bytes(pixels)


def test_cifar_single_record(tmp_path):
    path = write(tmp_path, "b.bin", cifar_record(7, [255] * 3072))
    (ex,) = load_cifar10_batch(path, 10)
    assert ex.label == 7
    assert ex.image.shape == (32, 32, 3)
    assert np.all(ex.image == 1.0)


def test_cifar_planar_layout(tmp_path):
    pixels = [0] * 3072
    pixels[1024 + 5] = 255  # green plane, row 0, col 5
    (ex,) = load_cifar10_batch(write(tmp_path, "b.bin", cifar_record(1, pixels)))
    assert ex.image[0, 5].tolist() == [0.0, 1.0, 0.0]


def test_cifar_max_records(tmp_path):
    path = write(tmp_path, "b.bin", cifar_record(1, [0] * 3072) * 3)
    assert load_cifar10_batch(path, 0) == []
    assert len(load_cifar10_batch(path, 2)) == 2
    assert len(load_cifar10_batch(path, 99)) == 3


def test_cifar_bad_size(tmp_path):
    with pytest.raises(CifarFormatError):
        load_cifar10_batch(write(tmp_path, "b.bin", b"\x00" * (CIFAR_RECORD + 1)))


def test_labeled_example_rejects_negative_label():
    with pytest.raises(ValueError):
        LabeledExample(np.zeros((1, 1, 1)), -1)
