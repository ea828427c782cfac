import struct

import numpy as np
import pytest

from gradcheck import check
from halftone_shield import autodiff as ad
from halftone_shield.model import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    extract_features,
    features,
    forward,
    he_bound,
    init,
    load_checkpoint,
    param_shapes,
    predict,
    save_checkpoint,
)

# recorded from init(0) on default_rng(42).uniform(size=(2, 3, 32, 32))
GOLDEN_LOGITS = [
    [0.1622611433, -0.1166413572, -0.0539185801, -0.2752576893, 0.0493758694,
     0.6481753074, 0.1884939429, -0.0940761538, 0.2195556557, -0.129578338],
    [0.1430158625, -0.0672521305, -0.0687764472, -0.2499804995, 0.0039724149,
     0.5602732142, 0.1967816925, -0.0521587826, 0.1580014697, -0.1252080694],
]


def batch(n=2, seed=42, size=32):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size))


def test_golden_logits():
    logits = forward(init(0), batch()).values
    assert np.allclose(logits, GOLDEN_LOGITS, atol=1e-9)


def test_zero_dense_gives_uniform_softmax():
    model = init(3)
    model.params["dense.weight"][:] = 0.0
    logits = forward(model, batch())
    assert np.all(logits.values == 0.0)
    loss = ad.softmax_cross_entropy(logits, [1, 2])
    assert float(loss.values) == pytest.approx(np.log(10))


def test_forward_is_pure():
    model, x = init(1), batch()
    assert np.array_equal(forward(model, x).values, forward(model, x).values)


def test_logits_shape_and_classes():
    model = init(0, num_classes=4)
    assert forward(model, batch(5)).shape == (5, 4)


def test_grayscale_model():
    model = init(0, in_channels=1)
    x = np.random.default_rng(0).uniform(size=(2, 1, 16, 16))
    assert forward(model, x).shape == (2, 10)


def test_feature_shape():
    model = init(0)
    assert features(model, batch()).shape == (2, 64, 8, 8)
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert extract_features(model, img).shape == (64, 8, 8)


def test_identical_images_identical_features():
    model = init(0)
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert np.array_equal(extract_features(model, img), extract_features(model, img.copy()))


def test_zero_image_is_finite():
    model = init(0)
    assert np.all(np.isfinite(extract_features(model, np.zeros((32, 32, 3)))))
    assert np.all(np.isfinite(forward(model, np.zeros((1, 3, 32, 32))).values))


def test_init_seeded():
    a, b, c = init(5), init(5), init(6)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_init_within_he_bound():
    model = init(0)
    for name, shape in param_shapes().items():
        arr = model.params[name]
        assert arr.shape == shape
        if name.endswith(".bias"):
            assert np.all(arr == 0.0)
        else:
            assert np.abs(arr).max() <= he_bound(shape)


def test_input_shape_errors():
    with pytest.raises(ad.ShapeError):
        forward(init(0), np.zeros((3, 32, 32)))
    with pytest.raises(ad.ShapeError):
        forward(init(0), np.zeros((1, 1, 32, 32)))


def test_predict_batches_consistently():
    model = init(0)
    imgs = np.random.default_rng(1).uniform(size=(7, 32, 32, 3))
    assert np.array_equal(predict(model, imgs, batch_size=3), predict(model, imgs, batch_size=100))
    assert predict(model, imgs[:0]).shape == (0,)


def test_full_model_loss_gradient():
    model = init(0)
    x = np.random.default_rng(9).uniform(size=(2, 3, 8, 8))

    def loss(inp):
        return ad.softmax_cross_entropy(forward(model, inp), [3, 7], reduction="sum")

    assert check(loss, [x], coords=40) == []


def test_checkpoint_roundtrip(tmp_path):
    model = init(11, num_classes=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert (back.num_classes, back.in_channels, back.seed) == (7, 3, 11)
    assert all(np.array_equal(model.params[k], back.params[k]) for k in model.params)
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_header_layout():
    buf = encode_checkpoint(init(2))
    assert buf[:4] == CHECKPOINT_MAGIC
    assert struct.unpack_from("<IIIQI", buf, 4) == (1, 10, 3, 2, 8)


@pytest.mark.parametrize(
    "mangle",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 99) + b[8:],
        lambda b: b[:-8],
        lambda b: b[:20],
    ],
)
def test_checkpoint_corruption(mangle):
    with pytest.raises(CheckpointError):
        decode_checkpoint(mangle(encode_checkpoint(init(0))))
