"""Small convolutional classifier and its checkpoint format.

Architecture (NCHW input, 32x32 gives the shapes in brackets)::

    x - 0.5                             (fixed centering, no parameters)
    conv1 3x3, C->16, stride 1   relu   [16x32x32]
    conv2 3x3, 16->32, stride 2  relu   [32x16x16]
    conv3 3x3, 32->64, stride 2  relu   [64x8x8]   <- feature map
    global average pool                 [64]
    dense 64->num_classes

Checkpoint layout (all integers little-endian)::

    magic  b"HSCK"        4 bytes
    version u32           currently 1
    num_classes u32, in_channels u32, seed u64
    count u32             number of parameter arrays
    per array, in architecture order:
        name_len u16, name (utf-8)
        ndim u8, dims u32 * ndim
        values float64 little-endian, C order
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"HSCK"
CHECKPOINT_VERSION = 1

# (name, out channels, in channels or None for the input, stride)
_CONVS = (("conv1", 16, None, 1), ("conv2", 32, 16, 2), ("conv3", 64, 32, 2))


class CheckpointError(ValueError):
    pass


@dataclass
class SmallCnn:
    params: dict[str, np.ndarray]
    num_classes: int = 10
    in_channels: int = 3
    seed: int = 0

    def copy(self) -> "SmallCnn":
        return SmallCnn({k: v.copy() for k, v in self.params.items()}, self.num_classes, self.in_channels, self.seed)

    def tensors(self, requires_grad: bool) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}


def param_shapes(num_classes: int = 10, in_channels: int = 3) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, out, inp, _ in _CONVS:
        cin = in_channels if inp is None else inp
        shapes[f"{name}.weight"] = (out, cin, 3, 3)
        shapes[f"{name}.bias"] = (out,)
    shapes["dense.weight"] = (64, num_classes)
    shapes["dense.bias"] = (num_classes,)
    return shapes


def he_bound(shape: tuple[int, ...]) -> float:
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return float(np.sqrt(6.0 / fan_in))


def init(seed: int, num_classes: int = 10, in_channels: int = 3) -> SmallCnn:
    """He-uniform weights, zero biases, all drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(num_classes, in_channels).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            b = he_bound(shape)
            params[name] = rng.uniform(-b, b, size=shape)
    return SmallCnn(params, num_classes, in_channels, seed)


def _as_batch(batch) -> ad.Tensor:
    t = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch)
    if t.values.ndim != 4:
        raise ad.ShapeError(f"expected an (N, C, H, W) batch, got {t.shape}")
    return t


def _trunk(model: SmallCnn, x: ad.Tensor, params: dict[str, ad.Tensor]) -> ad.Tensor:
    if x.shape[1] != model.in_channels:
        raise ad.ShapeError(f"model expects {model.in_channels} channels, batch has shape {x.shape}")
    h = ad.add(x, -0.5)
    for name, _, _, stride in _CONVS:
        h = ad.relu(ad.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride))
    return h


def forward(model: SmallCnn, batch, params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Logits ``(N, num_classes)``.  Pass ``params`` (from ``model.tensors``) to get parameter gradients."""
    params = params if params is not None else model.tensors(requires_grad=False)
    feats = _trunk(model, _as_batch(batch), params)
    n, c, h, w = feats.shape
    if h != w:
        raise ad.ShapeError(f"global pooling expects a square feature map, got {feats.shape}")
    pooled = ad.reshape(ad.avg_pool2d(feats, h), (n, c))
    return ad.add(ad.matmul(pooled, params["dense.weight"]), params["dense.bias"])


def features(model: SmallCnn, batch) -> np.ndarray:
    """Last conv layer activations (after relu), ``(N, 64, H/4, W/4)``."""
    return _trunk(model, _as_batch(batch), model.tensors(requires_grad=False)).values


def extract_features(model: SmallCnn, img: np.ndarray) -> np.ndarray:
    """Feature map ``(64, H/4, W/4)`` of one ``(H, W, C)`` image."""
    return features(model, to_nchw(np.asarray(img)[None]))[0]


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2))


def from_nchw(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 2, 3, 1))


def predict(model: SmallCnn, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions for ``(N, H, W, C)`` images."""
    preds = [
        forward(model, to_nchw(images[i : i + batch_size])).values.argmax(axis=1)
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ------------------------------------------------------------------ checkpoints


def encode_checkpoint(model: SmallCnn) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IIIQI", CHECKPOINT_VERSION, model.num_classes, model.in_channels, model.seed, len(model.params)),
    ]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> SmallCnn:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    try:
        version, num_classes, in_channels, seed, count = struct.unpack_from("<IIIQI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 4 + struct.calcsize("<IIIQI")
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(buf):
                raise CheckpointError(f"truncated data for {name}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    expected = param_shapes(num_classes, in_channels)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise CheckpointError(f"parameter shapes {got} do not match architecture {expected}")
    return SmallCnn(params, num_classes, in_channels, seed)


def save_checkpoint(model: SmallCnn, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path: str | os.PathLike) -> SmallCnn:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
