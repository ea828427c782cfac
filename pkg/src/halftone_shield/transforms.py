"""Input transforms used as pre-processing defenses.

Every transform maps ``(..., H, W, C)`` unit-interval arrays to arrays of the
same shape and range.  Gaussian blur and non-local means also provide exact
vector-Jacobian products so attacks can differentiate through them; the
remaining kinds are attacked through an identity surrogate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import numpy as np

from .halftone import floyd_steinberg, quantize


class TransformConfigError(ValueError):
    pass


class Kind(str, enum.Enum):
    IDENTITY = "identity"
    GAUSSIAN_BLUR = "gaussian_blur"
    NON_LOCAL_MEANS = "non_local_means"
    JPEG_LIKE = "jpeg_like"
    BIT_DEPTH = "bit_depth"
    HALFTONE = "halftone"


DEFAULT_PARAMS: dict[Kind, dict[str, Any]] = {
    Kind.IDENTITY: {},
    Kind.GAUSSIAN_BLUR: {"kernel_size": 5, "sigma": 1.5},
    Kind.NON_LOCAL_MEANS: {"patch_radius": 1, "search_radius": 5, "h_filter": 0.1},
    Kind.JPEG_LIKE: {"quality": 30},
    Kind.BIT_DEPTH: {"bits": 1},
    Kind.HALFTONE: {},
}

# forward pass cannot be differentiated usefully; attacked via an identity surrogate
GRADIENT_OBFUSCATING = frozenset({Kind.JPEG_LIKE, Kind.BIT_DEPTH, Kind.HALFTONE})


@dataclass(frozen=True)
class Transform:
    kind: Kind
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            kind = Kind(self.kind)
        except ValueError:
            raise TransformConfigError(f"unknown transform kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        unknown = set(self.params) - set(DEFAULT_PARAMS[kind])
        if unknown:
            raise TransformConfigError(f"{kind.value}: unknown parameters {sorted(unknown)}")
        params = {**DEFAULT_PARAMS[kind], **self.params}
        _validate(kind, params)
        object.__setattr__(self, "params", params)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def obfuscates_gradients(self) -> bool:
        return self.kind in GRADIENT_OBFUSCATING

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return apply(self, img)

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items()))))


def _validate(kind: Kind, p: dict[str, Any]) -> None:
    if kind is Kind.GAUSSIAN_BLUR:
        if p["kernel_size"] < 1 or p["kernel_size"] % 2 == 0:
            raise TransformConfigError(f"kernel_size must be odd and positive, got {p['kernel_size']}")
        if p["sigma"] <= 0:
            raise TransformConfigError("sigma must be positive")
    elif kind is Kind.JPEG_LIKE:
        if not 1 <= p["quality"] <= 100:
            raise TransformConfigError(f"quality must be in [1, 100], got {p['quality']}")
    elif kind is Kind.BIT_DEPTH:
        if p["bits"] < 1:
            raise TransformConfigError(f"bits must be >= 1, got {p['bits']}")
    elif kind is Kind.NON_LOCAL_MEANS:
        if p["patch_radius"] < 1 or p["search_radius"] < 1:
            raise TransformConfigError("patch_radius and search_radius must be >= 1")
        if p["h_filter"] <= 0:
            raise TransformConfigError("h_filter must be positive")


def make(kind: str, **params) -> Transform:
    return Transform(Kind(kind), params)


# ---------------------------------------------------------------- gaussian blur


def gaussian_kernel(kernel_size: int = 5, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2-D Gaussian weights."""
    r = kernel_size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma**2))
    return w / w.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, kernel_size: int, sigma: float) -> np.ndarray:
    # 1-D Gaussian along one axis with edge replication folded in
    r = kernel_size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d**2) / (2.0 * sigma**2))
    g /= g.sum()
    mat = np.zeros((n, n))
    for i in range(n):
        for t, off in enumerate(range(-r, r + 1)):
            mat[i, min(max(i + off, 0), n - 1)] += g[t]
    mat.setflags(write=False)
    return mat


def _separable(img: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    # img (..., H, W, C); rows mixed by mh, columns by mw
    out = np.einsum("ik,...kwc->...iwc", mh, img)
    return np.einsum("jw,...iwc->...ijc", mw, out)


def _blur_linear(img: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    h, w = img.shape[-3], img.shape[-2]
    return _separable(img, _blur_matrix(h, kernel_size, sigma), _blur_matrix(w, kernel_size, sigma))


def gaussian_blur(img: np.ndarray, kernel_size: int = 5, sigma: float = 1.5) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise TransformConfigError(f"kernel_size must be odd and positive, got {kernel_size}")
    return np.clip(_blur_linear(np.asarray(img, dtype=np.float64), kernel_size, sigma), 0.0, 1.0)


def gaussian_blur_vjp(img: np.ndarray, grad: np.ndarray, kernel_size: int = 5, sigma: float = 1.5) -> np.ndarray:
    # the blur of a unit-interval image never leaves [0, 1], so the clip is inert
    h, w = img.shape[-3], img.shape[-2]
    mh = _blur_matrix(h, kernel_size, sigma)
    mw = _blur_matrix(w, kernel_size, sigma)
    return _separable(grad, mh.T, mw.T)


# ------------------------------------------------------------- bit-depth reduction


def bit_depth_reduce(img: np.ndarray, bits: int = 1) -> np.ndarray:
    if bits < 1:
        raise TransformConfigError(f"bits must be >= 1, got {bits}")
    img = np.asarray(img, dtype=np.float64)
    if bits == 1:
        return quantize(img)
    levels = float(2**bits - 1)
    return np.floor(img * levels + 0.5) / levels


# ---------------------------------------------------------------- JPEG-like codec

JPEG_LUMINANCE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT8 = dct_matrix(8)


def quality_table(quality: int) -> np.ndarray:
    """Luminance table scaled with the libjpeg quality convention."""
    if not 1 <= quality <= 100:
        raise TransformConfigError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((JPEG_LUMINANCE * scale + 50) / 100), 1, 255)


def jpeg_like(img: np.ndarray, quality: int = 30) -> np.ndarray:
    table = quality_table(quality)
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]
    ph, pw = -h % 8, -w % 8
    planes = np.moveaxis(img, -1, -3)  # (..., C, H, W)
    pad = [(0, 0)] * (planes.ndim - 2) + [(0, ph), (0, pw)]
    planes = np.pad(planes, pad, mode="edge") - 0.5
    lead = planes.shape[:-2]
    hb, wb = planes.shape[-2] // 8, planes.shape[-1] // 8
    blocks = planes.reshape(*lead, hb, 8, wb, 8).swapaxes(-3, -2)  # (..., hb, wb, 8, 8)
    coef = _DCT8 @ blocks @ _DCT8.T
    coef = np.floor(coef * 255.0 / table + 0.5) * table / 255.0
    rec = _DCT8.T @ coef @ _DCT8
    rec = rec.swapaxes(-3, -2).reshape(*lead, hb * 8, wb * 8)[..., :h, :w] + 0.5
    return np.clip(np.moveaxis(rec, -3, -1), 0.0, 1.0)


# -------------------------------------------------------------- non-local means


def _nlm_patch_weights(patch_radius: int) -> np.ndarray:
    d = np.arange(-patch_radius, patch_radius + 1, dtype=np.float64)
    g = np.exp(-(d**2) / (2.0 * float(patch_radius) ** 2))
    return g / g.sum()


def _box_sep(arr: np.ndarray, g: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    # out[i, j] = sum_{u,v} g[u] g[v] arr[i + u, j + v]
    n = len(g)
    rows = sum(g[u] * arr[..., u : u + out_h, :] for u in range(n))
    return sum(g[v] * rows[..., :, v : v + out_w] for v in range(n))


def _nlm_offsets(search_radius: int):
    r = search_radius
    return [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1)]


def _nlm_planes(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(np.asarray(img, dtype=np.float64), -1, -3))


def _nlm_scan(planes, patch_radius, search_radius, h_filter):
    """Yield per search offset: (offset, weight map, padded image, padded diff)."""
    h, w = planes.shape[-2:]
    p, s = patch_radius, search_radius
    big = p + s
    g = _nlm_patch_weights(p)
    pad = [(0, 0)] * (planes.ndim - 2) + [(big, big), (big, big)]
    xp = np.pad(planes, pad, mode="edge")
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    inv_h2 = 1.0 / (h_filter * h_filter)
    # region of the padded grid covering every patch around an in-image pixel
    lo_h, lo_w = s, s
    span_h, span_w = h + 2 * p, w + 2 * p
    base = xp[..., lo_h : lo_h + span_h, lo_w : lo_w + span_w]
    for a, b in _nlm_offsets(s):
        valid = ((rows + a >= 0) & (rows + a < h) & (cols + b >= 0) & (cols + b < w)).astype(np.float64)
        shifted = xp[..., lo_h + a : lo_h + a + span_h, lo_w + b : lo_w + b + span_w]
        diff = base - shifted
        dist = _box_sep(diff * diff, g, h, w)
        weight = valid * np.exp(-np.maximum(dist, 0.0) * inv_h2)
        yield (a, b), weight, shifted, diff


def _nlm_forward(planes, patch_radius, search_radius, h_filter):
    p = patch_radius
    h, w = planes.shape[-2:]
    num = np.zeros_like(planes)
    den = np.zeros_like(planes)
    for _, weight, shifted, _ in _nlm_scan(planes, patch_radius, search_radius, h_filter):
        num += weight * shifted[..., p : p + h, p : p + w]
        den += weight
    return num / den, den


def non_local_means(
    img: np.ndarray, patch_radius: int = 1, search_radius: int = 5, h_filter: float = 0.1
) -> np.ndarray:
    """Gaussian-weighted non-local means, channels filtered independently.

    Candidates are the in-image pixels of the ``(2s+1)^2`` search window;
    patches are compared on an edge-replicated border with Gaussian patch
    weights of width ``patch_radius``.
    """
    out, _ = _nlm_forward(_nlm_planes(img), patch_radius, search_radius, h_filter)
    return np.moveaxis(out, -3, -1)


def non_local_means_vjp(
    img: np.ndarray, grad: np.ndarray, patch_radius: int = 1, search_radius: int = 5, h_filter: float = 0.1
) -> np.ndarray:
    """Exact gradient of ``sum(grad * non_local_means(img))`` with respect to ``img``."""
    planes = _nlm_planes(img)
    gout = _nlm_planes(grad)
    p, s = patch_radius, search_radius
    big = p + s
    h, w = planes.shape[-2:]
    inv_h2 = 1.0 / (h_filter * h_filter)
    g = _nlm_patch_weights(p)
    out, den = _nlm_forward(planes, p, s, h_filter)
    gz = gout / den
    gp = np.zeros(planes.shape[:-2] + (h + 2 * big, w + 2 * big))
    flip = g[::-1]
    for (a, b), weight, shifted, diff in _nlm_scan(planes, p, s, h_filter):
        xo = shifted[..., p : p + h, p : p + w]
        # direct path through the averaged value
        gp[..., big + a : big + a + h, big + b : big + b + w] += gz * weight
        # path through the weight's patch distance
        coeff = gz * (xo - out) * (-weight * inv_h2)
        padded = np.zeros(coeff.shape[:-2] + (h + 4 * p, w + 4 * p))
        padded[..., 2 * p : 2 * p + h, 2 * p : 2 * p + w] = coeff
        spread = 2.0 * diff * _box_sep(padded, flip, h + 2 * p, w + 2 * p)
        gp[..., s : s + h + 2 * p, s : s + w + 2 * p] += spread
        gp[..., s + a : s + a + h + 2 * p, s + b : s + b + w + 2 * p] -= spread
    return np.moveaxis(_edge_pad_adjoint(gp, big), -3, -1)


def _edge_pad_adjoint(gp: np.ndarray, r: int) -> np.ndarray:
    g = gp.copy()
    g[..., r, :] += g[..., :r, :].sum(axis=-2)
    g[..., -r - 1, :] += g[..., -r:, :].sum(axis=-2)
    g = g[..., r:-r, :]
    g[..., :, r] += g[..., :, :r].sum(axis=-1)
    g[..., :, -r - 1] += g[..., :, -r:].sum(axis=-1)
    return g[..., :, r:-r]


# ---------------------------------------------------------------------- dispatch


def apply(transform: Transform, img: np.ndarray) -> np.ndarray:
    p = transform.params
    kind = transform.kind
    if kind is Kind.IDENTITY:
        return img
    if kind is Kind.GAUSSIAN_BLUR:
        return gaussian_blur(img, p["kernel_size"], p["sigma"])
    if kind is Kind.NON_LOCAL_MEANS:
        return non_local_means(img, p["patch_radius"], p["search_radius"], p["h_filter"])
    if kind is Kind.JPEG_LIKE:
        return jpeg_like(img, p["quality"])
    if kind is Kind.BIT_DEPTH:
        return bit_depth_reduce(img, p["bits"])
    if kind is Kind.HALFTONE:
        return floyd_steinberg(img)
    raise TransformConfigError(f"unhandled transform kind {kind}")


def vjp(transform: Transform, img: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad * transform(img))``; identity for gradient-obfuscating kinds."""
    p = transform.params
    if transform.kind is Kind.GAUSSIAN_BLUR:
        return gaussian_blur_vjp(img, grad, p["kernel_size"], p["sigma"])
    if transform.kind is Kind.NON_LOCAL_MEANS:
        return non_local_means_vjp(img, grad, p["patch_radius"], p["search_radius"], p["h_filter"])
    return grad
