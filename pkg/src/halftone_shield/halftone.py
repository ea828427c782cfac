"""Error-diffusion halftoning.

Pixels are visited in raster order (rows top to bottom, columns left to
right).  Each pixel's value, including the error already pushed onto it by
earlier pixels, is thresholded to 0 or 1, and the quantization error is
pushed onto not-yet-visited neighbours with the filter weights.  Error pushed
past the image border is discarded and tallied in ``dropped_error``.

Color images are halftoned one channel at a time.  All entry points accept a
single ``(H, W, C)`` image or any batch ``(..., H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

THRESHOLD = 0.5


class FilterConfigError(ValueError):
    pass


def quantize(value):
    """1.0 where ``value > 0.5`` (strictly), else 0.0."""
    return np.where(np.asarray(value) > THRESHOLD, 1.0, 0.0)


@dataclass(frozen=True)
class ErrorFilter:
    """Weight stencil; ``anchor`` is the (row, col) of the pixel being scanned."""

    weights: np.ndarray
    anchor: tuple[int, int]

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise FilterConfigError(f"weights must be 2-D, got shape {w.shape}")
        ar, ac = self.anchor
        if not (0 <= ar < w.shape[0] and 0 <= ac < w.shape[1]):
            raise FilterConfigError(f"anchor {self.anchor} outside stencil {w.shape}")
        flat_anchor = ar * w.shape[1] + ac
        backward = w.ravel()[: flat_anchor + 1]
        if np.any(backward != 0):
            # diffusion may never reach pixels already scanned
            raise FilterConfigError("weights at or before the anchor in raster order must be zero")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def offsets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Non-zero taps as (row offsets, col offsets, weights), stencil raster order."""
        rows, cols = np.nonzero(self.weights)
        return (
            (rows - self.anchor[0]).astype(np.int64),
            (cols - self.anchor[1]).astype(np.int64),
            self.weights[rows, cols].copy(),
        )

    @property
    def support(self) -> list[tuple[int, int]]:
        dr, dc, _ = self.offsets()
        return list(zip(dr.tolist(), dc.tolist()))


FLOYD_STEINBERG = ErrorFilter(
    weights=np.array([[0.0, 0.0, 7.0], [3.0, 5.0, 1.0]]) / 16.0,
    anchor=(0, 1),
)


@dataclass
class HalftoneState:
    """Result of a full scan.

    ``working`` holds each pixel's value after it pulled all incoming error
    (the value that was thresholded); ``errors`` the per-pixel quantization
    errors; ``dropped_error`` the total error mass pushed out of bounds.
    """

    output: np.ndarray
    working: np.ndarray
    errors: np.ndarray
    dropped_error: float


@numba.njit(cache=True)
def _diffuse_planes(planes, drs, dcs, ws, out, errors):
    n, height, width = planes.shape
    ntaps = drs.shape[0]
    dropped = 0.0
    for p in range(n):
        work = planes[p]
        for i in range(height):
            for j in range(width):
                old = work[i, j]
                new = 1.0 if old > 0.5 else 0.0
                out[p, i, j] = new
                err = old - new
                errors[p, i, j] = err
                for t in range(ntaps):
                    ti = i + drs[t]
                    tj = j + dcs[t]
                    push = err * ws[t]
                    if 0 <= ti < height and 0 <= tj < width:
                        work[ti, tj] += push
                    else:
                        dropped += push
    return dropped


def _to_planes(img: np.ndarray) -> np.ndarray:
    # (..., H, W, C) -> (P, H, W), contiguous copy
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 3:
        raise ValueError(f"expected (..., H, W, C) input, got shape {arr.shape}")
    moved = np.moveaxis(arr, -1, -3)
    return np.array(moved.reshape(-1, arr.shape[-3], arr.shape[-2]), order="C", copy=True)


def _from_planes(planes: np.ndarray, like_shape: tuple[int, ...]) -> np.ndarray:
    lead = like_shape[:-3]
    h, w, c = like_shape[-3:]
    return np.moveaxis(planes.reshape(*lead, c, h, w), -3, -1)


def diffuse(img: np.ndarray, filt: ErrorFilter = FLOYD_STEINBERG) -> HalftoneState:
    """Run error diffusion and return the full scan state.  ``img`` is not modified."""
    shape = np.shape(img)
    work = _to_planes(img)  # fresh copy, mutated in place by the kernel
    out = np.empty_like(work)
    errors = np.empty_like(work)
    drs, dcs, ws = filt.offsets()
    dropped = _diffuse_planes(work, drs, dcs, ws, out, errors)
    return HalftoneState(
        output=_from_planes(out, shape),
        working=_from_planes(work, shape),
        errors=_from_planes(errors, shape),
        dropped_error=float(dropped),
    )


def error_diffuse(img: np.ndarray, filt: ErrorFilter) -> np.ndarray:
    return diffuse(img, filt).output


def floyd_steinberg(img: np.ndarray) -> np.ndarray:
    return diffuse(img, FLOYD_STEINBERG).output
