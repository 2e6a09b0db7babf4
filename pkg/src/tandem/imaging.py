"""Image preprocessing and horizontal NCC offset estimation.

Keyframes and live frames go through the same pipeline: channel-mean
greyscale, area downscaling, then per-block standardisation. Offsets between
two processed images are found by sliding the query horizontally and scoring
each shift with normalised cross-correlation.

Shift convention: a positive offset ``d`` means the query content sits ``d``
pixels to the right of where it appears in the reference, i.e. reference
column ``x`` is compared with query column ``x + d``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-6
VAR_GUARD = 1e-12


class InvalidDimensions(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class PGMFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RawImage:
    """8-bit camera frame, shape (height, width) or (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError(f"raw pixels must be uint8, got {px.dtype}")
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] not in (1, 3)):
            raise ValueError(f"unsupported raw image shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("raw image must be at least 1x1")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]

    def __eq__(self, other):
        return isinstance(other, RawImage) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProcessedImage:
    """Greyscale, downscaled, patch-normalised float64 image (read-only)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("processed image must be 2D")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class CorrelationProfile:
    offsets: np.ndarray
    values: np.ndarray
    best_offset: int
    peak: float

    @property
    def search_range(self) -> int:
        return int(self.offsets[-1])

    def value_at(self, d: int) -> float:
        return float(self.values[d + self.search_range])


# -- preprocessing ----------------------------------------------------------


def to_grey(img: RawImage) -> np.ndarray:
    px = img.pixels.astype(np.float64)
    if px.ndim == 3:
        px = px.mean(axis=2)
    return px


def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix averaging each output cell's footprint of input cells."""
    if n_out == n_in:
        return np.eye(n_in)
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / scale


def downscale(grey: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = grey.shape
    if (h, w) == (height, width):
        return grey
    return area_weights(h, height) @ grey @ area_weights(w, width).T


def patch_normalise(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Standardise each non-overlapping ``patch_size`` block; edge blocks are truncated."""
    h, w = img.shape
    nbx = -(-w // patch_size)
    rows = np.arange(h) // patch_size
    cols = np.arange(w) // patch_size
    label = (rows[:, None] * nbx + cols[None, :]).ravel()
    flat = img.ravel()
    nblocks = int(label.max()) + 1
    count = np.bincount(label, minlength=nblocks)
    mean = np.bincount(label, weights=flat, minlength=nblocks) / count
    dev = flat - mean[label]
    std = np.sqrt(np.bincount(label, weights=dev * dev, minlength=nblocks) / count)
    flat_std = std[label]
    out = np.where(flat_std < STD_FLOOR, 0.0, dev / np.maximum(flat_std, STD_FLOOR))
    return out.reshape(h, w)


def preprocess(img: RawImage, target_width: int, target_height: int, patch_size: int) -> ProcessedImage:
    if target_width < 1 or target_height < 1 or patch_size < 1:
        raise InvalidDimensions(
            f"target {target_width}x{target_height}, patch {patch_size}: all must be >= 1"
        )
    if target_width > img.width or target_height > img.height:
        raise InvalidDimensions(
            f"cannot upscale {img.width}x{img.height} to {target_width}x{target_height}"
        )
    grey = downscale(to_grey(img), target_width, target_height)
    return ProcessedImage(patch_normalise(grey, patch_size))


# -- correlation ------------------------------------------------------------


def _as_array(img) -> np.ndarray:
    return img.data if isinstance(img, ProcessedImage) else np.asarray(img, dtype=np.float64)


def _csum(cols: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros(cols.shape[:-1] + (1,)), np.cumsum(cols, axis=-1)], axis=-1)


class ReferenceBank:
    """Same-sized reference images with the per-image terms of the NCC sweep precomputed."""

    def __init__(self, references):
        refs = np.stack([_as_array(r) for r in references])
        if refs.ndim != 3:
            raise ValueError("references must be 2D images")
        self.images = refs
        _, self.height, self.width = refs.shape
        self.nfft = 1 << (2 * self.width - 1).bit_length()
        self.spectra = np.conj(np.fft.rfft(refs, self.nfft, axis=2))
        self.col_cum = _csum(refs.sum(axis=1))
        self.col_sq_cum = _csum((refs * refs).sum(axis=1))

    def __len__(self) -> int:
        return len(self.images)

    def profiles(self, indices, query, search_range: int) -> list[CorrelationProfile]:
        """Profiles of ``query`` against the references at ``indices``.

        The reference mean is taken over the overlapped columns only; the
        query mean is the full-image mean. Offsets where either window has
        (numerically) zero variance score 0.
        """
        q = _as_array(query)
        h, w = self.height, self.width
        if q.shape != (h, w):
            raise DimensionMismatch(f"reference {(h, w)} vs query {q.shape}")
        D = int(search_range)
        if not 0 <= D < w:
            raise ValueError(f"search range {D} must lie in [0, {w})")
        idx = np.asarray(indices, dtype=np.intp)

        qc = q - q.mean()
        d = np.arange(-D, D + 1)
        lo = np.maximum(0, -d)
        hi = np.minimum(w, w - d)
        n_px = (hi - lo) * h

        r_cum, r2_cum = self.col_cum[idx], self.col_sq_cum[idx]
        sum_r = r_cum[:, hi] - r_cum[:, lo]
        sum_r2 = r2_cum[:, hi] - r2_cum[:, lo]
        q_cum = _csum(qc.sum(axis=0))
        q2_cum = _csum((qc * qc).sum(axis=0))
        sum_q = q_cum[hi + d] - q_cum[lo + d]
        sum_q2 = q2_cum[hi + d] - q2_cum[lo + d]

        # cross[k, d] = sum_{y,x} ref_k[y, x] * qc[y, x + d], via zero-padded FFTs along x
        qspec = np.fft.rfft(qc, self.nfft, axis=1)
        prod = np.einsum("kyf,yf->kf", self.spectra[idx], qspec)
        cross = np.fft.irfft(prod, self.nfft, axis=1)[:, d % self.nfft]

        mean_r = sum_r / n_px
        num = cross - mean_r * sum_q
        var_r = sum_r2 - sum_r * mean_r
        var_q = np.broadcast_to(sum_q2, var_r.shape)
        ok = (var_r >= VAR_GUARD) & (var_q >= VAR_GUARD)
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = np.where(ok, num / np.sqrt(np.where(ok, var_r * var_q, 1.0)), 0.0)
        vals = np.clip(vals, -1.0, 1.0)
        return [_make_profile(d, v) for v in vals]


def ncc_profiles(references, query, search_range: int) -> list[CorrelationProfile]:
    """Correlation profiles of one query against several same-sized references."""
    bank = ReferenceBank(references)
    return bank.profiles(range(len(bank)), query, search_range)


def ncc_profile(reference, query, search_range: int) -> CorrelationProfile:
    return ncc_profiles([reference], query, search_range)[0]


def best_offset(offsets: np.ndarray, values: np.ndarray) -> int:
    """Argmax with ties broken toward smaller |d|, then toward negative d."""
    peak = values.max()
    tied = offsets[values >= peak - 1e-12]
    return int(min(tied, key=lambda o: (abs(int(o)), o > 0)))


def _make_profile(offsets: np.ndarray, values: np.ndarray) -> CorrelationProfile:
    values = np.ascontiguousarray(values)
    values.flags.writeable = False
    best = best_offset(offsets, values)
    D = int(offsets[-1])
    return CorrelationProfile(offsets, values, best, float(values[best + D]))


def pixel_to_angle(delta: float, fov: float, image_width: int) -> float:
    """Treat a horizontal pixel offset as a pure rotation."""
    return fov / image_width * delta


# -- PGM --------------------------------------------------------------------


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Binary P5 greyscale, maxval 255."""
    px = np.asarray(pixels)
    if px.ndim != 2 or px.dtype != np.uint8:
        raise ValueError("PGM output needs a 2D uint8 array")
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(px).tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    i = 2
    while len(tokens) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and buf[i : i + 1].isdigit():
            i += 1
        if start == i:
            raise PGMFormatError("malformed PGM header")
        tokens.append(int(buf[start:i]))
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMFormatError(f"{path}: not a binary PGM (P5)")
    try:
        (w, h, maxval), offset = _pgm_tokens(buf, 3)
    except PGMFormatError as exc:
        raise PGMFormatError(f"{path}: {exc}") from None
    if maxval != 255:
        raise PGMFormatError(f"{path}: maxval {maxval}, expected 255")
    raster = buf[offset : offset + w * h]
    if len(raster) != w * h or w < 1 or h < 1:
        raise PGMFormatError(f"{path}: truncated raster ({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def grey_u8(img: RawImage) -> np.ndarray:
    """Collapse to one 8-bit channel for storage."""
    if img.channels == 1:
        return img.pixels.reshape(img.height, img.width)
    return np.rint(img.pixels.astype(np.float64).mean(axis=2)).astype(np.uint8)
