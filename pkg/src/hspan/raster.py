"""Low-level grid operations: blur kernels, resampling, moment matching.

Everything here computes in float64 and is shape-polymorphic where it can
be: band axes ride along in front of the two spatial axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import erfc

from .core import DegenerateError, HyperCube, PanImage, RasterMeta, ValidationError

# Fraction of the 1-D kernel mass allowed to fall outside the support.
_TAIL_BUDGET = 1e-3


@dataclass(frozen=True)
class MtfSpec:
    """Sensor blur model: Gaussian with a prescribed gain at the coarse Nyquist.

    ``nyquist_gain`` is the amplitude the transfer function must take at
    frequency 1/(2*ratio) cycles per fine sample.  That pins the Gaussian
    width to sigma = ratio * sqrt(-2 ln(gain)) / pi.
    """

    nyquist_gain: float = 0.3
    ratio: int = 6
    kernel_size: int | None = None

    def __post_init__(self):
        if not 0.0 < self.nyquist_gain < 1.0:
            raise ValidationError(f"nyquist gain must be in (0, 1), got {self.nyquist_gain}")
        if self.ratio < 2:
            raise ValidationError(f"ratio must be >= 2, got {self.ratio}")
        if self.size < 3 or self.size % 2 == 0:
            raise ValidationError(f"kernel size must be odd and >= 3, got {self.size}")

    @property
    def size(self) -> int:
        if self.kernel_size is not None:
            return self.kernel_size
        return max(41, 2 * self.ratio + 1)

    @property
    def sigma(self) -> float:
        return self.ratio * math.sqrt(-2.0 * math.log(self.nyquist_gain)) / math.pi

    @classmethod
    def for_ratio(cls, ratio: int, nyquist_gain: float = 0.3, kernel_size: int | None = None):
        return cls(nyquist_gain=nyquist_gain, ratio=ratio, kernel_size=kernel_size)


def _gaussian_taps(spec: MtfSpec) -> np.ndarray:
    half = spec.size // 2
    tail = erfc((half + 0.5) / (spec.sigma * math.sqrt(2.0)))
    if tail > _TAIL_BUDGET:
        raise ValidationError(
            f"kernel size {spec.size} clips {tail:.2e} of the mass for sigma "
            f"{spec.sigma:.3f}; enlarge kernel_size"
        )
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * spec.sigma**2))
    return g / g.sum()


def _sinc_taps(ratio: int, size: int) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    fc = 1.0 / (2.0 * ratio)
    h = 2.0 * fc * np.sinc(2.0 * fc * x) * np.hamming(size)
    return h / h.sum()


def lowpass_taps(spec: MtfSpec, lowpass: str = "mtf") -> np.ndarray:
    """1-D unit-sum taps for the requested low-pass family."""
    if lowpass == "mtf":
        return _gaussian_taps(spec)
    if lowpass == "ideal":
        return _sinc_taps(spec.ratio, spec.size)
    raise ValidationError(f"unknown lowpass {lowpass!r}, expected 'mtf' or 'ideal'")


def mtf_gaussian_kernel(spec: MtfSpec) -> np.ndarray:
    """Separable 2-D Gaussian kernel realizing ``spec``, unit sum."""
    g = _gaussian_taps(spec)
    return np.outer(g, g)


def ideal_lowpass_kernel(ratio: int, size: int | None = None) -> np.ndarray:
    """Windowed-sinc low-pass cutting at the coarse Nyquist, unit sum."""
    if ratio < 2:
        raise ValidationError(f"ratio must be >= 2, got {ratio}")
    if size is None:
        size = max(41, 2 * ratio + 1)
    if size < 3 or size % 2 == 0:
        raise ValidationError(f"kernel size must be odd and >= 3, got {size}")
    h = _sinc_taps(ratio, size)
    return np.outer(h, h)


def highpass_laplacian() -> np.ndarray:
    """3x3 all-neighbour Laplacian used for structural correlation."""
    return np.array(
        [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]], dtype=np.float64
    )


def frequency_response(kernel: np.ndarray, freq: float) -> float:
    """DTFT amplitude of a centered kernel at ``freq`` cycles/sample.

    For a 2-D kernel this is the response along one axis at (freq, 0).
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim == 2:
        k = k.sum(axis=0)
    if k.ndim != 1 or len(k) % 2 == 0:
        raise ValidationError("kernel must be 1-D or 2-D with odd length")
    half = len(k) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    return float(np.sum(k * np.cos(2.0 * math.pi * freq * x)))


def convolve_reflect(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve spatially with half-sample symmetric boundary handling.

    1-D kernels are applied separably along the last two axes; 2-D kernels
    directly.  Leading band axes pass through untouched.
    """
    a = np.asarray(arr, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if a.ndim < 2:
        raise ValidationError("expected at least a 2-D grid")
    if k.ndim not in (1, 2):
        raise ValidationError("kernel must be 1-D or 2-D")
    radius = max(k.shape) // 2
    if a.shape[-1] < radius or a.shape[-2] < radius:
        raise ValidationError(
            f"grid {a.shape[-2]}x{a.shape[-1]} smaller than kernel radius {radius}"
        )
    if k.ndim == 1:
        out = ndimage.convolve1d(a, k, axis=-1, mode="reflect")
        return ndimage.convolve1d(out, k, axis=-2, mode="reflect")
    if a.ndim == 2:
        return ndimage.convolve(a, k, mode="reflect")
    return np.stack([ndimage.convolve(band, k, mode="reflect") for band in a])


def decimate(arr: np.ndarray, ratio: int, offset: int | None = None) -> np.ndarray:
    """Keep every ``ratio``-th sample along both spatial axes.

    The default offset ratio//2 picks the sample nearest each coarse cell
    center, so decimation and interpolation agree on registration.
    """
    a = np.asarray(arr)
    if ratio < 2:
        raise ValidationError(f"ratio must be >= 2, got {ratio}")
    if offset is None:
        offset = ratio // 2
    if not 0 <= offset < ratio:
        raise ValidationError(f"offset {offset} outside [0, {ratio})")
    if a.shape[-1] % ratio or a.shape[-2] % ratio:
        raise ValidationError(
            f"grid {a.shape[-2]}x{a.shape[-1]} not divisible by ratio {ratio}"
        )
    return a[..., offset::ratio, offset::ratio]


def _decimation_matrix(n: int, taps: np.ndarray, ratio: int) -> np.ndarray:
    # one column per surviving sample; reflected out-of-range taps fold
    # back inside, so the product reproduces blur-then-decimate exactly
    n_out = n // ratio
    rel = np.arange(taps.size) - taps.size // 2
    src = _reflect_index(ratio // 2 + ratio * np.arange(n_out)[:, None] + rel[None, :], n)
    m = np.zeros((n, n_out))
    np.add.at(m, (src.reshape(-1), np.repeat(np.arange(n_out), taps.size)), np.tile(taps, n_out))
    return m


def degrade(arr: np.ndarray, spec: MtfSpec, lowpass: str = "mtf") -> np.ndarray:
    """Blur with the sensor model, then decimate by the spec ratio."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim < 2:
        raise ValidationError("expected at least a 2-D grid")
    if a.shape[-1] % spec.ratio or a.shape[-2] % spec.ratio:
        raise ValidationError(
            f"grid {a.shape[-2]}x{a.shape[-1]} not divisible by ratio {spec.ratio}"
        )
    taps = lowpass_taps(spec, lowpass)
    radius = taps.size // 2
    if a.shape[-1] < radius or a.shape[-2] < radius:
        raise ValidationError(
            f"grid {a.shape[-2]}x{a.shape[-1]} smaller than kernel radius {radius}"
        )
    # blur-then-keep-every-ratio-th collapses into one banded matrix per
    # axis, so a pair of matrix products computes only the samples that
    # survive instead of a full-rate convolution
    cols = _decimation_matrix(a.shape[-1], taps, spec.ratio)
    rows = _decimation_matrix(a.shape[-2], taps, spec.ratio)
    return np.matmul(rows.T, np.matmul(a, cols))


def _scaled_meta(meta: RasterMeta, factor: int, up: bool) -> RasterMeta:
    if up:
        width, height, gsd = meta.width * factor, meta.height * factor, meta.gsd / factor
    else:
        width, height, gsd = meta.width // factor, meta.height // factor, meta.gsd * factor
    return RasterMeta(
        width=width,
        height=height,
        bands=meta.bands,
        gsd=gsd,
        wavelengths=meta.wavelengths,
        nodata=meta.nodata,
        band_origins=meta.band_origins,
    )


def degrade_cube(cube: HyperCube, spec: MtfSpec, lowpass: str = "mtf") -> HyperCube:
    return HyperCube(_scaled_meta(cube.meta, spec.ratio, up=False), degrade(cube.samples, spec, lowpass))


def degrade_pan(pan: PanImage, spec: MtfSpec, lowpass: str = "mtf") -> PanImage:
    return PanImage(_scaled_meta(pan.meta, spec.ratio, up=False), degrade(pan.samples, spec, lowpass))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    # 4-tap cubic with a = -1/2; weights sum to 1 for every phase
    tm = 1.0 - t
    w0 = -0.5 * t * tm * tm
    w1 = 1.5 * t**3 - 2.5 * t**2 + 1.0
    w2 = 1.5 * tm**3 - 2.5 * tm**2 + 1.0
    w3 = -0.5 * tm * t * t
    return np.stack([w0, w1, w2, w3])


def _interp_axis(arr: np.ndarray, ratio: int) -> np.ndarray:
    n = arr.shape[-1]
    offset = ratio // 2
    p = np.arange(n * ratio)
    coarse = (p - offset) / ratio
    i0 = np.floor(coarse).astype(np.int64)
    w = _catmull_rom_weights(coarse - i0)
    out = np.zeros(arr.shape[:-1] + (n * ratio,), dtype=np.float64)
    for k in range(4):
        out += w[k] * arr[..., _reflect_index(i0 - 1 + k, n)]
    return out


def upsample_interp(arr: np.ndarray, ratio: int) -> np.ndarray:
    """Cubic interpolation by an integer factor, registered to :func:`decimate`.

    Fine pixel p maps to coarse coordinate (p - ratio//2) / ratio, so the
    retained decimation samples are reproduced exactly.
    """
    a = np.asarray(arr, dtype=np.float64)
    if ratio < 2:
        raise ValidationError(f"ratio must be >= 2, got {ratio}")
    if a.ndim < 2:
        raise ValidationError("expected at least a 2-D grid")
    out = _interp_axis(a, ratio)
    return _interp_axis(out.swapaxes(-1, -2), ratio).swapaxes(-1, -2)


def upsample_cube(cube: HyperCube, ratio: int) -> HyperCube:
    return HyperCube(_scaled_meta(cube.meta, ratio, up=True), upsample_interp(cube.samples, ratio))


def histogram_match_linear(src: np.ndarray, ref_mean: float, ref_std: float) -> np.ndarray:
    """Affine remap of ``src`` onto the target mean and population deviation.

    (src - mean(src)) * (ref_std / std(src)) + ref_mean.  When the moments
    already agree the input is returned unchanged, keeping downstream
    zero-detail paths exact.
    """
    s = np.asarray(src, dtype=np.float64)
    if ref_std < 0.0:
        raise ValidationError(f"target deviation must be >= 0, got {ref_std}")
    s_mean, s_std = float(s.mean()), float(s.std())
    if s_mean == ref_mean and s_std == ref_std:
        return s.copy()
    if s_std == 0.0:
        raise DegenerateError("zero variance source cannot be moment-matched")
    return (s - s_mean) * (ref_std / s_std) + ref_mean


def least_squares(
    design: np.ndarray, target: np.ndarray, intercept: bool = False
) -> tuple[np.ndarray, float]:
    """Ordinary least squares fit of ``target`` on ``design`` columns.

    Returns (coefficients, r_squared).  With ``intercept`` a constant column
    is appended and its coefficient comes last.  The fit itself is the
    minimum-norm solution, so collinear designs do not raise; a constant
    target does, since r-squared is undefined there.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64).ravel()
    if X.ndim != 2:
        raise ValidationError("design must be 2-D (observations x regressors)")
    if X.shape[0] != y.size:
        raise ValidationError(
            f"design has {X.shape[0]} rows but target has {y.size} values"
        )
    if intercept:
        X = np.column_stack([X, np.ones(y.size, dtype=np.float64)])
    if X.shape[0] < X.shape[1] + 1:
        raise ValidationError(
            f"need at least {X.shape[1] + 1} observations for {X.shape[1]} regressors"
        )
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateError("target has zero variance; r-squared undefined")
    return coef, 1.0 - ss_res / ss_tot
