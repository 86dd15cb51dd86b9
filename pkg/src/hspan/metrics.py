"""Fusion quality metrics.

Two families:

* referenced scores for reduced-resolution runs, where the original cube
  serves as ground truth: ergas, spectral angle, structural correlation,
  and mean per-band universal image quality;
* no-reference scores for full-resolution runs: spectral distortion
  against the low-res input, spatial distortion against the pan channel,
  and their product form.

All functions take float arrays shaped (bands, height, width) for cubes
and (height, width) for single bands, compute in float64, and return
plain floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .core import DegenerateError, FrPair, HyperCube, ValidationError
from .raster import MtfSpec, convolve_reflect, degrade, least_squares


def _pair3d(x, y, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if b.ndim == 2:
        b = b[None]
    if a.ndim != 3 or b.ndim != 3:
        raise ValidationError(f"{what}: expected (bands, height, width) arrays")
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def rmse(x, y) -> float:
    """Root mean squared difference over all samples."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"rmse: shapes {a.shape} and {b.shape} differ")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ergas(fused, ref, h_over_l: float = 1.0 / 6.0) -> float:
    """Relative dimensionless global error.

    100 * h_over_l * sqrt(mean over bands of (rmse_b / mean(ref_b))^2),
    with h_over_l the fine-to-coarse resolution ratio (1/6 here).
    """
    f, r = _pair3d(fused, ref, "ergas")
    means = r.reshape(r.shape[0], -1).mean(axis=1)
    if np.any(means == 0.0):
        raise DegenerateError("ergas undefined: a reference band has zero mean")
    d = (f - r).reshape(f.shape[0], -1)
    band_mse = np.einsum("bp,bp->b", d, d) / d.shape[1]
    return float(100.0 * h_over_l * np.sqrt(np.mean(band_mse / means**2)))


def sam(fused, ref) -> float:
    """Mean spectral angle in degrees.

    Each pixel contributes the angle between its two spectra; pixels where
    either spectrum has zero norm are left out.  The angle comes from the
    chord length between unit spectra rather than an arccos of the dot
    product, which stays exact for identical inputs instead of drowning in
    rounding noise near cosine 1.
    """
    f, r = _pair3d(fused, ref, "sam")
    a = f.reshape(f.shape[0], -1)
    b = r.reshape(r.shape[0], -1)
    na = np.sqrt(np.einsum("bp,bp->p", a, a))
    nb = np.sqrt(np.einsum("bp,bp->p", b, b))
    valid = (na > 0.0) & (nb > 0.0)
    if not valid.any():
        raise DegenerateError("sam undefined: every pixel has a zero-norm spectrum")
    if valid.all():
        # no degenerate pixels, so skip the masked copies
        ua = a / na
        ub = b / nb
    else:
        ua = a[:, valid] / na[valid]
        ub = b[:, valid] / nb[valid]
    obtuse = np.einsum("bp,bp->p", ua, ub) < 0.0
    any_obtuse = bool(obtuse.any())
    if any_obtuse:
        s = ua[:, obtuse] + ub[:, obtuse]
        anti = np.sqrt(np.einsum("bp,bp->p", s, s))
    ua -= ub
    chord = np.sqrt(np.einsum("bp,bp->p", ua, ua))
    ang = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    if any_obtuse:
        ang[obtuse] = np.pi - 2.0 * np.arcsin(np.clip(anti / 2.0, 0.0, 1.0))
    return float(np.degrees(np.mean(ang)))


def _box3_sum(a: np.ndarray) -> np.ndarray:
    # 3x3 box sum with half-sample symmetric edges, as two shift-add
    # passes; single-pixel extents collapse every neighbour onto the pixel
    if a.shape[-1] == 1:
        s = 3.0 * a
    else:
        s = np.empty_like(a)
        s[..., 1:-1] = a[..., :-2] + a[..., 1:-1] + a[..., 2:]
        s[..., 0] = 2.0 * a[..., 0] + a[..., 1]
        s[..., -1] = a[..., -2] + 2.0 * a[..., -1]
    if a.shape[-2] == 1:
        return 3.0 * s
    out = np.empty_like(s)
    out[..., 1:-1, :] = s[..., :-2, :] + s[..., 1:-1, :] + s[..., 2:, :]
    out[..., 0, :] = 2.0 * s[..., 0, :] + s[..., 1, :]
    out[..., -1, :] = s[..., -2, :] + 2.0 * s[..., -1, :]
    return out


def scc(fused, ref) -> float:
    """Mean per-band correlation of high-pass detail.

    Bands are filtered with the all-neighbour Laplacian before Pearson
    correlation; bands whose detail is flat on either side are skipped.
    """
    f, r = _pair3d(fused, ref, "scc")
    # the all-neighbour Laplacian is 9*center minus the 3x3 box sum; a
    # rank-2 gram product then gives both variances and the cross term in
    # a single sweep over each band
    bf = _box3_sum(f)
    br = _box3_sum(r)
    n = f.shape[1] * f.shape[2]
    x = np.empty((2, n))
    vals = []
    for b in range(f.shape[0]):
        x[0] = (9.0 * f[b] - bf[b]).reshape(-1)
        x[1] = (9.0 * r[b] - br[b]).reshape(-1)
        x -= x.mean(axis=1, keepdims=True)
        gram = x @ x.T
        vf, vr = gram[0, 0], gram[1, 1]
        if vf <= 0.0 or vr <= 0.0:
            continue
        vals.append(gram[0, 1] / math.sqrt(vf * vr))
    if not vals:
        raise DegenerateError("scc undefined: no band has high-pass detail")
    return float(np.mean(vals))


def _uqi_terms(x, y):
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    num = 4.0 * cov * mx * my
    den = (vx + vy) * (mx * mx + my * my)
    return num, den


def uqi(x, y, block_size: int = 32, stride: int = 32) -> float:
    """Universal image quality index averaged over sliding blocks.

    Per block: 4 * cov * mx * my / ((vx + vy) * (mx^2 + my^2)) with
    population statistics.  Blocks with a zero denominator are skipped.
    An image smaller than the block in either direction is scored as a
    single whole-image block.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValidationError("uqi expects single-band 2-D arrays")
    if a.shape != b.shape:
        raise ValidationError(f"uqi: shapes {a.shape} and {b.shape} differ")
    if block_size < 1 or stride < 1:
        raise ValidationError("block_size and stride must be >= 1")
    h, w = a.shape
    if h < block_size or w < block_size:
        num, den = _uqi_terms(a, b)
        if den == 0.0:
            raise DegenerateError("uqi undefined: whole-image denominator is zero")
        return float(num / den)

    if (
        stride == block_size
        and h % block_size == 0
        and w % block_size == 0
    ):
        bh, bw = h // block_size, w // block_size
        ra = a.reshape(bh, block_size, bw, block_size)
        rb = b.reshape(bh, block_size, bw, block_size)
        ax = (1, 3)
        mx, my = ra.mean(axis=ax), rb.mean(axis=ax)
        vx, vy = ra.var(axis=ax), rb.var(axis=ax)
        cov = ((ra - mx[:, None, :, None]) * (rb - my[:, None, :, None])).mean(axis=ax)
        num = 4.0 * cov * mx * my
        den = (vx + vy) * (mx * mx + my * my)
        good = den != 0.0
        if not good.any():
            raise DegenerateError("uqi undefined: every block is degenerate")
        return float(np.mean(num[good] / den[good]))

    vals = []
    for i in range(0, h - block_size + 1, stride):
        for j in range(0, w - block_size + 1, stride):
            num, den = _uqi_terms(
                a[i : i + block_size, j : j + block_size],
                b[i : i + block_size, j : j + block_size],
            )
            if den != 0.0:
                vals.append(num / den)
    if not vals:
        raise DegenerateError("uqi undefined: every block is degenerate")
    return float(np.mean(vals))


def q_avg(fused, ref, block_size: int = 32, stride: int = 32) -> float:
    """Mean per-band universal quality index.

    Bands on which the index is undefined everywhere are skipped; if that
    happens for all bands the score is undefined.
    """
    f, r = _pair3d(fused, ref, "q_avg")
    nbands, h, w = f.shape
    if (
        h >= block_size
        and w >= block_size
        and stride == block_size
        and h % block_size == 0
        and w % block_size == 0
    ):
        # same population statistics as the uqi tiled path, but per band
        # with blocks laid out as rows so the moments become einsum
        # contractions instead of np.var's extra temporaries
        bh, bw = h // block_size, w // block_size
        n = block_size * block_size
        vals = []
        for b in range(nbands):
            ra = (
                f[b]
                .reshape(bh, block_size, bw, block_size)
                .transpose(0, 2, 1, 3)
                .reshape(bh * bw, n)
            )
            rb = (
                r[b]
                .reshape(bh, block_size, bw, block_size)
                .transpose(0, 2, 1, 3)
                .reshape(bh * bw, n)
            )
            mx, my = ra.mean(axis=1), rb.mean(axis=1)
            ca = ra - mx[:, None]
            cb = rb - my[:, None]
            vx = np.einsum("kp,kp->k", ca, ca) / n
            vy = np.einsum("kp,kp->k", cb, cb) / n
            cov = np.einsum("kp,kp->k", ca, cb) / n
            num = 4.0 * cov * mx * my
            den = (vx + vy) * (mx * mx + my * my)
            good = den != 0.0
            if good.any():
                vals.append(float(np.mean(num[good] / den[good])))
        if not vals:
            raise DegenerateError("q_avg undefined: every band is degenerate")
        return float(np.mean(vals))

    vals = []
    for b in range(nbands):
        try:
            vals.append(uqi(f[b], r[b], block_size=block_size, stride=stride))
        except DegenerateError:
            continue
    if not vals:
        raise DegenerateError("q_avg undefined: every band is degenerate")
    return float(np.mean(vals))


def d_lambda(
    fused,
    hs,
    spec: MtfSpec,
    lowpass: str = "mtf",
    block_size: int = 32,
    stride: int = 32,
) -> float:
    """Spectral distortion: 1 - q_avg(fused degraded to input scale, input).

    The fused cube is blurred with the sensor model and decimated so it
    lands on the grid of the low-resolution input it came from.
    """
    f = np.asarray(fused, dtype=np.float64)
    h = np.asarray(hs, dtype=np.float64)
    if f.ndim != 3 or h.ndim != 3:
        raise ValidationError("d_lambda expects (bands, height, width) arrays")
    if f.shape[0] != h.shape[0]:
        raise ValidationError("d_lambda: band counts differ")
    if f.shape[1] != h.shape[1] * spec.ratio or f.shape[2] != h.shape[2] * spec.ratio:
        raise ValidationError(
            f"d_lambda: fused grid {f.shape[1:]} is not {spec.ratio}x the input grid {h.shape[1:]}"
        )
    degraded = degrade(f, spec, lowpass)
    return 1.0 - q_avg(degraded, h, block_size=block_size, stride=stride)


def d_s(fused, pan) -> float:
    """Spatial distortion: 1 - r_squared of the pan channel regressed on
    the fused bands (with intercept)."""
    f = np.asarray(fused, dtype=np.float64)
    p = np.asarray(pan, dtype=np.float64)
    if f.ndim != 3 or p.ndim != 2:
        raise ValidationError("d_s expects a (bands, h, w) cube and an (h, w) pan")
    if f.shape[1:] != p.shape:
        raise ValidationError(f"d_s: cube grid {f.shape[1:]} != pan grid {p.shape}")
    design = f.reshape(f.shape[0], -1).T
    _, r2 = least_squares(design, p.ravel(), intercept=True)
    return 1.0 - r2


def qnr(d_lambda_val: float, d_s_val: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    """No-reference product score: (1 - d_lambda)^alpha * (1 - d_s)^beta."""
    try:
        return float((1.0 - d_lambda_val) ** alpha * (1.0 - d_s_val) ** beta)
    except (ValueError, ZeroDivisionError) as exc:
        raise DegenerateError(f"qnr undefined: {exc}") from exc


@dataclass(frozen=True)
class RrScores:
    ergas: float
    sam_deg: float
    scc: float
    q_avg: float

    def as_dict(self) -> dict[str, float]:
        return {
            "ergas": self.ergas,
            "sam_deg": self.sam_deg,
            "scc": self.scc,
            "q_avg": self.q_avg,
        }


@dataclass(frozen=True)
class FrScores:
    d_lambda: float
    d_s: float
    qnr: float
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        want = qnr(self.d_lambda, self.d_s, self.alpha, self.beta)
        if not np.isfinite(self.qnr) or abs(self.qnr - want) > 1e-9:
            raise ValidationError(
                f"qnr {self.qnr} does not match product {want} within 1e-9"
            )

    def as_dict(self) -> dict[str, float]:
        return {"d_lambda": self.d_lambda, "d_s": self.d_s, "qnr": self.qnr}


def score_rr(
    fused: HyperCube,
    ref: HyperCube,
    h_over_l: float = 1.0 / 6.0,
    block_size: int = 32,
    stride: int = 32,
) -> RrScores:
    """Referenced scores of a fused cube against its ground truth."""
    if fused.meta.shape != ref.meta.shape:
        raise ValidationError(
            f"score_rr: fused {fused.meta.shape} and reference {ref.meta.shape} differ"
        )
    # convert once; the metrics see float64 and skip their own copies
    f = np.ascontiguousarray(fused.samples, dtype=np.float64)
    r = np.ascontiguousarray(ref.samples, dtype=np.float64)
    return RrScores(
        ergas=ergas(f, r, h_over_l=h_over_l),
        sam_deg=sam(f, r),
        scc=scc(f, r),
        q_avg=q_avg(f, r, block_size=block_size, stride=stride),
    )


def score_fr(
    fused: HyperCube,
    pair: FrPair,
    spec: MtfSpec | None = None,
    alpha: float = 1.0,
    beta: float = 1.0,
    lowpass: str = "mtf",
    block_size: int = 32,
    stride: int = 32,
) -> FrScores:
    """No-reference scores of a fused cube against the inputs it came from."""
    if spec is None:
        spec = MtfSpec.for_ratio(pair.ratio)
    if spec.ratio != pair.ratio:
        raise ValidationError(f"spec ratio {spec.ratio} != pair ratio {pair.ratio}")
    if (fused.meta.height, fused.meta.width) != (pair.pan.meta.height, pair.pan.meta.width):
        raise ValidationError("score_fr: fused cube is not on the pan grid")
    if fused.meta.bands != pair.hs.meta.bands:
        raise ValidationError("score_fr: fused and input band counts differ")
    dl = d_lambda(
        fused.samples, pair.hs.samples, spec, lowpass=lowpass,
        block_size=block_size, stride=stride,
    )
    ds = d_s(fused.samples, pair.pan.samples)
    return FrScores(d_lambda=dl, d_s=ds, qnr=qnr(dl, ds, alpha, beta), alpha=alpha, beta=beta)
