"""Classical component-substitution sharpeners and the interpolation baseline.

Every method maps a pan/cube request to a fused cube on the pan grid with
the cube's band count and wavelengths.  Externally produced results enter
through :func:`import_fused` and satisfy the same geometry.
"""

from __future__ import annotations

import numpy as np

from .core import (
    DegenerateError,
    FrPair,
    FusedCube,
    HyperCube,
    RasterMeta,
    ValidationError,
    load_container,
    store_container,
)
from .raster import (
    MtfSpec,
    degrade,
    histogram_match_linear,
    least_squares,
    upsample_interp,
)

# A sharpen request is exactly the full-resolution input pair.
SharpenRequest = FrPair


def _fused_meta(req: SharpenRequest) -> RasterMeta:
    return RasterMeta(
        width=req.pan.meta.width,
        height=req.pan.meta.height,
        bands=req.hs.meta.bands,
        gsd=req.pan.meta.gsd,
        wavelengths=req.hs.meta.wavelengths,
        band_origins=req.hs.meta.band_origins,
    )


def sharpen_exp(req: SharpenRequest, spec: MtfSpec | None = None) -> FusedCube:
    """Plain per-band interpolation to the pan grid; uses no pan information."""
    del spec
    return HyperCube(_fused_meta(req), upsample_interp(req.hs.samples, req.ratio))


def sharpen_pca(req: SharpenRequest, spec: MtfSpec | None = None) -> FusedCube:
    """Substitute the leading principal component with the matched pan.

    Bands of the upsampled cube are decorrelated by a population-covariance
    eigendecomposition (pixels as observations); the pan is moment-matched
    to the leading score image and swapped in before inverting.  The
    leading eigenvector's largest-magnitude loading is oriented positive so
    the component's sign is reproducible.
    """
    del spec
    if req.hs.meta.bands < 2:
        raise ValidationError("pca substitution needs at least 2 bands")
    up = upsample_interp(req.hs.samples, req.ratio)
    bands = up.shape[0]
    flat = up.reshape(bands, -1)
    mu = flat.mean(axis=1)
    centered = flat - mu[:, None]
    cov = (centered @ centered.T) / centered.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0.0:
        raise DegenerateError("zero variance cube: no leading component to substitute")
    lead = evecs[:, -1]
    if lead[np.argmax(np.abs(lead))] < 0.0:
        evecs = evecs.copy()
        evecs[:, -1] = -lead
    scores = evecs.T @ centered
    s1 = scores[-1]
    pan = np.asarray(req.pan.samples, dtype=np.float64)
    if pan.std() == 0.0:
        # a flat pan carries no detail to inject; hold the component at its
        # own mean so band means survive the substitution
        matched = np.full(s1.shape, s1.mean())
    else:
        matched = histogram_match_linear(pan, float(s1.mean()), float(s1.std())).ravel()
    scores = scores.copy()
    scores[-1] = matched
    out = evecs @ scores + mu[:, None]
    return HyperCube(_fused_meta(req), out.reshape(up.shape))


def sharpen_gsa(req: SharpenRequest, spec: MtfSpec | None = None) -> FusedCube:
    """Adaptive intensity substitution with per-band injection gains.

    The intensity is the best affine predictor of the degraded pan from the
    low-resolution bands, evaluated on the upsampled bands.  The matched
    pan's excess over that intensity is injected per band with gain
    cov(band, intensity) / var(intensity).
    """
    if spec is None:
        spec = MtfSpec.for_ratio(req.ratio)
    if spec.ratio != req.ratio:
        raise ValidationError(f"spec ratio {spec.ratio} != request ratio {req.ratio}")
    up = upsample_interp(req.hs.samples, req.ratio)
    bands = up.shape[0]
    pan_lo = degrade(req.pan.samples, spec)
    design = np.asarray(req.hs.samples, dtype=np.float64).reshape(bands, -1).T
    weights, _ = least_squares(design, pan_lo.ravel(), intercept=True)
    intensity = np.tensordot(weights[:-1], up, axes=(0, 0)) + weights[-1]
    var_i = float(intensity.var())
    if var_i == 0.0:
        raise DegenerateError("degenerate intensity: regression produced a flat surface")
    matched = histogram_match_linear(
        req.pan.samples, float(intensity.mean()), float(intensity.std())
    )
    delta = matched - intensity
    flat_up = up.reshape(bands, -1)
    ic = (intensity - intensity.mean()).ravel()
    gains = (flat_up - flat_up.mean(axis=1)[:, None]) @ ic / ic.size / var_i
    out = up + gains[:, None, None] * delta
    return HyperCube(_fused_meta(req), out)


SHARPENERS = {
    "exp": sharpen_exp,
    "pca": sharpen_pca,
    "gsa": sharpen_gsa,
}


def import_fused(path, expected: SharpenRequest) -> FusedCube:
    """Load an externally produced fused cube and hold it to the request geometry."""
    obj = load_container(path)
    if not isinstance(obj, HyperCube):
        raise ValidationError(f"expected a fused cube container, found kind {type(obj).__name__}")
    pan_m, hs_m = expected.pan.meta, expected.hs.meta
    problems = []
    if obj.meta.width != pan_m.width:
        problems.append(f"width: {obj.meta.width} != {pan_m.width}")
    if obj.meta.height != pan_m.height:
        problems.append(f"height: {obj.meta.height} != {pan_m.height}")
    if obj.meta.bands != hs_m.bands:
        problems.append(f"bands: {obj.meta.bands} != {hs_m.bands}")
    if obj.meta.wavelengths != hs_m.wavelengths:
        problems.append("wavelengths: differ from request")
    if not np.isclose(obj.meta.gsd, pan_m.gsd, rtol=1e-9):
        problems.append(f"gsd: {obj.meta.gsd} != {pan_m.gsd}")
    if problems:
        raise ValidationError("imported cube mismatches request: " + "; ".join(problems))
    return obj


def export_fused(cube: FusedCube, path, clamp_negative: bool = False) -> None:
    """Write a fused cube; optionally clamp negative samples to zero.

    Clamping happens only here, never before scoring.
    """
    if clamp_negative and bool(np.any(cube.samples < 0)):
        cube = HyperCube(cube.meta, np.maximum(cube.samples, 0.0))
    store_container(cube, path)
