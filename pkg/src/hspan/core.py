"""Domain types and the on-disk raster container.

Rasters are band-sequential (BSQ) float32 grids with per-band wavelength
metadata and a ground-sample distance.  All types are immutable after
construction; their sample buffers are marked read-only so they can be
shared across threads without copies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ValidationError(ValueError):
    """Input violates a structural or geometric invariant."""


class DegenerateError(ValidationError):
    """Statistic is undefined on this input (zero variance, empty span)."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RasterMeta:
    """Geometry and spectral metadata shared by every raster type.

    ``wavelengths`` holds one center wavelength (nm) per band and must be
    strictly increasing for multiband rasters.  ``band_origins`` optionally
    tags each band with the detector it came from (e.g. "vnir"/"swir").
    """

    width: int
    height: int
    bands: int
    gsd: float
    wavelengths: tuple[float, ...]
    nodata: float | None = None
    band_origins: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"non-positive raster size {self.width}x{self.height}")
        if self.bands < 1:
            raise ValidationError(f"band count must be >= 1, got {self.bands}")
        if self.gsd <= 0:
            raise ValidationError(f"gsd must be > 0, got {self.gsd}")
        if len(self.wavelengths) != self.bands:
            raise ValidationError(
                f"wavelength count {len(self.wavelengths)} != band count {self.bands}"
            )
        if self.bands > 1:
            diffs = np.diff(np.asarray(self.wavelengths, dtype=float))
            if not np.all(diffs > 0):
                raise ValidationError("wavelengths must be strictly increasing")
        if self.band_origins is not None and len(self.band_origins) != self.bands:
            raise ValidationError("band_origins length must match band count")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.bands, self.height, self.width)


def _as_samples(arr, shape, what: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if out.shape != shape:
        raise ValidationError(f"{what} shape {out.shape} != expected {shape}")
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{what} contains non-finite samples")
    return _freeze(out)


@dataclass(frozen=True)
class HyperCube:
    """Multiband reflectance raster, samples shaped (bands, height, width)."""

    meta: RasterMeta
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "samples", _as_samples(self.samples, self.meta.shape, "cube")
        )

    def band(self, index: int) -> np.ndarray:
        return self.samples[index]

    def with_samples(self, samples) -> "HyperCube":
        return HyperCube(self.meta, samples)


# A fused result is an ordinary cube at panchromatic resolution.
FusedCube = HyperCube


@dataclass(frozen=True)
class PanImage:
    """Single-band high-resolution raster, samples shaped (height, width)."""

    meta: RasterMeta
    samples: np.ndarray

    def __post_init__(self):
        if self.meta.bands != 1:
            raise ValidationError(f"pan image must have 1 band, got {self.meta.bands}")
        object.__setattr__(
            self,
            "samples",
            _as_samples(self.samples, (self.meta.height, self.meta.width), "pan"),
        )


@dataclass(frozen=True)
class ErrorCube:
    """Per-pixel per-band status codes mirroring detector error matrices."""

    meta: RasterMeta
    codes: np.ndarray
    invalid_codes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        if codes.shape != self.meta.shape:
            raise ValidationError(
                f"code grid shape {codes.shape} != expected {self.meta.shape}"
            )
        object.__setattr__(self, "codes", _freeze(codes))
        object.__setattr__(self, "invalid_codes", frozenset(int(c) for c in self.invalid_codes))


@dataclass(frozen=True)
class BandMask:
    """Boolean keep-vector over the bands of a source cube."""

    keep: np.ndarray

    def __post_init__(self):
        keep = np.ascontiguousarray(self.keep, dtype=bool)
        if keep.ndim != 1:
            raise ValidationError("band mask must be a 1-D vector")
        if not keep.any():
            raise ValidationError("band mask keeps no bands")
        object.__setattr__(self, "keep", _freeze(keep))

    @property
    def kept(self) -> int:
        return int(self.keep.sum())

    def __len__(self) -> int:
        return len(self.keep)


def _dims_ratio(big: RasterMeta, small: RasterMeta, what: str) -> int:
    """Integer scale factor between two grids, validated on both axes."""
    if small.width == 0 or big.width % small.width or big.height % small.height:
        raise ValidationError(
            f"{what}: {big.width}x{big.height} is not an integer multiple "
            f"of {small.width}x{small.height}"
        )
    ratio = big.width // small.width
    if big.height // small.height != ratio:
        raise ValidationError(f"{what}: axis ratios differ")
    if ratio < 2:
        raise ValidationError(f"{what}: ratio must be >= 2, got {ratio}")
    return ratio


def _check_gsd(coarse: float, fine: float, ratio: int, what: str) -> None:
    if not np.isclose(coarse, fine * ratio, rtol=1e-9):
        raise ValidationError(
            f"{what}: gsd {coarse} is not {ratio}x the finer gsd {fine}"
        )


@dataclass(frozen=True)
class RrTriplet:
    """Reduced-resolution evaluation unit: low-res pan and cube plus reference.

    ``hs_ref`` sits on the same grid as ``pan_lo``; ``hs_lo`` is coarser by an
    integer factor (6 for the standard protocol).
    """

    pan_lo: PanImage
    hs_lo: HyperCube
    hs_ref: HyperCube

    def __post_init__(self):
        if (self.pan_lo.meta.width, self.pan_lo.meta.height) != (
            self.hs_ref.meta.width,
            self.hs_ref.meta.height,
        ):
            raise ValidationError("pan_lo and hs_ref grids differ")
        if not np.isclose(self.pan_lo.meta.gsd, self.hs_ref.meta.gsd, rtol=1e-9):
            raise ValidationError("pan_lo and hs_ref gsd differ")
        ratio = _dims_ratio(self.hs_ref.meta, self.hs_lo.meta, "rr triplet")
        _check_gsd(self.hs_lo.meta.gsd, self.hs_ref.meta.gsd, ratio, "rr triplet")
        if self.hs_lo.meta.bands != self.hs_ref.meta.bands:
            raise ValidationError("hs_lo and hs_ref band counts differ")

    @property
    def ratio(self) -> int:
        return self.hs_ref.meta.width // self.hs_lo.meta.width


@dataclass(frozen=True)
class FrPair:
    """Full-resolution evaluation unit: native pan plus coarser cube."""

    pan: PanImage
    hs: HyperCube

    def __post_init__(self):
        ratio = _dims_ratio(self.pan.meta, self.hs.meta, "fr pair")
        _check_gsd(self.hs.meta.gsd, self.pan.meta.gsd, ratio, "fr pair")

    @property
    def ratio(self) -> int:
        return self.pan.meta.width // self.hs.meta.width


def band_at_wavelength(cube: HyperCube, target: float) -> int:
    """Index of the band whose wavelength is nearest ``target`` (nm).

    Ties break toward the lower index so renders are deterministic.
    """
    wl = np.asarray(cube.meta.wavelengths, dtype=float)
    return int(np.argmin(np.abs(wl - target)))


_KINDS = ("hypercube", "pan", "errorcube")


def store_container(obj: HyperCube | PanImage | ErrorCube, path) -> None:
    """Write ``obj`` to ``path`` as a ``meta.json`` + ``data.bin`` directory.

    Rasters are stored as little-endian float32, error codes as uint8,
    row-major within each band with bands concatenated.  The layout
    round-trips bit-exactly through :func:`load_container`.
    """
    if isinstance(obj, HyperCube):
        kind, payload = "hypercube", obj.samples
        dtype = "f32le"
    elif isinstance(obj, PanImage):
        kind, payload = "pan", obj.samples
        dtype = "f32le"
    elif isinstance(obj, ErrorCube):
        kind, payload = "errorcube", obj.codes
        dtype = "u8"
    else:
        raise ValidationError(f"cannot store object of type {type(obj).__name__}")

    meta = obj.meta
    doc = {
        "width": meta.width,
        "height": meta.height,
        "bands": meta.bands,
        "dtype": dtype,
        "layout": "bsq",
        "gsd_m": meta.gsd,
        "wavelengths_nm": list(meta.wavelengths),
        "kind": kind,
    }
    if meta.nodata is not None:
        doc["nodata"] = meta.nodata
    if meta.band_origins is not None:
        doc["band_origins"] = list(meta.band_origins)
    if kind == "errorcube":
        doc["invalid_codes"] = sorted(obj.invalid_codes)

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "meta.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    data = payload.astype("<f4") if dtype == "f32le" else payload.astype(np.uint8)
    data.tofile(path / "data.bin")


def load_container(path) -> HyperCube | PanImage | ErrorCube:
    """Load a container directory written by :func:`store_container`."""
    path = Path(path)
    meta_path = path / "meta.json"
    data_path = path / "data.bin"
    if not meta_path.is_file():
        raise ValidationError(f"missing file {meta_path}")
    if not data_path.is_file():
        raise ValidationError(f"missing file {data_path}")
    with open(meta_path) as fh:
        doc = json.load(fh)

    kind = doc.get("kind")
    if kind not in _KINDS:
        raise ValidationError(f"unknown container kind {kind!r}")
    if doc.get("layout") != "bsq":
        raise ValidationError(f"unsupported layout {doc.get('layout')!r}")
    expected_dtype = "u8" if kind == "errorcube" else "f32le"
    if doc.get("dtype") != expected_dtype:
        raise ValidationError(
            f"dtype {doc.get('dtype')!r} does not match kind {kind!r}"
        )

    meta = RasterMeta(
        width=int(doc["width"]),
        height=int(doc["height"]),
        bands=int(doc["bands"]),
        gsd=float(doc["gsd_m"]),
        wavelengths=tuple(float(w) for w in doc["wavelengths_nm"]),
        nodata=doc.get("nodata"),
        band_origins=tuple(doc["band_origins"]) if "band_origins" in doc else None,
    )

    count = meta.bands * meta.height * meta.width
    raw = np.fromfile(data_path, dtype="<f4" if expected_dtype == "f32le" else np.uint8)
    if raw.size != count:
        raise ValidationError(
            f"payload size mismatch: {raw.size} samples != "
            f"{meta.bands}x{meta.height}x{meta.width}"
        )

    if kind == "hypercube":
        return HyperCube(meta, raw.reshape(meta.shape))
    if kind == "pan":
        return PanImage(meta, raw.reshape(meta.height, meta.width))
    codes = raw.reshape(meta.shape)
    return ErrorCube(meta, codes, frozenset(int(c) for c in doc.get("invalid_codes", [])))
