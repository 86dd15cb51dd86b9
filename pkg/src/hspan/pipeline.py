"""Dataset construction: band cleaning, detector concatenation, tiling,
reduced-resolution simulation, and manifest persistence.

A source scene is a co-registered bundle of one pan image, two detector
cubes (visible/near-infrared and short-wave infrared) sharing a pixel
grid, and their per-pixel status codes.  The pipeline removes bands that
are too often invalid in any scene, merges the detectors in wavelength
order, cuts aligned tiles, and optionally simulates the reduced-resolution
protocol for each tile.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np

from .core import (
    BandMask,
    ErrorCube,
    FrPair,
    HyperCube,
    PanImage,
    RasterMeta,
    RrTriplet,
    ValidationError,
    _dims_ratio,
    load_container,
    store_container,
)
from .raster import MtfSpec, degrade_cube, degrade_pan


@dataclass(frozen=True)
class SceneBundle:
    """One acquisition: pan plus the two detector cubes and their codes."""

    scene_id: str
    pan: PanImage
    vnir: HyperCube
    swir: HyperCube
    vnir_err: ErrorCube
    swir_err: ErrorCube

    def __post_init__(self):
        if not self.scene_id:
            raise ValidationError("scene_id must be non-empty")
        v, s = self.vnir.meta, self.swir.meta
        if (v.width, v.height) != (s.width, s.height):
            raise ValidationError(
                f"scene {self.scene_id}: detector grids differ "
                f"({v.width}x{v.height} vs {s.width}x{s.height})"
            )
        for cube, err, name in ((self.vnir, self.vnir_err, "vnir"), (self.swir, self.swir_err, "swir")):
            if err.meta.shape != cube.meta.shape:
                raise ValidationError(
                    f"scene {self.scene_id}: {name} code grid {err.meta.shape} "
                    f"!= cube {cube.meta.shape}"
                )
        p = self.pan.meta
        if p.width % v.width or p.height % v.height:
            raise ValidationError(
                f"scene {self.scene_id}: pan grid {p.width}x{p.height} is not an "
                f"integer multiple of the cube grid {v.width}x{v.height}"
            )
        ratio = p.width // v.width
        if p.height // v.height != ratio or ratio < 2:
            raise ValidationError(f"scene {self.scene_id}: inconsistent pan/cube ratio")
        if not np.isclose(v.gsd, p.gsd * ratio, rtol=1e-9):
            raise ValidationError(f"scene {self.scene_id}: gsd does not match the grid ratio")

    @property
    def ratio(self) -> int:
        return self.pan.meta.width // self.vnir.meta.width


@dataclass(frozen=True)
class PipelineParams:
    invalid_threshold: float = 0.05
    hs_tile: int = 384
    pan_tile: int = 2304
    ratio: int = 6
    rr: bool = False
    lowpass: str = "mtf"
    split_seed: int = 0
    nyquist_gain: float = 0.3
    kernel_size: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.invalid_threshold <= 1.0:
            raise ValidationError(f"invalid_threshold outside [0, 1]: {self.invalid_threshold}")
        if self.pan_tile != self.ratio * self.hs_tile:
            raise ValidationError(
                f"pan_tile {self.pan_tile} must equal ratio {self.ratio} x hs_tile {self.hs_tile}"
            )
        if self.lowpass not in ("mtf", "ideal"):
            raise ValidationError(f"unknown lowpass {self.lowpass!r}")

    def mtf_spec(self) -> MtfSpec:
        return MtfSpec(
            nyquist_gain=self.nyquist_gain, ratio=self.ratio, kernel_size=self.kernel_size
        )


@dataclass(frozen=True)
class TileRecord:
    scene: str
    row: int
    col: int
    split: str
    hs_row_off: int
    hs_col_off: int
    pan_row_off: int
    pan_col_off: int
    fr_pan: str
    fr_hs: str
    rr_pan_lo: str | None = None
    rr_hs_lo: str | None = None
    rr_hs_ref: str | None = None


@dataclass
class DatasetManifest:
    params: PipelineParams
    band_mask: BandMask
    tiles: list[TileRecord]
    root: Path | None = field(default=None, compare=False)

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise ValidationError("manifest has no storage root; save or load it first")
        return self.root / PurePosixPath(rel)

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "params": asdict(self.params),
            "band_mask": [bool(b) for b in self.band_mask.keep],
            "tiles": [
                {k: v for k, v in asdict(t).items() if v is not None} for t in self.tiles
            ],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        self.root = path.parent

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"missing manifest {path}")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except ValueError as exc:
                raise ValidationError(f"malformed manifest {path}: {exc}") from exc
        try:
            params = PipelineParams(**doc["params"])
            mask = BandMask(np.asarray(doc["band_mask"], dtype=bool))
            tiles = [TileRecord(**t) for t in doc["tiles"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed manifest {path}: {exc}") from exc
        return cls(params=params, band_mask=mask, tiles=tiles, root=path.parent)


def invalid_fraction(err: ErrorCube, band: int) -> float:
    """Fraction of a band's pixels whose code is flagged invalid."""
    if not 0 <= band < err.meta.bands:
        raise ValidationError(f"band {band} outside [0, {err.meta.bands})")
    if not err.invalid_codes:
        return 0.0
    codes = np.asarray(sorted(err.invalid_codes), dtype=np.uint8)
    return float(np.isin(err.codes[band], codes).mean())


def clean_bands(scenes, threshold: float) -> BandMask:
    """Dataset-global keep mask over concatenated detector bands.

    ``scenes`` is a sequence of (vnir_err, swir_err) pairs.  A band is
    dropped when its invalid fraction reaches ``threshold`` in at least one
    scene; the surviving mask applies to every scene identically.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValidationError("no scenes to clean")
    counts = {(v.meta.bands, s.meta.bands) for v, s in scenes}
    if len(counts) != 1:
        raise ValidationError(f"scenes disagree on band counts: {sorted(counts)}")
    nv, ns = counts.pop()
    keep = np.ones(nv + ns, dtype=bool)
    for v_err, s_err in scenes:
        for offset, err in ((0, v_err), (nv, s_err)):
            for b in range(err.meta.bands):
                if invalid_fraction(err, b) >= threshold:
                    keep[offset + b] = False
    if not keep.any():
        raise ValidationError("band cleaning removed every band")
    return BandMask(keep)


def concat_cubes(vnir: HyperCube, swir: HyperCube, mask: BandMask) -> HyperCube:
    """Merge the two detector cubes in ascending wavelength order.

    The mask indexes vnir bands first, then swir.  Overlapping wavelength
    ranges are kept from both detectors; each band is tagged with its
    source so the origin survives the merge.
    """
    v, s = vnir.meta, swir.meta
    if (v.width, v.height) != (s.width, s.height):
        raise ValidationError(
            f"detector grids differ: {v.width}x{v.height} vs {s.width}x{s.height}"
        )
    if not np.isclose(v.gsd, s.gsd, rtol=1e-9):
        raise ValidationError("detector gsd differ")
    if len(mask) != v.bands + s.bands:
        raise ValidationError(
            f"mask length {len(mask)} != total band count {v.bands + s.bands}"
        )
    wavelengths = np.concatenate([v.wavelengths, s.wavelengths])
    origins = np.array(["vnir"] * v.bands + ["swir"] * s.bands)
    samples = np.concatenate([vnir.samples, swir.samples], axis=0)
    kept = mask.keep
    wavelengths, origins, samples = wavelengths[kept], origins[kept], samples[kept]
    order = np.argsort(wavelengths, kind="stable")
    meta = RasterMeta(
        width=v.width,
        height=v.height,
        bands=int(kept.sum()),
        gsd=v.gsd,
        wavelengths=tuple(float(w) for w in wavelengths[order]),
        band_origins=tuple(str(o) for o in origins[order]),
    )
    return HyperCube(meta, samples[order])


def tile_offsets(length: int, tile: int) -> list[int]:
    """Top-left anchored non-overlapping offsets; partial remainder dropped."""
    if tile < 1:
        raise ValidationError(f"tile size must be >= 1, got {tile}")
    return list(range(0, length - tile + 1, tile))


def _crop_meta(meta: RasterMeta, size: int) -> RasterMeta:
    return RasterMeta(
        width=size,
        height=size,
        bands=meta.bands,
        gsd=meta.gsd,
        wavelengths=meta.wavelengths,
        nodata=meta.nodata,
        band_origins=meta.band_origins,
    )


def tile_fr(pan: PanImage, hs: HyperCube, hs_tile: int = 384, pan_tile: int = 2304) -> list[FrPair]:
    """Cut aligned square tiles, row-major; edges that do not fit are dropped."""
    h, w = hs.meta.height, hs.meta.width
    ratio = _dims_ratio(pan.meta, hs.meta, "tiling")
    if pan_tile != ratio * hs_tile:
        raise ValidationError(
            f"pan_tile {pan_tile} must equal grid ratio {ratio} x hs_tile {hs_tile}"
        )
    rows = tile_offsets(h, hs_tile)
    cols = tile_offsets(w, hs_tile)
    if not rows or not cols:
        raise ValidationError(
            f"scene smaller than one tile: {h}x{w} against tile {hs_tile}"
        )
    pairs = []
    pan_meta = _crop_meta(pan.meta, pan_tile)
    hs_meta = _crop_meta(hs.meta, hs_tile)
    for r0 in rows:
        for c0 in cols:
            hs_tile_cube = HyperCube(
                hs_meta, hs.samples[:, r0 : r0 + hs_tile, c0 : c0 + hs_tile]
            )
            pr, pc = r0 * ratio, c0 * ratio
            pan_tile_img = PanImage(
                pan_meta, pan.samples[pr : pr + pan_tile, pc : pc + pan_tile]
            )
            pairs.append(FrPair(pan_tile_img, hs_tile_cube))
    return pairs


def make_rr(fr: FrPair, spec: MtfSpec, lowpass: str = "mtf") -> RrTriplet:
    """Simulate the reduced-resolution protocol for one tile.

    The original cube becomes the reference; both inputs are degraded one
    ratio step so the fused result can be judged against a real target.
    """
    if spec.ratio != fr.ratio:
        raise ValidationError(f"spec ratio {spec.ratio} != pair ratio {fr.ratio}")
    return RrTriplet(
        pan_lo=degrade_pan(fr.pan, spec, lowpass),
        hs_lo=degrade_cube(fr.hs, spec, lowpass),
        hs_ref=fr.hs,
    )


def scene_split(scene_ids, seed: int) -> dict[str, str]:
    """Deterministic by-scene holdout: seeded shuffle, one fifth held out."""
    ids = sorted(scene_ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate scene ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = max(1, int(round(len(ids) * 0.2)))
    test = {ids[i] for i in order[:n_test]}
    return {sid: ("test" if sid in test else "train") for sid in ids}


def build_dataset(scenes, params: PipelineParams, out_dir) -> DatasetManifest:
    """Run the full preparation over ``scenes`` and write everything under
    ``out_dir`` with a ``manifest.json`` at its root."""
    scenes = list(scenes)
    if not scenes:
        raise ValidationError("build_dataset needs at least one scene")
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate scene ids")
    scenes.sort(key=lambda s: s.scene_id)
    mask = clean_bands([(s.vnir_err, s.swir_err) for s in scenes], params.invalid_threshold)
    split = scene_split(ids, params.split_seed)
    spec = params.mtf_spec()
    out_dir = Path(out_dir)
    records = []
    for scene in scenes:
        hs = concat_cubes(scene.vnir, scene.swir, mask)
        pairs = tile_fr(scene.pan, hs, params.hs_tile, params.pan_tile)
        cols = tile_offsets(hs.meta.width, params.hs_tile)
        rows = tile_offsets(hs.meta.height, params.hs_tile)
        for idx, pair in enumerate(pairs):
            row, col = divmod(idx, len(cols))
            rel = PurePosixPath(scene.scene_id) / f"tile_r{row}c{col}"
            tile_dir = out_dir / rel
            store_container(pair.pan, tile_dir / "fr_pan")
            store_container(pair.hs, tile_dir / "fr_hs")
            rr_paths = {}
            if params.rr:
                trip = make_rr(pair, spec, params.lowpass)
                store_container(trip.pan_lo, tile_dir / "rr_pan_lo")
                store_container(trip.hs_lo, tile_dir / "rr_hs_lo")
                store_container(trip.hs_ref, tile_dir / "rr_hs_ref")
                rr_paths = {
                    "rr_pan_lo": str(rel / "rr_pan_lo"),
                    "rr_hs_lo": str(rel / "rr_hs_lo"),
                    "rr_hs_ref": str(rel / "rr_hs_ref"),
                }
            records.append(
                TileRecord(
                    scene=scene.scene_id,
                    row=row,
                    col=col,
                    split=split[scene.scene_id],
                    hs_row_off=rows[row],
                    hs_col_off=cols[col],
                    pan_row_off=rows[row] * scene.ratio,
                    pan_col_off=cols[col] * scene.ratio,
                    fr_pan=str(rel / "fr_pan"),
                    fr_hs=str(rel / "fr_hs"),
                    **rr_paths,
                )
            )
    manifest = DatasetManifest(params=params, band_mask=mask, tiles=records)
    manifest.save(out_dir / "manifest.json")
    return manifest


_SCENE_PARTS = ("pan", "vnir", "swir", "vnir_err", "swir_err")


def load_scene_dir(path) -> SceneBundle:
    """Read one scene directory holding pan/vnir/swir/vnir_err/swir_err."""
    path = Path(path)
    parts = {}
    for name in _SCENE_PARTS:
        sub = path / name
        if not sub.is_dir():
            raise ValidationError(f"scene {path.name}: missing {name} container")
        parts[name] = load_container(sub)
    if not isinstance(parts["pan"], PanImage):
        raise ValidationError(f"scene {path.name}: pan container is not a pan image")
    for name in ("vnir", "swir"):
        if not isinstance(parts[name], HyperCube):
            raise ValidationError(f"scene {path.name}: {name} container is not a cube")
    for name in ("vnir_err", "swir_err"):
        if not isinstance(parts[name], ErrorCube):
            raise ValidationError(f"scene {path.name}: {name} container is not a code grid")
    return SceneBundle(scene_id=path.name, **parts)


def discover_scenes(root) -> list[SceneBundle]:
    """Load every scene directory directly under ``root``, ordered by name."""
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"scene root {root} is not a directory")
    bundles = [load_scene_dir(p) for p in sorted(root.iterdir()) if p.is_dir()]
    if not bundles:
        raise ValidationError(f"no scene directories under {root}")
    return bundles
