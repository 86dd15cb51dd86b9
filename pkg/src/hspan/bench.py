"""Benchmark harness: batch evaluation over a dataset manifest, synthetic
scene generation, spectral signature analysis, color rendering, and report
emission.

Evaluation fans tile x method work items over a process pool; the report is
assembled single-threaded in a fixed order, so repeated runs are
byte-identical no matter how many workers were used.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np

from .core import (
    BandMask,
    FrPair,
    HyperCube,
    PanImage,
    RasterMeta,
    RrTriplet,
    ValidationError,
    _dims_ratio,
    band_at_wavelength,
    load_container,
    store_container,
)
from .metrics import score_fr, score_rr
from .pipeline import DatasetManifest, PipelineParams, TileRecord
from .raster import MtfSpec, convolve_reflect, degrade_cube, lowpass_taps
from .sharpen import SHARPENERS, import_fused

RR_COLUMNS = ("ergas", "sam_deg", "scc", "q_avg")
FR_COLUMNS = ("d_lambda", "d_s", "qnr")
_LOWER_IS_BETTER = frozenset({"ergas", "sam_deg", "d_lambda", "d_s"})


@dataclass(frozen=True)
class MethodSpec:
    """One evaluated method: a built-in sharpener or an import directory."""

    name: str
    source: str = "builtin"
    path: str | None = None

    def __post_init__(self):
        if self.source == "builtin":
            if self.name not in SHARPENERS:
                raise ValidationError(
                    f"unknown method {self.name!r}; built-ins: {sorted(SHARPENERS)}"
                )
        elif self.source == "import":
            if not self.path:
                raise ValidationError("import method needs a directory path")
        else:
            raise ValidationError(f"method source must be builtin or import, got {self.source!r}")

    @classmethod
    def builtin(cls, name: str) -> "MethodSpec":
        return cls(name=name, source="builtin")

    @classmethod
    def imported(cls, path) -> "MethodSpec":
        return cls(name=Path(path).name, source="import", path=str(path))


@dataclass(frozen=True)
class RunConfig:
    manifest: str
    protocol: str
    methods: tuple[MethodSpec, ...]
    h_over_l: float = 1.0 / 6.0
    nyquist_gain: float = 0.3
    lowpass: str = "mtf"
    alpha: float = 1.0
    beta: float = 1.0
    workers: int = 1
    kernel_size: int | None = None
    block_size: int = 32
    stride: int = 32

    def __post_init__(self):
        if self.protocol not in ("rr", "fr"):
            raise ValidationError(f"protocol must be rr or fr, got {self.protocol!r}")
        if not self.methods:
            raise ValidationError("at least one method is required")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate method names: {names}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")

    def metric_params(self) -> dict:
        # the echo that lands in reports; deliberately excludes workers and
        # paths so runs differing only in those stay byte-identical
        return {
            "protocol": self.protocol,
            "h_over_l": self.h_over_l,
            "nyquist_gain": self.nyquist_gain,
            "lowpass": self.lowpass,
            "alpha": self.alpha,
            "beta": self.beta,
            "block_size": self.block_size,
            "stride": self.stride,
            "kernel_size": self.kernel_size,
        }


@dataclass(frozen=True)
class TileScore:
    tile: str
    method: str
    metrics: dict


@dataclass(frozen=True)
class MethodAggregate:
    method: str
    metrics: dict


@dataclass(frozen=True)
class RunFailure:
    tile: str
    method: str
    error: str


@dataclass(frozen=True)
class MetricReport:
    protocol: str
    params: dict
    rows: list[TileScore]
    aggregates: list[MethodAggregate]
    failures: list[RunFailure] = field(default_factory=list)

    def __post_init__(self):
        for agg in self.aggregates:
            mine = [r.metrics for r in self.rows if r.method == agg.method]
            if not mine:
                raise ValidationError(f"aggregate for {agg.method} has no tile rows")
            for key, value in agg.metrics.items():
                want = math.fsum(m[key] for m in mine) / len(mine)
                if abs(value - want) > 1e-12:
                    raise ValidationError(
                        f"aggregate {agg.method}/{key} is not the mean of its tiles"
                    )

    @property
    def columns(self) -> tuple[str, ...]:
        return RR_COLUMNS if self.protocol == "rr" else FR_COLUMNS

    def as_doc(self) -> dict:
        return {
            "protocol": self.protocol,
            "params": dict(self.params),
            "columns": list(self.columns),
            "rows": [asdict(r) for r in self.rows],
            "aggregates": [asdict(a) for a in self.aggregates],
            "failures": [asdict(f) for f in self.failures],
        }


def tile_label(rec: TileRecord) -> str:
    return f"{rec.scene}/r{rec.row}c{rec.col}"


def import_tile_path(import_dir, rec: TileRecord) -> Path:
    return Path(import_dir) / rec.scene / f"tile_r{rec.row}c{rec.col}" / "fused"


def _fuse(pair: FrPair, method: dict, params: dict, rec: dict) -> HyperCube:
    spec = MtfSpec(
        nyquist_gain=params["nyquist_gain"],
        ratio=pair.ratio,
        kernel_size=params["kernel_size"],
    )
    if method["source"] == "builtin":
        return SHARPENERS[method["name"]](pair, spec)
    path = Path(method["path"]) / rec["scene"] / f"tile_r{rec['row']}c{rec['col']}" / "fused"
    return import_fused(path, pair)


def _eval_item(task):
    """One tile x method evaluation; runs in a worker process."""
    key, root, rec, method, params = task
    root = Path(root)
    try:
        if params["protocol"] == "rr":
            pan_lo = load_container(root / rec["rr_pan_lo"])
            hs_lo = load_container(root / rec["rr_hs_lo"])
            ref = load_container(root / rec["rr_hs_ref"])
            pair = FrPair(pan_lo, hs_lo)
            fused = _fuse(pair, method, params, rec)
            scores = score_rr(
                fused,
                ref,
                h_over_l=params["h_over_l"],
                block_size=params["block_size"],
                stride=params["stride"],
            )
        else:
            pair = FrPair(
                load_container(root / rec["fr_pan"]),
                load_container(root / rec["fr_hs"]),
            )
            fused = _fuse(pair, method, params, rec)
            spec = MtfSpec(
                nyquist_gain=params["nyquist_gain"],
                ratio=pair.ratio,
                kernel_size=params["kernel_size"],
            )
            scores = score_fr(
                fused,
                pair,
                spec=spec,
                alpha=params["alpha"],
                beta=params["beta"],
                lowpass=params["lowpass"],
                block_size=params["block_size"],
                stride=params["stride"],
            )
        return key, "ok", scores.as_dict()
    except ValidationError as exc:
        return key, "error", str(exc)


def _run(config: RunConfig) -> MetricReport:
    manifest = DatasetManifest.load(config.manifest)
    tiles = [t for t in manifest.tiles if t.split == "test"]
    if not tiles:
        raise ValidationError("manifest holds no test tiles")
    if config.protocol == "rr":
        for t in tiles:
            if t.rr_pan_lo is None or t.rr_hs_lo is None or t.rr_hs_ref is None:
                raise ValidationError(
                    f"tile {tile_label(t)} has no reduced-resolution inputs"
                )
    params = config.metric_params()
    tasks = [
        ((ti, mi), str(manifest.root), asdict(rec), asdict(m), params)
        for ti, rec in enumerate(tiles)
        for mi, m in enumerate(config.methods)
    ]
    results = {}
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for key, status, payload in pool.map(_eval_item, tasks, chunksize=1):
                results[key] = (status, payload)
    else:
        for task in tasks:
            key, status, payload = _eval_item(task)
            results[key] = (status, payload)

    rows, failures = [], []
    for ti, rec in enumerate(tiles):
        for mi, m in enumerate(config.methods):
            status, payload = results[(ti, mi)]
            if status == "ok":
                rows.append(TileScore(tile_label(rec), m.name, payload))
            else:
                failures.append(RunFailure(tile_label(rec), m.name, payload))

    columns = RR_COLUMNS if config.protocol == "rr" else FR_COLUMNS
    aggregates = []
    for m in config.methods:
        mine = [r.metrics for r in rows if r.method == m.name]
        if not mine:
            continue
        aggregates.append(
            MethodAggregate(
                m.name,
                {c: math.fsum(r[c] for r in mine) / len(mine) for c in columns},
            )
        )
    return MetricReport(config.protocol, params, rows, aggregates, failures)


def run_rr(config: RunConfig) -> MetricReport:
    """Sharpen every test tile from its degraded inputs and score against
    the retained reference."""
    if config.protocol != "rr":
        raise ValidationError(f"config protocol is {config.protocol!r}, expected rr")
    return _run(config)


def run_fr(config: RunConfig) -> MetricReport:
    """Sharpen every test tile at native resolution and score without a
    reference."""
    if config.protocol != "fr":
        raise ValidationError(f"config protocol is {config.protocol!r}, expected fr")
    return _run(config)


def gen_synth(seed: int, hs_size, bands: int, ratio: int = 6, spec: MtfSpec | None = None):
    """Deterministic synthetic evaluation unit.

    The ground truth is a mixture of a few smooth abundance fields with
    random positive endmember spectra, built at the fine grid.  The pan is
    the mean of the ground-truth bands below 700 nm, and the coarse cube is
    the ground truth pushed through the sensor model, so the truth really
    is a consistent sharpening target.  Returns (FrPair, ground truth).
    """
    if bands < 2:
        raise ValidationError(f"need at least 2 bands, got {bands}")
    if isinstance(hs_size, int):
        hs_h = hs_w = hs_size
    else:
        hs_h, hs_w = (int(v) for v in hs_size)
    if hs_h < 1 or hs_w < 1:
        raise ValidationError(f"non-positive synthetic size {hs_h}x{hs_w}")
    if spec is None:
        spec = MtfSpec.for_ratio(ratio)
    elif spec.ratio != ratio:
        raise ValidationError(f"spec ratio {spec.ratio} != requested ratio {ratio}")

    rng = np.random.default_rng(seed)
    h, w = hs_h * ratio, hs_w * ratio
    k = min(bands, 5)
    fields = rng.standard_normal((k, h, w))
    # smooth with the narrowest tail-safe window for the spec's blur width;
    # abundance fields only need to look spatially coherent
    smooth_size = min(spec.size, 2 * math.ceil(3.5 * spec.sigma) + 1)
    smooth = MtfSpec(spec.nyquist_gain, spec.ratio, kernel_size=max(3, smooth_size))
    fields = convolve_reflect(fields, lowpass_taps(smooth))
    fields -= fields.min(axis=(1, 2), keepdims=True)
    fields += 0.05
    weights = fields / fields.sum(axis=0)
    spectra = rng.uniform(0.1, 1.0, (k, bands))
    truth = np.einsum("khw,kb->bhw", weights, spectra)

    wavelengths = tuple(np.linspace(400.0, 2505.0, bands))
    gt = HyperCube(
        RasterMeta(width=w, height=h, bands=bands, gsd=30.0, wavelengths=wavelengths),
        truth.astype(np.float32),
    )
    visible = np.asarray(wavelengths) <= 700.0
    pan = PanImage(
        RasterMeta(width=w, height=h, bands=1, gsd=30.0, wavelengths=(550.0,)),
        gt.samples[visible].mean(axis=0, dtype=np.float64).astype(np.float32),
    )
    hs = degrade_cube(gt, spec)
    return FrPair(pan, hs), gt


def as_rr_triplet(pair: FrPair, truth: HyperCube) -> RrTriplet:
    """View a synthetic unit as a reduced-resolution triplet with the truth
    as reference."""
    return RrTriplet(pan_lo=pair.pan, hs_lo=pair.hs, hs_ref=truth)


def write_synth_dataset(out_dir, seed: int = 0, hs_size=64, bands: int = 16,
                        ratio: int = 6, tiles: int = 1,
                        spec: MtfSpec | None = None) -> DatasetManifest:
    """Materialize synthetic tiles as a dataset a benchmark run can consume.

    Every tile is its own scene and lands in the test split; the pan/cube
    pair serves both protocols and the ground truth stands in as the
    reduced-resolution reference.
    """
    if tiles < 1:
        raise ValidationError(f"tile count must be >= 1, got {tiles}")
    if isinstance(hs_size, int):
        hs_size = (hs_size, hs_size)
    out_dir = Path(out_dir)
    used_spec = spec if spec is not None else MtfSpec.for_ratio(ratio)
    params = PipelineParams(
        invalid_threshold=0.05,
        hs_tile=int(hs_size[0]),
        pan_tile=int(hs_size[0]) * ratio,
        ratio=ratio,
        rr=True,
        split_seed=seed,
        nyquist_gain=used_spec.nyquist_gain,
        kernel_size=used_spec.kernel_size,
    )
    records = []
    for i in range(tiles):
        pair, gt = gen_synth(seed + i, hs_size, bands, ratio, spec)
        scene = f"synth{i:03d}"
        rel = PurePosixPath(scene)
        store_container(pair.pan, out_dir / rel / "pan")
        store_container(pair.hs, out_dir / rel / "hs")
        store_container(gt, out_dir / rel / "gt")
        records.append(
            TileRecord(
                scene=scene,
                row=0,
                col=0,
                split="test",
                hs_row_off=0,
                hs_col_off=0,
                pan_row_off=0,
                pan_col_off=0,
                fr_pan=str(rel / "pan"),
                fr_hs=str(rel / "hs"),
                rr_pan_lo=str(rel / "pan"),
                rr_hs_lo=str(rel / "hs"),
                rr_hs_ref=str(rel / "gt"),
            )
        )
    manifest = DatasetManifest(
        params=params, band_mask=BandMask(np.ones(bands, bool)), tiles=records
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def _check_roi(cube: HyperCube, roi) -> tuple[int, int, int, int]:
    x, y, w, h = (int(v) for v in roi)
    if w < 1 or h < 1:
        raise ValidationError(f"empty roi {tuple(roi)}")
    if x < 0 or y < 0 or x + w > cube.meta.width or y + h > cube.meta.height:
        raise ValidationError(
            f"roi {tuple(roi)} outside cube bounds "
            f"{cube.meta.width}x{cube.meta.height}"
        )
    return x, y, w, h


def extract_signature(cube: HyperCube, roi) -> np.ndarray:
    """Mean spectrum over a rectangular region, (x, y, width, height)."""
    x, y, w, h = _check_roi(cube, roi)
    return cube.samples[:, y : y + h, x : x + w].mean(axis=(1, 2), dtype=np.float64)


def crop_cube(cube: HyperCube, roi) -> HyperCube:
    """Rectangular spatial crop, (x, y, width, height) in pixels."""
    x, y, w, h = _check_roi(cube, roi)
    meta = RasterMeta(
        width=w,
        height=h,
        bands=cube.meta.bands,
        gsd=cube.meta.gsd,
        wavelengths=cube.meta.wavelengths,
        nodata=cube.meta.nodata,
        band_origins=cube.meta.band_origins,
    )
    return HyperCube(meta, cube.samples[:, y : y + h, x : x + w])


def signature_difference(fused: HyperCube, reference: HyperCube,
                         spec: MtfSpec | None = None, lowpass: str = "mtf"):
    """Per-band mean absolute deviation of ``fused`` from ``reference``.

    When the grids differ the fused cube is pushed through the sensor model
    down to the reference grid first.  Returns (mean_abs, normalized); the
    normalized variant divides by each reference band's dynamic range and
    is NaN where that range is zero.
    """
    if fused.meta.bands != reference.meta.bands:
        raise ValidationError(
            f"band counts differ: {fused.meta.bands} != {reference.meta.bands}"
        )
    if (fused.meta.width, fused.meta.height) != (reference.meta.width, reference.meta.height):
        ratio = _dims_ratio(fused.meta, reference.meta, "signature difference")
        if spec is None:
            spec = MtfSpec.for_ratio(ratio)
        elif spec.ratio != ratio:
            raise ValidationError(f"spec ratio {spec.ratio} != grid ratio {ratio}")
        fused = degrade_cube(fused, spec, lowpass)
    a = fused.samples.astype(np.float64)
    b = reference.samples.astype(np.float64)
    mean_abs = np.abs(a - b).mean(axis=(1, 2))
    span = b.max(axis=(1, 2)) - b.min(axis=(1, 2))
    normalized = np.where(span > 0.0, mean_abs / np.where(span > 0.0, span, 1.0), np.nan)
    return mean_abs, normalized


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Percentile as the value at rank ceil(p/100 * n) of the sorted data."""
    if not 0.0 <= pct <= 100.0:
        raise ValidationError(f"percentile outside [0, 100]: {pct}")
    flat = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if flat.size == 0:
        raise ValidationError("cannot take a percentile of nothing")
    rank = math.ceil(pct / 100.0 * flat.size)
    return float(flat[min(max(rank, 1), flat.size) - 1])


def render(cube: HyperCube, band_wavelengths, stretch=(1.0, 99.0)) -> np.ndarray:
    """Three bands as an 8-bit RGB array with a linear percentile stretch.

    Channels follow the order of ``band_wavelengths``; each is stretched
    independently between its own percentiles.  A flat stretch window maps
    the whole channel to 0 so degenerate tiles are obvious.
    """
    if len(band_wavelengths) != 3:
        raise ValidationError(f"need exactly 3 wavelengths, got {len(band_wavelengths)}")
    p_lo, p_hi = (float(p) for p in stretch)
    if not p_lo < p_hi:
        raise ValidationError(f"stretch window must satisfy low < high, got {stretch}")
    out = np.zeros((cube.meta.height, cube.meta.width, 3), dtype=np.uint8)
    for ch, wl in enumerate(band_wavelengths):
        band = cube.band(band_at_wavelength(cube, wl)).astype(np.float64)
        lo = nearest_rank_percentile(band, p_lo)
        hi = nearest_rank_percentile(band, p_hi)
        if hi <= lo:
            continue
        scaled = np.clip((band - lo) / (hi - lo), 0.0, 1.0)
        out[:, :, ch] = np.rint(scaled * 255.0).astype(np.uint8)
    return out


def save_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.asarray(rgb)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError("expected an (H, W, 3) uint8 array")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def emit_report(report: MetricReport, path, fmt: str = "csv") -> Path:
    """Write the report with a stable column order; returns the path.

    Markdown output bolds the best aggregate per column and underlines the
    second best (direction-aware: error metrics rank low-to-high).
    """
    if not report.rows and not report.failures:
        raise ValidationError("refusing to emit an empty report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = report.columns
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["tile", "method", *columns])
            for row in report.rows:
                writer.writerow([row.tile, row.method] + [_fmt(row.metrics[c]) for c in columns])
            for agg in report.aggregates:
                writer.writerow(["aggregate", agg.method] + [_fmt(agg.metrics[c]) for c in columns])
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump(report.as_doc(), fh, indent=2)
            fh.write("\n")
    elif fmt == "md":
        with open(path, "w") as fh:
            fh.write(_markdown_report(report))
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    return path


def _rank_marks(aggregates, column):
    """method -> "best" | "second" for one column, direction-aware."""
    values = {a.method: a.metrics[column] for a in aggregates}
    sign = 1.0 if column in _LOWER_IS_BETTER else -1.0
    ordered = sorted(set(sign * v for v in values.values()))
    marks = {}
    for method, value in values.items():
        if sign * value == ordered[0]:
            marks[method] = "best"
        elif len(ordered) > 1 and sign * value == ordered[1]:
            marks[method] = "second"
    return marks


def _markdown_report(report: MetricReport) -> str:
    columns = report.columns
    lines = [f"# Fusion quality report ({report.protocol.upper()} protocol)", ""]
    lines.append(
        "Parameters: "
        + ", ".join(f"{k}={v}" for k, v in report.params.items() if k != "protocol")
    )
    lines.append("")
    if report.aggregates:
        lines.append("## Aggregate over test tiles")
        lines.append("")
        lines.append("| method | " + " | ".join(columns) + " |")
        lines.append("|" + "---|" * (len(columns) + 1))
        marks = {c: _rank_marks(report.aggregates, c) for c in columns}
        for agg in report.aggregates:
            cells = []
            for c in columns:
                cell = _fmt(agg.metrics[c])
                mark = marks[c].get(agg.method)
                if mark == "best":
                    cell = f"**{cell}**"
                elif mark == "second":
                    cell = f"<u>{cell}</u>"
                cells.append(cell)
            lines.append(f"| {agg.method} | " + " | ".join(cells) + " |")
        lines.append("")
    if report.rows:
        lines.append("## Per-tile scores")
        lines.append("")
        lines.append("| tile | method | " + " | ".join(columns) + " |")
        lines.append("|" + "---|" * (len(columns) + 2))
        for row in report.rows:
            lines.append(
                f"| {row.tile} | {row.method} | "
                + " | ".join(_fmt(row.metrics[c]) for c in columns)
                + " |"
            )
        lines.append("")
    if report.failures:
        lines.append("## Failures")
        lines.append("")
        for f in report.failures:
            lines.append(f"- {f.tile} / {f.method}: {f.error}")
        lines.append("")
    return "\n".join(lines) + "\n"
