"""Acceptance gate: one check per shipping criterion.

Each test prints a single pass/fail line (run with ``pytest -v -s``) and
fails loudly if its bound is not met.  Bounds and constructions are pinned
here on purpose; loosening them is a contract change, not a cleanup.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from hspan.bench import as_rr_triplet, gen_synth, write_synth_dataset
from hspan.core import (
    ErrorCube,
    FrPair,
    HyperCube,
    PanImage,
    RasterMeta,
    ValidationError,
)
from hspan.metrics import (
    d_lambda,
    d_s,
    ergas,
    qnr,
    rmse,
    sam,
    scc,
    score_rr,
    uqi,
)
from hspan.pipeline import clean_bands, make_rr, tile_fr, tile_offsets
from hspan.raster import MtfSpec, degrade, lowpass_taps, upsample_interp
from hspan.sharpen import sharpen_gsa, sharpen_pca

SPEC2 = MtfSpec(nyquist_gain=0.3, ratio=2, kernel_size=9)


def report(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} failed: {detail}"


# reference leaderboard rows (d_lambda, d_s, qnr) for the full-corpus
# no-reference protocol; regenerating them needs the proprietary corpus and
# trained networks, so they are held as printed 4-decimal constants
FR_LEADERBOARD = {
    "GSA": (0.3820, 0.0016, 0.6170),
    "HySure": (0.4151, 0.0009, 0.5843),
    "PNN": (0.3801, 0.0101, 0.6136),
    "PanNet": (0.3507, 0.0203, 0.6360),
    "MSDCNN": (0.3915, 0.0068, 0.6044),
    "TFNet": (0.3552, 0.0066, 0.6405),
    "SRPPNN": (0.3948, 0.0139, 0.5965),
    "DIPNet": (0.3681, 0.0348, 0.6098),
}
FR_LEADERBOARD_PCA = (0.9411, 1.5277, 0.0558)


def test_criterion_1_qnr_composition():
    worst = 0.0
    for name, (dl, ds, printed) in FR_LEADERBOARD.items():
        got = qnr(dl, ds, 1.0, 1.0)
        worst = max(worst, abs(got - printed))
    # the PCA row does not satisfy the product form; keep the evidence
    dl, ds, printed = FR_LEADERBOARD_PCA
    pca_gap = abs(qnr(dl, ds, 1.0, 1.0) - printed)
    ok = worst <= 1e-3 and pca_gap > 1e-3
    report(1, ok, f"8 rows compose within {worst:.2e}; excluded row off by {pca_gap:.3f}")


def test_criterion_2_metric_fixed_points():
    t0 = time.monotonic()
    worst = {"ergas": 0.0, "sam_deg": 0.0, "scc": 1.0, "q_avg": 1.0}
    for seed in range(20):
        pair, gt = gen_synth(seed, hs_size=64, bands=16, ratio=6)
        trip = as_rr_triplet(pair, gt)
        scores = score_rr(trip.hs_ref, trip.hs_ref)
        worst["ergas"] = max(worst["ergas"], scores.ergas)
        worst["sam_deg"] = max(worst["sam_deg"], scores.sam_deg)
        worst["scc"] = min(worst["scc"], scores.scc)
        worst["q_avg"] = min(worst["q_avg"], scores.q_avg)
    dt = time.monotonic() - t0
    ok = (
        worst["ergas"] <= 1e-9
        and worst["sam_deg"] <= 1e-9
        and worst["scc"] >= 1.0 - 1e-9
        and worst["q_avg"] >= 1.0 - 1e-9
        and dt < 5.0
    )
    report(
        2,
        ok,
        f"20 triplets in {dt:.2f}s; worst ergas {worst['ergas']:.1e}, "
        f"sam {worst['sam_deg']:.1e}, scc 1-{1 - worst['scc']:.1e}, "
        f"q_avg 1-{1 - worst['q_avg']:.1e}",
    )


def _reflect(idx: int, n: int) -> int:
    m = idx % (2 * n)
    return m if m < n else 2 * n - 1 - m


def brute_rmse(a, b):
    total = 0.0
    count = 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        total += (float(x) - float(y)) ** 2
        count += 1
    return math.sqrt(total / count)


def brute_ergas(f, r, h_over_l):
    acc = 0.0
    for b in range(f.shape[0]):
        diff = f[b].reshape(-1) - r[b].reshape(-1)
        mse = sum(float(d) ** 2 for d in diff) / diff.size
        mean = sum(float(v) for v in r[b].reshape(-1)) / r[b].size
        acc += mse / mean**2
    return 100.0 * h_over_l * math.sqrt(acc / f.shape[0])


def brute_sam_deg(f, r):
    bands, h, w = f.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            a = [float(f[b, y, x]) for b in range(bands)]
            b_ = [float(r[b, y, x]) for b in range(bands)]
            dot = sum(p * q for p, q in zip(a, b_))
            na = math.sqrt(sum(p * p for p in a))
            nb = math.sqrt(sum(q * q for q in b_))
            total += math.acos(min(1.0, max(-1.0, dot / (na * nb))))
    return math.degrees(total / (h * w))


def brute_highpass(band):
    h, w = band.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 8.0 * float(band[y, x])
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == 0 and dx == 0:
                        continue
                    acc -= float(band[_reflect(y + dy, h), _reflect(x + dx, w)])
            out[y, x] = acc
    return out


def brute_pearson(a, b):
    n = a.size
    ma = sum(float(v) for v in a.reshape(-1)) / n
    mb = sum(float(v) for v in b.reshape(-1)) / n
    num = va = vb = 0.0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        num += (float(x) - ma) * (float(y) - mb)
        va += (float(x) - ma) ** 2
        vb += (float(y) - mb) ** 2
    return num / math.sqrt(va * vb)


def brute_scc(f, r):
    vals = [brute_pearson(brute_highpass(f[b]), brute_highpass(r[b])) for b in range(f.shape[0])]
    return sum(vals) / len(vals)


def brute_uqi_block(a, b):
    n = a.size
    ma = sum(float(v) for v in a.reshape(-1)) / n
    mb = sum(float(v) for v in b.reshape(-1)) / n
    va = sum((float(v) - ma) ** 2 for v in a.reshape(-1)) / n
    vb = sum((float(v) - mb) ** 2 for v in b.reshape(-1)) / n
    cov = sum((float(x) - ma) * (float(y) - mb) for x, y in zip(a.reshape(-1), b.reshape(-1))) / n
    num = 4.0 * cov * ma * mb
    den = (va + vb) * (ma * ma + mb * mb)
    return num, den

def brute_uqi(a, b, block, stride):
    h, w = a.shape
    if h < block or w < block:
        num, den = brute_uqi_block(a, b)
        return num / den
    vals = []
    for i in range(0, h - block + 1, stride):
        for j in range(0, w - block + 1, stride):
            num, den = brute_uqi_block(a[i : i + block, j : j + block], b[i : i + block, j : j + block])
            if den != 0.0:
                vals.append(num / den)
    return sum(vals) / len(vals)


def brute_degrade(band, taps, ratio):
    h, w = band.shape
    half = taps.size // 2
    kernel = np.outer(taps, taps)
    blurred = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-half, half + 1):
                for dx in range(-half, half + 1):
                    acc += kernel[dy + half, dx + half] * float(
                        band[_reflect(y + dy, h), _reflect(x + dx, w)]
                    )
            blurred[y, x] = acc
    off = ratio // 2
    return blurred[off::ratio, off::ratio]


def brute_d_lambda(f, hs, taps, ratio):
    vals = []
    for b in range(f.shape[0]):
        deg = brute_degrade(f[b], taps, ratio)
        num, den = brute_uqi_block(deg, hs[b])
        vals.append(num / den)
    return 1.0 - sum(vals) / len(vals)


def brute_d_s(f, pan):
    design = np.column_stack([f.reshape(f.shape[0], -1).T, np.ones(pan.size)])
    target = pan.reshape(-1).astype(np.float64)
    beta, *_ = np.linalg.lstsq(design, target, rcond=None)
    pred = design @ beta
    ss_res = float(np.sum((target - pred) ** 2))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    return 1.0 - (1.0 - ss_res / ss_tot)


def test_criterion_3_brute_force_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    taps = lowpass_taps(SPEC2)
    worst = {}

    def track(name, got, want):
        worst[name] = max(worst.get(name, 0.0), abs(got - want))

    for _ in range(50):
        f = rng.uniform(0.1, 1.0, (4, 8, 8))
        r = rng.uniform(0.1, 1.0, (4, 8, 8))
        hs = rng.uniform(0.1, 1.0, (4, 4, 4))
        pan = rng.uniform(0.1, 1.0, (8, 8))
        track("rmse", rmse(f, r), brute_rmse(f, r))
        track("ergas", ergas(f, r, h_over_l=1.0 / 6.0), brute_ergas(f, r, 1.0 / 6.0))
        track("sam", sam(f, r), brute_sam_deg(f, r))
        track("scc", scc(f, r), brute_scc(f, r))
        track("uqi_whole", uqi(f[0], r[0]), brute_uqi(f[0], r[0], 32, 32))
        track("uqi_sliding", uqi(f[0], r[0], block_size=4, stride=2), brute_uqi(f[0], r[0], 4, 2))
        track("d_lambda", d_lambda(f, hs, SPEC2), brute_d_lambda(f, hs, taps, 2))
        track("d_s", d_s(f, pan), brute_d_s(f, pan))
    dt = time.monotonic() - t0
    peak = max(worst.values())
    ok = peak <= 1e-6 and dt < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, ok, f"50 instances in {dt:.2f}s; worst abs gaps: {detail}")


def test_criterion_4_degradation_self_consistency():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        f = rng.uniform(0.1, 1.0, (4, 16, 16))
        worst = max(worst, d_lambda(f, degrade(f, SPEC2), SPEC2))
    ok = worst <= 1e-9
    report(4, ok, f"20 cubes; worst spectral distortion {worst:.1e}")


def test_criterion_5_sharpener_identities():
    def cube_meta(size, bands, gsd):
        return RasterMeta(width=size, height=size, bands=bands, gsd=gsd,
                          wavelengths=tuple(np.linspace(450.0, 900.0, bands)))

    def pan_meta(size):
        return RasterMeta(width=size, height=size, bands=1, gsd=30.0, wavelengths=(550.0,))

    worst_pca = worst_gsa = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        # pca: feed the leading component of the upsampled cube back as pan
        hs_samples = rng.uniform(0.1, 1.0, (4, 12, 12))
        hs = HyperCube(cube_meta(12, 4, 60.0), hs_samples.astype(np.float32))
        up = upsample_interp(np.asarray(hs.samples, np.float64), 2)
        flat = up.reshape(4, -1)
        mu = flat.mean(axis=1)
        centered = flat - mu[:, None]
        cov = (centered @ centered.T) / centered.shape[1]
        _, evecs = np.linalg.eigh(cov)
        lead = evecs[:, -1]
        if lead[np.argmax(np.abs(lead))] < 0.0:
            lead = -lead
        pan = (lead @ centered).reshape(24, 24)
        pair = FrPair(PanImage(pan_meta(24), pan.astype(np.float32)), hs)
        out = sharpen_pca(pair)
        span = up.max() - up.min()
        worst_pca = max(worst_pca, float(np.max(np.abs(out.samples - up))) / span)

        # gsa: bands proportional to one field through exact power-of-two
        # gains, pan equal to that field's interpolation; the matched pan
        # cancels the intensity and nothing is injected
        q = rng.uniform(0.2, 0.8, (12, 12)).astype(np.float32)
        gains = 2.0 ** rng.integers(-1, 3, size=4)
        hs2 = HyperCube(
            cube_meta(12, 4, 60.0),
            np.stack([g * np.asarray(q, np.float64) for g in gains]).astype(np.float32),
        )
        pan2 = upsample_interp(np.asarray(q, np.float64), 2)
        pair2 = FrPair(PanImage(pan_meta(24), pan2.astype(np.float32)), hs2)
        out2 = sharpen_gsa(pair2, SPEC2)
        up2 = upsample_interp(np.asarray(hs2.samples, np.float64), 2)
        span2 = up2.max() - up2.min()
        worst_gsa = max(worst_gsa, float(np.max(np.abs(out2.samples - up2))) / span2)

    ok = worst_pca <= 1e-5 and worst_gsa <= 1e-5
    report(5, ok, f"10 scenes; relative error pca {worst_pca:.1e}, gsa {worst_gsa:.1e}")


def test_criterion_6_pipeline_geometry():
    pan_h, pan_w = 7554, 7350
    hs_h, hs_w = 1259, 1225
    bands = 2
    rng = np.random.default_rng(2)
    pan = PanImage(
        RasterMeta(width=pan_w, height=pan_h, bands=1, gsd=5.0, wavelengths=(550.0,)),
        rng.uniform(0.1, 1.0, (pan_h, pan_w)).astype(np.float32),
    )
    hs = HyperCube(
        RasterMeta(width=hs_w, height=hs_h, bands=bands, gsd=30.0,
                   wavelengths=(500.0, 900.0)),
        rng.uniform(0.1, 1.0, (bands, hs_h, hs_w)).astype(np.float32),
    )
    rows = tile_offsets(hs_h, 384)
    cols = tile_offsets(hs_w, 384)
    tiles = tile_fr(pan, hs, hs_tile=384, pan_tile=2304)
    nine = len(tiles) == 9 and rows == [0, 384, 768] and cols == [0, 384, 768]
    shapes_ok = all(
        t.pan.meta.shape == (1, 2304, 2304) and t.hs.meta.shape == (bands, 384, 384)
        for t in tiles
    )
    trip = make_rr(tiles[0], MtfSpec.for_ratio(6))
    rr_ok = (
        trip.pan_lo.meta.shape == (1, 384, 384)
        and trip.hs_lo.meta.shape == (bands, 64, 64)
        and trip.hs_ref.meta.shape == (bands, 384, 384)
    )

    # band cleaning: grids of 1000 px make the 5% threshold exact
    def err(bands_n, bad):
        codes = np.zeros((bands_n, 25, 40), dtype=np.uint8)
        for band, count in bad.items():
            codes[band].reshape(-1)[:count] = 1
        meta = RasterMeta(width=40, height=25, bands=bands_n, gsd=30.0,
                          wavelengths=tuple(np.linspace(420.0, 900.0, bands_n)))
        return ErrorCube(meta, codes, frozenset({1}))

    scenes = [
        (err(3, {1: 50}), err(2, {})),       # band 1 exactly at 5%: removed
        (err(3, {0: 49}), err(2, {1: 500})), # band 0 under threshold; swir band 1 removed
        (err(3, {}), err(2, {})),
    ]
    mask = clean_bands(scenes, threshold=0.05)
    removed = [i for i, keep in enumerate(mask.keep) if not keep]
    clean_ok = removed == [1, 4]

    ok = nine and shapes_ok and rr_ok and clean_ok
    report(
        6,
        ok,
        f"{len(tiles)} tiles at offsets {rows}x{cols}; rr sizes "
        f"{trip.pan_lo.meta.shape[1:]}/{trip.hs_lo.meta.shape[1:]}/"
        f"{trip.hs_ref.meta.shape[1:]}; removed bands {removed}",
    )


def test_criterion_7_cli_determinism(tmp_path):
    t0 = time.monotonic()
    ds = tmp_path / "ds"
    code = subprocess.run(
        [sys.executable, "-m", "hspan", "synth", "--seed", "5", "--size", "16",
         "--bands", "6", "--ratio", "2", "--tiles", "10", "--out", str(ds)],
        capture_output=True, text=True,
    ).returncode
    assert code == 0
    outputs = []
    for workers, name in ((1, "serial.csv"), (8, "pooled.csv")):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "hspan", "eval", "--protocol", "rr",
             "--manifest", str(ds / "manifest.json"), "--method", "exp",
             "--method", "gsa", "--workers", str(workers), "--out", str(out),
             "--no-figures"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outputs.append(out.read_bytes())
    dt = time.monotonic() - t0
    ok = outputs[0] == outputs[1] and len(outputs[0]) > 0 and dt < 60.0
    report(7, ok, f"2 methods x 10 tiles, workers 1 vs 8, {dt:.1f}s; "
                  f"reports identical: {outputs[0] == outputs[1]}")


def test_criterion_8_full_corpus_not_reproducible_and_regression(tmp_path):
    print(
        "criterion 8: absolute leaderboard values for the real corpus and "
        "all deep-network rows are NOT reproducible here (they require the "
        "proprietary scenes and trained models); covered by criteria 1-7 "
        "plus this frozen regression:"
    )
    ds = tmp_path / "ds"
    write_synth_dataset(ds, seed=3, hs_size=16, bands=6, ratio=2, tiles=3, spec=SPEC2)
    from hspan.bench import MethodSpec, RunConfig, run_rr

    config = RunConfig(
        manifest=str(ds / "manifest.json"),
        protocol="rr",
        methods=(MethodSpec.builtin("exp"), MethodSpec.builtin("gsa")),
        kernel_size=9,
    )
    agg = {a.method: a.metrics for a in run_rr(config).aggregates}
    frozen = {
        "exp": {"ergas": 0.545866, "sam_deg": 1.414797, "scc": 0.666772, "q_avg": 0.827812},
        "gsa": {"ergas": 0.469896, "sam_deg": 1.240441, "scc": 0.816698, "q_avg": 0.871183},
    }
    worst = max(
        abs(agg[m][k] - v) for m, vals in frozen.items() for k, v in vals.items()
    )
    margin = agg["gsa"]["scc"] - agg["exp"]["scc"]
    ok = worst <= 1e-3 and margin >= 0.10 and agg["gsa"]["ergas"] < agg["exp"]["ergas"]
    report(8, ok, f"frozen aggregates within {worst:.1e}; structural margin {margin:.3f}")
