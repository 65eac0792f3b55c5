"""Paired-modality archives: manifests, rasters, normalization, synthetic data."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

SPLITS = ("train", "validation", "test")
EPS = 1e-6


@dataclass
class MultiModalPair:
    id: str
    img1: np.ndarray  # H x W x C1
    img2: np.ndarray  # H x W x C2
    labels: tuple[int, ...]
    split: str = "train"
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class ManifestRecord:
    id: str
    path1: Path
    path2: Path
    labels: tuple[int, ...]
    split: str
    region: str
    season: str

    def to_line(self, root: Path) -> str:
        p1 = _rel(self.path1, root)
        p2 = _rel(self.path2, root)
        labels = ",".join(map(str, self.labels))
        return "\t".join([self.id, p1, p2, labels, self.split, self.region, self.season])


def _rel(path: Path, root: Path) -> str:
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


@dataclass
class ArchiveManifest:
    records: list[ManifestRecord]
    stats: dict[str, BandStats] = field(default_factory=dict)
    root: Path = Path(".")

    def filter(self, region: str | None = None, season: str | None = None, split: str | None = None) -> "ArchiveManifest":
        keep = [
            r
            for r in self.records
            if (region is None or r.region == region)
            and (season is None or r.season == season)
            and (split is None or r.split == split)
        ]
        return ArchiveManifest(keep, self.stats, self.root)

    def split_fractions(self) -> tuple[float, ...]:
        counts = Counter(r.split for r in self.records)
        n = len(self.records)
        return tuple(counts[s] / n for s in SPLITS)

    def __len__(self) -> int:
        return len(self.records)


# -- rasters ----------------------------------------------------------------


def save_raster(path, array: np.ndarray) -> None:
    """Flat binary tensor with a self-describing (shape, dtype) header (.npy)."""
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(array), allow_pickle=False)


def load_raster(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"raster not found: {path}")
    return np.load(path, allow_pickle=False)


# -- manifest ---------------------------------------------------------------


def write_manifest(path, manifest: ArchiveManifest) -> None:
    path = Path(path)
    root = path.parent
    lines = []
    for mod in sorted(manifest.stats):
        st = manifest.stats[mod]
        lines.append(
            "#stats\t{}\t{}\t{}".format(
                mod, ",".join(repr(float(v)) for v in st.mean), ",".join(repr(float(v)) for v in st.std)
            )
        )
    lines += [r.to_line(root) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path, check_files: bool = True) -> ArchiveManifest:
    """Parse ``id, path_mod1, path_mod2, label-csv, split, region, season`` lines."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    stats: dict[str, BandStats] = {}
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#stats"):
            _, mod, mean, std = line.split("\t")
            stats[mod] = BandStats(
                np.array([float(v) for v in mean.split(",")]),
                np.array([float(v) for v in std.split(",")]),
            )
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
        rid, p1, p2, labels, split, region, season = parts
        if rid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {rid!r}")
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split tag {split!r}")
        seen.add(rid)
        rec = ManifestRecord(
            id=rid,
            path1=root / p1,
            path2=root / p2,
            labels=tuple(int(v) for v in labels.split(",") if v),
            split=split,
            region=region,
            season=season,
        )
        if not rec.labels:
            raise DataError(f"{path}:{lineno}: record {rid!r} has no labels")
        if check_files:
            for p in (rec.path1, rec.path2):
                if not p.exists():
                    raise DataError(f"{path}:{lineno}: missing file {p}")
        records.append(rec)
    return ArchiveManifest(records, stats, root)


def load_pairs(manifest: ArchiveManifest, split: str | None = None, normalize_bands: bool = True) -> list[MultiModalPair]:
    pairs = []
    for r in manifest.records:
        if split is not None and r.split != split:
            continue
        img1 = load_raster(r.path1).astype(np.float32)
        img2 = load_raster(r.path2).astype(np.float32)
        if normalize_bands and manifest.stats:
            img1 = normalize(img1, manifest.stats["S1"])
            img2 = normalize(img2, manifest.stats["S2"])
        pairs.append(
            MultiModalPair(r.id, img1, img2, r.labels, r.split, {"region": r.region, "season": r.season})
        )
    return pairs


# -- preprocessing ----------------------------------------------------------


def compute_band_stats(images) -> BandStats:
    stack = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, im.shape[-1]) for im in images])
    return BandStats(stack.mean(axis=0), stack.std(axis=0))


def normalize(image: np.ndarray, stats: BandStats) -> np.ndarray:
    """Per-band ``(x - mean) / max(std, 1e-6)``."""
    c = image.shape[-1]
    if len(stats.mean) != c or len(stats.std) != c:
        raise ShapeError(f"band stats cover {len(stats.mean)} bands, image has {c}")
    out = (image - stats.mean) / np.maximum(stats.std, EPS)
    return out.astype(image.dtype, copy=False)


def _cubic_weight(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def _resample_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = base + tap
        w = _cubic_weight(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def resample_bicubic(band: np.ndarray, factor: int) -> np.ndarray:
    """Upsample a 2-D band with separable Catmull-Rom bicubic (a = -0.5).

    Sample centres sit at half-pixel offsets; taps outside the band clamp to
    the edge.
    """
    band = np.asarray(band, dtype=np.float64)
    if band.ndim != 2 or band.size == 0:
        raise ShapeError(f"expected a non-empty 2-D band, got shape {band.shape}")
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be an integer >= 1, got {factor}")
    rows = _resample_matrix(band.shape[0], factor)
    cols = _resample_matrix(band.shape[1], factor)
    return rows @ band @ cols.T


def stack_s2_bands(bands_10m: list[np.ndarray], bands_20m: list[np.ndarray]) -> np.ndarray:
    """Stack 10 m bands with 20 m bands upsampled x2 into one ``H x W x C`` image."""
    up = [resample_bicubic(b, 2) for b in bands_20m]
    return np.stack([np.asarray(b, dtype=np.float64) for b in bands_10m] + up, axis=-1)


# -- splitting --------------------------------------------------------------


def split(records: list, fractions=(0.52, 0.24, 0.24), seed: int = 0, names=SPLITS) -> list[str]:
    """Seeded shuffle then contiguous partition. Returns one tag per input record.

    Sizes use the largest-remainder rule, so each differs from its exact
    share by less than one record.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(names) or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"invalid split fractions {fractions}")
    n = len(records)
    exact = [f * n for f in fractions]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    tags = [""] * n
    start = 0
    for name, size in zip(names, sizes):
        for j in perm[start : start + size]:
            tags[j] = name
        start += size
    return tags


# -- synthetic archive --------------------------------------------------------

_SIGNATURE_SEED = 20240601


def _signatures(n_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed class signatures shared by every synthetic archive."""
    rng = np.random.default_rng(_SIGNATURE_SEED)
    sar = rng.uniform(-1.5, 1.5, size=(n_classes, 2))
    texture = rng.uniform(0.5, 3.0, size=n_classes)
    spectra = rng.uniform(-1.5, 1.5, size=(n_classes, 10))
    return sar, texture, spectra


def generate_synthetic(
    n_pairs: int,
    image_side: int = 32,
    n_classes: int = 6,
    seed: int = 0,
    region_side: int | None = None,
    max_labels: int = 3,
    noise: float = 0.3,
    id_prefix: str = "syn",
) -> list[MultiModalPair]:
    """Seeded paired archive built from shared latent class maps.

    Each pair draws 1..``max_labels`` classes and paints them onto a coarse
    region grid. Modality 1 (2 bands, SAR-like) renders each class as a
    backscatter pair with class-specific oscillating texture and multiplicative
    speckle; modality 2 (10 bands) renders a class spectrum with a smooth
    illumination gradient and additive noise. Both modalities therefore share
    the label set but not the pixel statistics.
    """
    if n_pairs < 1 or n_classes < 2 or image_side < 2:
        raise ValueError("need n_pairs >= 1, n_classes >= 2, image_side >= 2")
    region_side = region_side or max(1, image_side // 4)
    if image_side % region_side:
        raise ValueError(f"region_side {region_side} must divide image_side {image_side}")
    g = image_side // region_side
    max_labels = min(max_labels, n_classes, g * g)
    rng = np.random.default_rng(seed)
    sar, texture, spectra = _signatures(n_classes)

    while True:
        label_sets = [
            np.sort(rng.choice(n_classes, size=rng.integers(1, max_labels + 1), replace=False))
            for _ in range(n_pairs)
        ]
        if n_pairs < n_classes or len(set(np.concatenate(label_sets))) == n_classes:
            break

    yy, xx = np.mgrid[0:image_side, 0:image_side] / image_side
    pairs = []
    for i, labels in enumerate(label_sets):
        cells = np.concatenate([labels, rng.choice(labels, size=g * g - len(labels))])
        rng.shuffle(cells)
        cmap = np.kron(cells.reshape(g, g), np.ones((region_side, region_side), dtype=int))

        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * texture[cmap] * (xx + yy) * 4 + phase)
        speckle = rng.gamma(4.0, 0.25, size=(image_side, image_side, 2))
        img1 = (sar[cmap] + 0.4 * wave[..., None]) * speckle

        tilt = rng.uniform(-0.5, 0.5, size=2)
        light = 1.0 + tilt[0] * (xx - 0.5) + tilt[1] * (yy - 0.5)
        img2 = spectra[cmap] * light[..., None] + noise * rng.standard_normal((image_side, image_side, 10))

        pairs.append(
            MultiModalPair(
                id=f"{id_prefix}{i:05d}",
                img1=img1.astype(np.float32),
                img2=img2.astype(np.float32),
                labels=tuple(int(v) for v in labels),
                metadata={"region": "synthetic", "season": ("summer", "autumn")[i % 2]},
            )
        )
    return pairs


def write_dataset(pairs: list[MultiModalPair], out_dir, manifest_name: str = "manifest.tsv") -> Path:
    """Write rasters plus a manifest whose band stats come from the train split."""
    out_dir = Path(out_dir)
    (out_dir / "rasters").mkdir(parents=True, exist_ok=True)
    records = []
    for p in pairs:
        p1 = out_dir / "rasters" / f"{p.id}_S1.npy"
        p2 = out_dir / "rasters" / f"{p.id}_S2.npy"
        save_raster(p1, p.img1)
        save_raster(p2, p.img2)
        records.append(
            ManifestRecord(
                p.id, p1, p2, p.labels, p.split, p.metadata.get("region", ""), p.metadata.get("season", "")
            )
        )
    train = [p for p in pairs if p.split == "train"] or pairs
    stats = {
        "S1": compute_band_stats([p.img1 for p in train]),
        "S2": compute_band_stats([p.img2 for p in train]),
    }
    path = out_dir / manifest_name
    write_manifest(path, ArchiveManifest(records, stats, out_dir))
    return path
