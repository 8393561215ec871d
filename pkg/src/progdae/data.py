"""Dataset IO: flat volume codec, cohort manifests, external ingestion.

Volumes are stored as a one-line ASCII header "H W D dtype" followed by the
raw little-endian voxel payload in C order.  2-D images are volumes with
D = 1; displacement fields use D = 2 (row and column components).  The
manifest is a CSV with one row per visit; paths are relative to the
manifest's directory.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .phantom import (
    REGIONS,
    CohortConfig,
    LongitudinalSample,
    PhantomCohort,
    ProgressionRates,
    SwapPair,
    render_phantom,
)

__all__ = [
    "write_flat_volume",
    "read_flat_volume",
    "write_cohort",
    "Dataset",
    "load_dataset",
    "load_external_volume",
]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

MANIFEST_COLUMNS = (
    "subject_id",
    "split",
    "diagnosis",
    "age",
    "image_path",
    "mask_paths",
    "field_path",
)


def write_flat_volume(path: str, array: np.ndarray, dtype: str = "f32") -> None:
    """Write an (H, W) or (H, W, D) array in the flat header+payload format."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"expected 2-D or 3-D array, got shape {array.shape}")
    h, w, d = array.shape
    header = f"{h} {w} {d} {dtype}\n".encode("ascii")
    payload = np.ascontiguousarray(array.astype(_DTYPES[dtype], copy=False))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_flat_volume(path: str) -> np.ndarray:
    """Read a flat volume, returning an (H, W, D) array.

    Raises ValueError naming the byte offset for malformed headers and the
    expected vs actual payload size for truncated or oversized files.
    """
    with open(path, "rb") as fh:
        header = fh.readline(256)
        if not header.endswith(b"\n"):
            raise ValueError(
                f"{path}: missing newline-terminated header within the first "
                f"{len(header)} bytes"
            )
        parts = header.decode("ascii", errors="replace").split()
        if len(parts) != 4:
            raise ValueError(
                f"{path}: header must be 'H W D dtype', got {header!r} "
                f"(byte offset 0)"
            )
        try:
            h, w, d = (int(p) for p in parts[:3])
        except ValueError as exc:
            raise ValueError(
                f"{path}: non-integer dimensions in header {header!r}"
            ) from exc
        if min(h, w, d) <= 0:
            raise ValueError(f"{path}: dimensions must be positive, got {h} {w} {d}")
        dtype_name = parts[3]
        if dtype_name not in _DTYPES:
            raise ValueError(
                f"{path}: unknown dtype {dtype_name!r}, expected one of {sorted(_DTYPES)}"
            )
        dtype = _DTYPES[dtype_name]
        expected = h * w * d * dtype.itemsize
        payload = fh.read()
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload size mismatch at byte offset {len(header)}: "
            f"expected {expected} bytes for {h}x{w}x{d} {dtype_name}, "
            f"got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(h, w, d).copy()


def _mask_paths_cell(entries: dict[str, str]) -> str:
    return ";".join(f"{region}:{entries[region]}" for region in REGIONS)


def _parse_mask_paths(cell: str) -> dict[str, str]:
    out: dict[str, str] = {}
    if not cell:
        return out
    for item in cell.split(";"):
        region, _, rel = item.partition(":")
        if not rel:
            raise ValueError(f"malformed mask_paths cell {cell!r}")
        out[region] = rel
    return out


def write_cohort(
    cohort: PhantomCohort,
    out_dir: str,
    *,
    image_size: int = 64,
    rates: ProgressionRates | None = None,
) -> str:
    """Render every visit and persist images, masks, fields, and manifests.

    Returns the manifest path.  Layout under out_dir: volumes/ holds the
    flat files, manifest.csv indexes them, swap_pairs.csv lists the
    latent-swap pairing, cohort.json records generation parameters.
    """
    vol_dir = os.path.join(out_dir, "volumes")
    os.makedirs(vol_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    rows = []
    for visit in cohort.visits:
        subject = cohort.subjects[visit.subject_id]
        sample = render_phantom(
            subject, visit.age, rates=rates, image_size=image_size
        )
        stem = f"{visit.subject_id}_a{visit.age:05.1f}".replace(".", "p")
        image_rel = os.path.join("volumes", stem + ".bin")
        write_flat_volume(os.path.join(out_dir, image_rel), sample.image, "f32")
        mask_rels: dict[str, str] = {}
        for region in REGIONS:
            rel = os.path.join("volumes", f"{stem}_mask_{region}.bin")
            write_flat_volume(
                os.path.join(out_dir, rel),
                sample.masks[region].astype(np.uint8),
                "u8",
            )
            mask_rels[region] = rel
        field_rel = ""
        if visit.age_gap > 0:
            field_rel = os.path.join("volumes", stem + "_field.bin")
            write_flat_volume(os.path.join(out_dir, field_rel), sample.displacement, "f32")
        rows.append(
            {
                "subject_id": visit.subject_id,
                "split": visit.split,
                "diagnosis": visit.diagnosis,
                "age": f"{visit.age:.1f}",
                "image_path": image_rel,
                "mask_paths": _mask_paths_cell(mask_rels),
                "field_path": field_rel,
            }
        )
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out_dir, "swap_pairs.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["pair_id", "ad_subject", "ad_age", "ad_gap", "cn_subject", "cn_age", "cn_gap"]
        )
        for pair in cohort.swap_pairs:
            writer.writerow(
                [
                    pair.pair_id,
                    pair.ad_subject,
                    f"{pair.ad_age:.1f}",
                    f"{pair.ad_gap:.1f}",
                    pair.cn_subject,
                    f"{pair.cn_age:.1f}",
                    f"{pair.cn_gap:.1f}",
                ]
            )
    config = cohort.config
    with open(os.path.join(out_dir, "cohort.json"), "w") as fh:
        json.dump(
            {
                "image_size": image_size,
                "seed": config.seed,
                "train_counts": list(config.train_counts),
                "test_counts": list(config.test_counts),
                "age_range": list(config.age_range),
                "gap_mean": config.gap_mean,
                "gap_std": config.gap_std,
                "followups_per_subject": config.followups_per_subject,
            },
            fh,
            indent=2,
        )
    return manifest_path


@dataclass(frozen=True)
class VisitData:
    """One manifest row loaded into memory."""

    subject_id: str
    split: str
    diagnosis: str
    age: float
    age_gap: float
    image: np.ndarray
    masks: dict[str, np.ndarray]
    displacement: np.ndarray | None


@dataclass(frozen=True)
class Dataset:
    root: str
    visits: list[VisitData]
    swap_pairs: list[SwapPair]

    def split(self, name: str) -> list[VisitData]:
        return [v for v in self.visits if v.split == name]

    def baselines(self, split: str | None = None) -> list[VisitData]:
        out = [v for v in self.visits if v.age_gap == 0.0]
        if split is not None:
            out = [v for v in out if v.split == split]
        return out

    def followups(self, subject_id: str) -> list[VisitData]:
        return sorted(
            (v for v in self.visits if v.subject_id == subject_id and v.age_gap > 0),
            key=lambda v: v.age,
        )

    def visit(self, subject_id: str, *, baseline: bool = True) -> VisitData:
        pool = [v for v in self.visits if v.subject_id == subject_id]
        if not pool:
            raise KeyError(f"unknown subject {subject_id!r}")
        pool.sort(key=lambda v: v.age)
        return pool[0] if baseline else pool[-1]


def load_dataset(root: str) -> Dataset:
    """Load a written cohort directory back into memory.

    Age gaps are derived per subject as age minus the subject's earliest
    visit age, so the manifest itself stays at the documented column set.
    """
    manifest_path = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no manifest.csv under {root}")
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise ValueError(
                f"{manifest_path}: expected columns {MANIFEST_COLUMNS}, "
                f"got {reader.fieldnames}"
            )
        rows = list(reader)
    baseline_age: dict[str, float] = {}
    for row in rows:
        age = float(row["age"])
        sid = row["subject_id"]
        baseline_age[sid] = min(age, baseline_age.get(sid, age))
    visits = []
    for row in rows:
        image = read_flat_volume(os.path.join(root, row["image_path"]))[:, :, 0]
        masks = {
            region: read_flat_volume(os.path.join(root, rel))[:, :, 0].astype(bool)
            for region, rel in _parse_mask_paths(row["mask_paths"]).items()
        }
        displacement = None
        if row["field_path"]:
            displacement = read_flat_volume(os.path.join(root, row["field_path"]))
        age = float(row["age"])
        visits.append(
            VisitData(
                subject_id=row["subject_id"],
                split=row["split"],
                diagnosis=row["diagnosis"],
                age=age,
                age_gap=round(age - baseline_age[row["subject_id"]], 6),
                image=image.astype(np.float32),
                masks=masks,
                displacement=displacement,
            )
        )
    swap_pairs = []
    swap_path = os.path.join(root, "swap_pairs.csv")
    if os.path.exists(swap_path):
        with open(swap_path, newline="") as fh:
            for row in csv.DictReader(fh):
                swap_pairs.append(
                    SwapPair(
                        pair_id=row["pair_id"],
                        ad_subject=row["ad_subject"],
                        ad_age=float(row["ad_age"]),
                        ad_gap=float(row["ad_gap"]),
                        cn_subject=row["cn_subject"],
                        cn_age=float(row["cn_age"]),
                        cn_gap=float(row["cn_gap"]),
                    )
                )
    return Dataset(root=root, visits=visits, swap_pairs=swap_pairs)


def load_external_volume(
    path: str,
    meta: dict[str, str],
    *,
    slice_indices: list[int] | None = None,
    segmenter=None,
) -> list[LongitudinalSample]:
    """Ingest an externally supplied volume as axial 2-D samples.

    meta must carry subject_id, age, and diagnosis (a manifest-style row).
    Slices are taken along the depth axis at slice_indices (default: the
    middle slice).  Masks are absent unless a segmenter callable mapping
    image -> {region: bool mask} is supplied.  Intensities are expected to
    be pre-normalized to [0, 1].
    """
    for key in ("subject_id", "age", "diagnosis"):
        if key not in meta:
            raise ValueError(f"metadata row missing required key {key!r}")
    volume = read_flat_volume(path)
    depth = volume.shape[2]
    if slice_indices is None:
        slice_indices = [depth // 2]
    samples = []
    for idx in slice_indices:
        if not 0 <= idx < depth:
            raise IndexError(f"slice index {idx} outside [0, {depth})")
        image = np.ascontiguousarray(volume[:, :, idx], dtype=np.float32)
        masks = segmenter(image) if segmenter is not None else {}
        samples.append(
            LongitudinalSample(
                subject_id=str(meta["subject_id"]),
                diagnosis=str(meta["diagnosis"]),
                age=float(meta["age"]),
                age_gap=0.0,
                image=image,
                masks=masks,
                displacement=np.zeros(image.shape + (2,), dtype=np.float32),
            )
        )
    return samples
