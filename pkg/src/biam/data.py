"""File formats and dataset plumbing.

Three portable formats, little-endian throughout:

* feature store "BRF1": magic, u32 version, u32 N, u32 h/w/d_r/d_g header
  (28 bytes), then per record a u32 id byte length, the UTF-8 id, h*w*d_r
  float32 region values and d_g float32 global values;
* attribute embeddings: text, one class per line, ``name v1 .. v_da``
  (spaces in class names become underscores on disk);
* dataset manifest: JSON with class lists, labels and file paths.

Also houses the seeded synthetic dataset generator used for desk-scale
verification: class patterns are planted as additive patches in region
features, and unseen-class embeddings are convex combinations of seen ones so
a linear compatibility map learned on seen classes transfers.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, FormatError
from .head import AttributeMatrix
from .train import LabelSet

STORE_MAGIC = b"BRF1"
STORE_VERSION = 1
HEADER_BYTES = 28  # magic + version + N + h + w + d_r + d_g


@dataclass
class FeatureRecord:
    """One image's region grid x_r (h, w, d_r) and global vector x_g (d_g,)."""

    image_id: str
    x_r: np.ndarray
    x_g: np.ndarray


def write_feature_store(records: list[FeatureRecord], path) -> None:
    if not records:
        shape = (0, 0, 0, 0)
    else:
        first = records[0]
        if first.x_r.ndim != 3 or first.x_g.ndim != 1:
            raise FormatError(
                f"record {first.image_id!r}: x_r must be rank 3 and x_g rank 1"
            )
        shape = (*first.x_r.shape, first.x_g.shape[0])
        for rec in records:
            if rec.x_r.shape != first.x_r.shape or rec.x_g.shape != first.x_g.shape:
                raise FormatError(
                    f"record {rec.image_id!r} shape differs from the first record"
                )
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(struct.pack("<2I", STORE_VERSION, len(records)))
        f.write(struct.pack("<4I", *shape))
        for rec in records:
            ident = rec.image_id.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(np.ascontiguousarray(rec.x_r, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(rec.x_g, dtype="<f4").tobytes())


def read_feature_store(path) -> list[FeatureRecord]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER_BYTES:
        raise FormatError("file shorter than the store header", offset=len(data))
    if data[:4] != STORE_MAGIC:
        raise FormatError(f"bad store magic {data[:4]!r}", offset=0)
    version, count = struct.unpack_from("<2I", data, 4)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}", offset=4)
    h, w, d_r, d_g = struct.unpack_from("<4I", data, 12)
    offset = HEADER_BYTES
    region_bytes = 4 * h * w * d_r
    global_bytes = 4 * d_g
    records = []
    for _ in range(count):
        if offset + 4 > len(data):
            raise FormatError("truncated record id length", offset=offset)
        (id_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + id_len > len(data):
            raise FormatError("truncated record id", offset=offset)
        image_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        if offset + region_bytes + global_bytes > len(data):
            raise FormatError(
                f"truncated features of record {image_id!r}", offset=offset
            )
        x_r = np.frombuffer(data[offset : offset + region_bytes], dtype="<f4")
        x_r = x_r.reshape(h, w, d_r).copy()
        offset += region_bytes
        x_g = np.frombuffer(data[offset : offset + global_bytes], dtype="<f4").copy()
        offset += global_bytes
        records.append(FeatureRecord(image_id, x_r, x_g))
    if offset != len(data):
        raise FormatError(
            f"{len(data) - offset} trailing bytes after last record", offset=offset
        )
    return records


def store_header(path) -> tuple[int, int, int, int, int]:
    """(N, h, w, d_r, d_g) without loading the payload."""
    with open(path, "rb") as f:
        data = f.read(HEADER_BYTES)
    if len(data) < HEADER_BYTES:
        raise FormatError("file shorter than the store header", offset=len(data))
    if data[:4] != STORE_MAGIC:
        raise FormatError(f"bad store magic {data[:4]!r}", offset=0)
    version, count = struct.unpack_from("<2I", data, 4)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}", offset=4)
    h, w, d_r, d_g = struct.unpack_from("<4I", data, 12)
    return count, h, w, d_r, d_g


# ---------------------------------------------------------------------------
# attribute embeddings (text)
# ---------------------------------------------------------------------------

def _disk_name(name: str) -> str:
    return name.replace(" ", "_")


def write_embeddings(path, names: list[str], rows: np.ndarray) -> None:
    """Raw (unnormalized) vectors; one class per line."""
    with open(path, "w", encoding="utf-8") as f:
        for name, row in zip(names, rows):
            values = " ".join(repr(float(v)) for v in row)
            f.write(f"{_disk_name(name)} {values}\n")


def load_embeddings(path, expected_names: list[str]) -> AttributeMatrix:
    """Parse, reorder to ``expected_names``, and L2-normalize rows."""
    table: dict[str, np.ndarray] = {}
    d_a = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            name = fields[0]
            if name in table:
                raise FormatError(f"duplicate class {name!r} on line {lineno}")
            try:
                vec = np.array([float(v) for v in fields[1:]], dtype=np.float32)
            except ValueError as exc:
                raise FormatError(f"bad number on line {lineno}: {exc}") from exc
            if d_a is None:
                d_a = vec.shape[0]
                if d_a == 0:
                    raise FormatError(f"no values on line {lineno}")
            elif vec.shape[0] != d_a:
                raise FormatError(
                    f"line {lineno} has {vec.shape[0]} values, expected {d_a}"
                )
            table[name] = vec
    missing = [n for n in expected_names if _disk_name(n) not in table]
    if missing:
        raise DatasetError(f"embeddings missing classes: {missing}")
    rows = np.stack([table[_disk_name(n)] for n in expected_names])
    return AttributeMatrix.from_raw(list(expected_names), rows)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Class lists, image labels (global indices: seen first, then unseen),
    per-image split tags, and the file paths the dataset was generated from."""

    seen_classes: list[str]
    unseen_classes: list[str]
    labels: dict[str, list[int]]
    features_path: str
    embeddings_path: str
    splits: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.seen_classes) & set(self.unseen_classes)
        if overlap:
            raise DatasetError(f"classes both seen and unseen: {sorted(overlap)}")
        total = len(self.seen_classes) + len(self.unseen_classes)
        for image_id, idxs in self.labels.items():
            for idx in idxs:
                if not 0 <= idx < total:
                    raise DatasetError(
                        f"image {image_id!r} has label index {idx} "
                        f"outside [0, {total})"
                    )

    @property
    def all_classes(self) -> list[str]:
        return self.seen_classes + self.unseen_classes

    def split_of(self, image_id: str) -> str:
        return self.splits.get(image_id, "train")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        try:
            return cls(
                seen_classes=list(raw["seen_classes"]),
                unseen_classes=list(raw["unseen_classes"]),
                labels={k: list(map(int, v)) for k, v in raw["labels"].items()},
                features_path=raw["features_path"],
                embeddings_path=raw["embeddings_path"],
                splits={k: str(v) for k, v in raw.get("splits", {}).items()},
            )
        except KeyError as exc:
            raise FormatError(f"manifest missing field {exc}") from exc

    def validate_against(self, records: list[FeatureRecord]) -> None:
        ids = {r.image_id for r in records}
        missing = sorted(set(self.labels) - ids)
        if missing:
            raise DatasetError(f"labeled images missing from store: {missing[:10]}")

    def label_set(self, image_id: str, mode: str) -> LabelSet:
        """Labels restricted/remapped to the class space of ``mode``."""
        s = len(self.seen_classes)
        u = len(self.unseen_classes)
        idxs = self.labels.get(image_id, [])
        if mode in ("seen", "standard"):
            return LabelSet.of([i for i in idxs if i < s], s)
        if mode == "zsl":
            return LabelSet.of([i - s for i in idxs if i >= s], u)
        if mode == "gzsl":
            return LabelSet.of(idxs, s + u)
        raise ConfigError(f"unknown label mode {mode!r}")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale dataset geometry; defaults are the checked-in fixture."""

    images: int = 512
    seen: int = 20
    unseen: int = 5
    h: int = 7
    w: int = 7
    d_r: int = 32
    d_g: int = 64
    d_a: int = 16
    strength: float = 1.0
    label_rate: float = 0.15
    seed: int = 7
    patch_min: int = 3
    patch_max: int = 4
    # per-patch intensity multiplier ~ U(1-jitter, 1+jitter): keeps the
    # pattern-to-score response monotone instead of thresholded
    intensity_jitter: float = 0.4
    # chance that two positives share one convex-mixture patch, which makes
    # component responses to mixtures supervised rather than free
    shared_patch_rate: float = 0.3

    def __post_init__(self):
        for name in ("images", "seen", "unseen", "h", "w", "d_r", "d_g", "d_a"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synthetic spec field {name} must be positive")
        if not 0.0 < self.label_rate < 1.0:
            raise ConfigError("label_rate must be in (0, 1)")
        if self.strength < 0:
            raise ConfigError("pattern strength must be >= 0")
        if not 1 <= self.patch_min <= self.patch_max:
            raise ConfigError("patch sides must satisfy 1 <= patch_min <= patch_max")
        if not 0.0 <= self.intensity_jitter < 1.0:
            raise ConfigError("intensity_jitter must be in [0, 1)")
        if not 0.0 <= self.shared_patch_rate <= 1.0:
            raise ConfigError("shared_patch_rate must be in [0, 1]")


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[list[FeatureRecord], DatasetManifest, dict[str, np.ndarray]]:
    """Seed-deterministic records, manifest and raw embedding rows.

    Seen-class embeddings are random unit vectors; each unseen embedding is a
    normalized convex combination of two seen ones.  Every positive class
    plants ``strength`` times its embedding (lifted to d_r by one fixed random
    matrix) onto a random contiguous patch of x_r; x_g is the region mean plus
    noise, lifted to d_g.  All noise is Gaussian(0, 0.1).
    """
    rng = np.random.default_rng(spec.seed)
    seen_names = [f"seen{idx:02d}" for idx in range(spec.seen)]
    unseen_names = [f"unseen{idx:02d}" for idx in range(spec.unseen)]

    # random unit vectors, resampled toward low mutual coherence so that
    # class cross-talk does not dominate the planted signal
    max_cos = 0.35 if spec.seen <= 1.25 * spec.d_a else 0.5
    seen_rows = np.zeros((spec.seen, spec.d_a))
    for idx in range(spec.seen):
        for _ in range(500):
            v = rng.normal(size=spec.d_a)
            v /= np.linalg.norm(v)
            if idx == 0 or np.abs(seen_rows[:idx] @ v).max() <= max_cos:
                break
        seen_rows[idx] = v
    unseen_rows = np.empty((spec.unseen, spec.d_a))
    used_components: set[int] = set()
    for idx in range(spec.unseen):
        # components with non-negative correlation keep the mixture norm high
        # enough that the mixture class outranks either component; disjoint
        # component pairs keep the unseen classes distinguishable
        for attempt in range(500):
            a, b = (int(v) for v in rng.choice(spec.seen, size=2, replace=False))
            fresh = a not in used_components and b not in used_components
            if (fresh or attempt > 250) and seen_rows[a] @ seen_rows[b] >= 0.0:
                break
        used_components.update((a, b))
        lam = rng.uniform(0.45, 0.55)
        mix = lam * seen_rows[a] + (1.0 - lam) * seen_rows[b]
        unseen_rows[idx] = mix / np.linalg.norm(mix)
    all_rows = np.concatenate([seen_rows, unseen_rows])
    all_names = seen_names + unseen_names

    lift_r = rng.normal(0.0, 1.0 / np.sqrt(spec.d_a), size=(spec.d_a, spec.d_r))
    lift_g = rng.normal(0.0, 1.0 / np.sqrt(spec.d_r), size=(spec.d_r, spec.d_g))
    patterns = all_rows @ lift_r  # (classes, d_r)

    total = spec.seen + spec.unseen
    lo_h, hi_h = min(spec.patch_min, spec.h), min(spec.patch_max, spec.h)
    lo_w, hi_w = min(spec.patch_min, spec.w), min(spec.patch_max, spec.w)
    records = []
    labels: dict[str, list[int]] = {}
    for n in range(spec.images):
        image_id = f"img{n:05d}"
        n_pos = max(1, round(spec.label_rate * total)); positives = np.sort(rng.choice(total, size=n_pos, replace=False))
        x_r = rng.normal(0.0, 0.1, size=(spec.h, spec.w, spec.d_r))
        occupied = np.zeros((spec.h, spec.w), dtype=bool)

        def place_patch(pattern):
            # prefer a spot disjoint from earlier patches so patterns
            # do not stack
            for _ in range(30):
                ph = int(rng.integers(lo_h, hi_h + 1))
                pw = int(rng.integers(lo_w, hi_w + 1))
                top = int(rng.integers(0, spec.h - ph + 1))
                left = int(rng.integers(0, spec.w - pw + 1))
                if not occupied[top : top + ph, left : left + pw].any():
                    break
            occupied[top : top + ph, left : left + pw] = True
            gain = spec.strength * (
                1.0 + spec.intensity_jitter * rng.uniform(-1.0, 1.0)
            )
            x_r[top : top + ph, left : left + pw, :] += gain * pattern

        queue = list(rng.permutation(positives))
        while queue:
            if len(queue) >= 2 and rng.random() < spec.shared_patch_rate:
                a, b = queue.pop(), queue.pop()
                lam = rng.uniform(0.45, 0.55)
                mix = lam * all_rows[a] + (1.0 - lam) * all_rows[b]
                place_patch((mix / np.linalg.norm(mix)) @ lift_r)
            else:
                place_patch(patterns[queue.pop()])
        core = x_r.mean(axis=(0, 1)) + rng.normal(0.0, 0.1, size=spec.d_r)
        x_g = core @ lift_g
        records.append(
            FeatureRecord(
                image_id,
                x_r.astype(np.float32),
                x_g.astype(np.float32),
            )
        )
        labels[image_id] = [int(c) for c in positives]

    manifest = DatasetManifest(
        seen_classes=seen_names,
        unseen_classes=unseen_names,
        labels=labels,
        features_path="features.brf",
        embeddings_path="embeddings.txt",
        split="synthetic",
    )
    embeddings = {
        name: all_rows[idx].astype(np.float32) for idx, name in enumerate(all_names)
    }
    return records, manifest, embeddings


def save_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write features.brf, embeddings.txt and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, manifest, embeddings = generate_synthetic(spec)
    write_feature_store(records, out / "features.brf")
    names = manifest.all_classes
    write_embeddings(out / "embeddings.txt", names, np.stack([embeddings[n] for n in names]))
    manifest.save(out / "manifest.json")
    return out / "manifest.json"


def load_dataset(manifest_path) -> tuple[DatasetManifest, list[FeatureRecord]]:
    """Load manifest plus its feature store; paths resolve next to the manifest."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    records = read_feature_store(resolve_features_path(manifest_path, manifest))
    manifest.validate_against(records)
    return manifest, records


def resolve_embeddings_path(manifest_path, manifest: DatasetManifest) -> Path:
    path = Path(manifest.embeddings_path)
    if not path.is_absolute():
        path = Path(manifest_path).parent / path
    return path


def resolve_features_path(manifest_path, manifest: DatasetManifest) -> Path:
    path = Path(manifest.features_path)
    if not path.is_absolute():
        path = Path(manifest_path).parent / path
    return path
