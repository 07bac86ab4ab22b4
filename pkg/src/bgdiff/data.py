"""Product-background corpus: record schema, manifest I/O, validation, synthesis, pairing.

A manifest is a JSON document::

    {
      "version": 1,
      "image_size": 32,
      "categories": [{"id": 0, "name": "laptop", "style": {...}}, ...],
      "records": [{"record_id": "c0_b1_0003", "image_path": "images/c0_b1_0003.png",
                   "mask_path": "masks/c0_b1_0003.png", "category_id": 0, "family": "c0_b1"}, ...],
      "splits": {"train": [...], "eval_bg1k": [...], "eval_pairs": [...]},
      "pairs": [{"product_record_id": ..., "reference_record_id": ...}, ...],
      "synth_config": {...}
    }

Paths are relative to the manifest file. Images are RGB PNGs, masks 1-bit PNGs.
"""

import colorsys
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ManifestError

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MAX_PRODUCT_FRACTION = 0.8
SPLITS = ("train", "eval_bg1k", "eval_pairs")

CATEGORY_NAMES = ("laptop", "rice_cooker", "refrigerator", "sneaker", "perfume", "headphones", "camera", "teapot")
TEXTURES = ("gradient", "stripes", "blobs")
SHAPES = ("ellipse", "rectangle", "polygon")


@dataclass
class AdRecord:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    mask: np.ndarray  # H x W in {0, 1}
    category_id: int
    record_id: str
    family: str = ""


@dataclass
class ValidationReport:
    record_id: str
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class PairRecord:
    product_record_id: str
    reference_record_id: str


@dataclass
class DatasetManifest:
    categories: list
    records: list
    splits: dict
    root: Path = Path(".")
    version: int = MANIFEST_VERSION
    image_size: int = 32
    pairs: list = field(default_factory=list)
    synth_config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {r["record_id"]: r for r in self.records}

    @property
    def category_names(self):
        return [c["name"] for c in sorted(self.categories, key=lambda c: c["id"])]

    def record_meta(self, record_id):
        return self._by_id[record_id]

    def split(self, name):
        return list(self.splits.get(name, []))

    def load_record(self, record_id) -> AdRecord:
        meta = self._by_id[record_id]
        return AdRecord(
            image=read_image(self.root / meta["image_path"]),
            mask=read_mask(self.root / meta["mask_path"]),
            category_id=int(meta["category_id"]),
            record_id=record_id,
            family=meta.get("family", ""),
        )

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "image_size": self.image_size,
            "categories": self.categories,
            "records": self.records,
            "splits": self.splits,
            "pairs": self.pairs,
            "synth_config": self.synth_config,
        }


# ---------------------------------------------------------------- file formats

def write_image(path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.asarray(mask).astype(bool)).convert("1").save(path, format="PNG", optimize=False)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float32)


# ---------------------------------------------------------------- validation

def validate_record(record: AdRecord, num_categories: int | None = None) -> ValidationReport:
    """Check a record's content. Never raises on bad content; lists violations instead."""
    rep = ValidationReport(record.record_id)
    img = np.asarray(record.image)
    mask = np.asarray(record.mask)
    if img.ndim != 3 or img.shape[-1] != 3:
        rep.violations.append(f"image must be HxWx3, got {img.shape}")
    elif img.min() < 0 or img.max() > 1 or not np.isfinite(img).all():
        rep.violations.append("image values outside [0, 1]")
    if not np.isin(mask, (0, 1)).all():
        rep.violations.append("non-binary mask")
    if img.ndim >= 2 and mask.shape != img.shape[:2]:
        rep.violations.append(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    area = float((mask >= 0.5).mean()) if mask.size else 0.0
    if not 0.0 < area < MAX_PRODUCT_FRACTION:
        rep.violations.append(f"degenerate product area ({area:.3f} of pixels)")
    if num_categories is not None and not 0 <= record.category_id < num_categories:
        rep.violations.append(f"unregistered category {record.category_id}")
    return rep


def validate_record_files(manifest: DatasetManifest, record_id: str) -> ValidationReport:
    try:
        rec = manifest.load_record(record_id)
    except OSError as exc:
        raise OSError(f"cannot read files for record {record_id}: {exc}") from exc
    return validate_record(rec, len(manifest.categories))


# ---------------------------------------------------------------- manifest I/O

def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("version", "categories", "records", "splits"):
        if key not in raw:
            raise ManifestError(f"{path}: missing key {key!r}")
    if raw["version"] != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {raw['version']}")
    cat_ids = [c["id"] for c in raw["categories"]]
    if sorted(cat_ids) != list(range(len(cat_ids))):
        raise ManifestError("category ids must be 0..K-1")
    root = path.parent
    seen = set()
    for rec in raw["records"]:
        rid = rec.get("record_id")
        if rid in seen:
            raise ManifestError(f"duplicate record_id {rid!r}")
        seen.add(rid)
        if rec.get("category_id") not in cat_ids:
            raise ManifestError(f"record {rid!r} references unknown category {rec.get('category_id')!r}")
        if check_files:
            for key in ("image_path", "mask_path"):
                if not (root / rec[key]).is_file():
                    raise ManifestError(f"record {rid!r}: {key} {rec[key]!r} does not exist")
    for split, ids in raw["splits"].items():
        for rid in ids:
            if rid not in seen:
                raise ManifestError(f"split {split!r} references unknown record {rid!r}")
    for pair in raw.get("pairs", []):
        for key in ("product_record_id", "reference_record_id"):
            if pair[key] not in seen:
                raise ManifestError(f"pair references unknown record {pair[key]!r}")
    records = sorted(raw["records"], key=lambda r: r["record_id"])
    return DatasetManifest(
        categories=sorted(raw["categories"], key=lambda c: c["id"]),
        records=records,
        splits={k: list(v) for k, v in raw["splits"].items()},
        root=root,
        version=raw["version"],
        image_size=raw.get("image_size", 32),
        pairs=raw.get("pairs", []),
        synth_config=raw.get("synth_config", {}),
    )


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthConfig:
    num_categories: int = 3
    records_per_category: int = 200
    image_size: int = 32
    seed: int = 0
    brands_per_category: int = 2
    brand_hue_offset: float = 0.06
    # probability that a product uses its category's preferred shape
    shape_affinity: float = 0.5
    split_fractions: tuple = (0.6, 0.15, 0.25)

    def validate(self):
        if self.num_categories < 2:
            raise ConfigurationError("num_categories must be >= 2")
        if self.records_per_category < 2 * self.brands_per_category:
            raise ConfigurationError("records_per_category too small for the brand split")
        if self.image_size < 16 or self.image_size & (self.image_size - 1):
            raise ConfigurationError("image_size must be a power of two >= 16")
        if self.brands_per_category < 1:
            raise ConfigurationError("brands_per_category must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ConfigurationError("split_fractions must be three numbers summing to 1")
        if not 0 <= self.shape_affinity <= 1:
            raise ConfigurationError("shape_affinity must be in [0, 1]")


def category_styles(cfg: SynthConfig) -> list:
    """Per-category style parameters; hues are spread evenly round the colour wheel."""
    styles = []
    for k in range(cfg.num_categories):
        name = CATEGORY_NAMES[k] if k < len(CATEGORY_NAMES) else f"category_{k}"
        half = (cfg.brands_per_category - 1) / 2
        styles.append({
            "id": k,
            "name": name,
            "style": {
                "hue": k / cfg.num_categories,
                "texture": TEXTURES[k % len(TEXTURES)],
                "shape": SHAPES[k % len(SHAPES)],
                "saturation": 0.75,
                "brand_hues": [
                    (k / cfg.num_categories + (b - half) * cfg.brand_hue_offset) % 1.0
                    for b in range(cfg.brands_per_category)
                ],
            },
        })
    return styles


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _texture_field(kind, size, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    if kind == "gradient":
        ang = rng.uniform(0, 2 * math.pi)
        f = np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)
        return (f - f.min()) / (f.max() - f.min())
    if kind == "stripes":
        ang = rng.uniform(0, math.pi)
        freq = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0, 2 * math.pi)
        f = np.cos(ang) * xx + np.sin(ang) * yy
        return 0.5 + 0.5 * np.sin(2 * math.pi * freq * f + phase)
    if kind == "blobs":
        f = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            cx, cy = rng.uniform(0, 1, 2)
            r = rng.uniform(0.12, 0.3)
            f += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        return np.clip(f, 0, 1)
    raise ValueError(kind)


def _shape_mask(kind, size, rng, area_lo=0.05, area_hi=0.40) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(100):
        target = rng.uniform(area_lo, area_hi) * size * size
        aspect = rng.uniform(0.6, 1.6)
        if kind == "ellipse":
            a = math.sqrt(target / (math.pi * aspect))
            b = a * aspect
        elif kind == "rectangle":
            a = math.sqrt(target / aspect) / 2
            b = a * aspect
        else:
            a = math.sqrt(target / (2.0 * aspect))
            b = a * aspect
        cx = rng.uniform(a + 1, size - a - 1) if size - 2 * a - 2 > 0 else size / 2
        cy = rng.uniform(b + 1, size - b - 1) if size - 2 * b - 2 > 0 else size / 2
        dx, dy = (xx - cx) / a, (yy - cy) / b
        if kind == "ellipse":
            m = dx**2 + dy**2 <= 1.0
        elif kind == "rectangle":
            m = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
        else:  # diamond / rotated square family
            m = np.abs(dx) + np.abs(dy) <= 1.0
        frac = m.mean()
        if area_lo <= frac <= area_hi:
            return m.astype(np.float32)
    raise RuntimeError("could not place product")


def synth_record(cfg: SynthConfig, styles, category_id, brand, index):
    """Render one record from its own RNG stream, so records can be produced in any order."""
    rng = np.random.default_rng([cfg.seed, category_id, brand, index])
    st = styles[category_id]["style"]
    size = cfg.image_size
    hue = st["brand_hues"][brand]
    field_ = _texture_field(st["texture"], size, rng)
    c_lo = _hsv(hue + rng.uniform(-0.015, 0.015), st["saturation"], rng.uniform(0.35, 0.5))
    c_hi = _hsv(hue + 0.04, st["saturation"] * 0.6, rng.uniform(0.85, 0.95))
    bg = c_lo[None, None] * (1 - field_[..., None]) + c_hi[None, None] * field_[..., None]

    shape = st["shape"] if rng.uniform() < cfg.shape_affinity else SHAPES[rng.integers(len(SHAPES))]
    mask = _shape_mask(shape, size, rng)
    p_col = _hsv(rng.uniform(), rng.uniform(0.0, 0.4), rng.uniform(0.15, 0.95))
    shade = 0.85 + 0.15 * np.linspace(0, 1, size)[None, :, None]
    product = np.clip(p_col[None, None] * shade, 0, 1)
    image = np.where(mask[..., None] > 0, product, bg)
    image = np.rint(np.clip(image, 0, 1) * 255) / 255.0
    return image.astype(np.float32), mask, shape


def synthesize_corpus(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Render the corpus under ``out_dir`` and write ``manifest.json`` there."""
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    styles = category_styles(cfg)
    records = []
    splits = {s: [] for s in SPLITS}
    nb = cfg.brands_per_category
    for k in range(cfg.num_categories):
        per_brand = [cfg.records_per_category // nb + (b < cfg.records_per_category % nb) for b in range(nb)]
        for b in range(nb):
            family = f"c{k}_b{b}"
            n = per_brand[b]
            n_train = int(round(cfg.split_fractions[0] * n))
            n_bg1k = int(round(cfg.split_fractions[1] * n))
            for i in range(n):
                rid = f"{family}_{i:04d}"
                image, mask, shape = synth_record(cfg, styles, k, b, i)
                write_image(out / "images" / f"{rid}.png", image)
                write_mask(out / "masks" / f"{rid}.png", mask)
                records.append({
                    "record_id": rid,
                    "image_path": f"images/{rid}.png",
                    "mask_path": f"masks/{rid}.png",
                    "category_id": k,
                    "family": family,
                    "brand": b,
                    "shape": shape,
                })
                split = "train" if i < n_train else "eval_bg1k" if i < n_train + n_bg1k else "eval_pairs"
                splits[split].append(rid)
    cfg_dict = asdict(cfg)
    cfg_dict["split_fractions"] = list(cfg.split_fractions)
    manifest = DatasetManifest(
        categories=styles, records=records, splits=splits, root=out,
        image_size=cfg.image_size, synth_config=cfg_dict,
    )
    pairs, _ = build_pairs(manifest, cfg.seed, split="eval_pairs")
    manifest.pairs = [asdict(p) for p in pairs]
    write_manifest(manifest, out / "manifest.json")
    return load_manifest(out / "manifest.json")


# ---------------------------------------------------------------- pairing

def build_pairs(manifest: DatasetManifest, seed: int, split: str | None = "eval_pairs"):
    """Pair records within each style family.

    Each family is shuffled and consumed two at a time, giving
    ``floor(n / 2)`` disjoint (product, reference) pairs per family. Returns
    ``(pairs, warnings)``; singleton families are skipped with a warning.
    """
    ids = manifest.split(split) if split else [r["record_id"] for r in manifest.records]
    families = {}
    for rid in ids:
        families.setdefault(manifest.record_meta(rid).get("family") or str(manifest.record_meta(rid)["category_id"]), []).append(rid)
    pairs, warnings = [], []
    for fam_index, fam in enumerate(sorted(families)):
        members = sorted(families[fam])
        if len(members) < 2:
            warnings.append(f"family {fam!r} has a single record; skipped")
            log.warning("family %s has a single record; skipped", fam)
            continue
        rng = np.random.default_rng([seed, fam_index])
        order = rng.permutation(len(members))
        for i in range(0, len(members) - 1, 2):
            pairs.append(PairRecord(members[order[i]], members[order[i + 1]]))
    return pairs, warnings


# ---------------------------------------------------------------- in-memory arrays

@dataclass
class CorpusArrays:
    """Records of one split stacked into arrays (images NHWC, masks NHW)."""

    record_ids: list
    images: np.ndarray
    masks: np.ndarray
    category_ids: np.ndarray
    families: list

    def __len__(self):
        return len(self.record_ids)

    def index_of(self, record_id):
        return self.record_ids.index(record_id)


def load_arrays(manifest: DatasetManifest, split: str | None = "train", record_ids=None) -> CorpusArrays:
    if record_ids is None:
        record_ids = manifest.split(split) if split else [r["record_id"] for r in manifest.records]
    recs = [manifest.load_record(rid) for rid in record_ids]
    return CorpusArrays(
        record_ids=list(record_ids),
        images=np.stack([r.image for r in recs]).astype(np.float32),
        masks=np.stack([r.mask for r in recs]).astype(np.float32),
        category_ids=np.array([r.category_id for r in recs], dtype=np.int64),
        families=[r.family for r in recs],
    )
