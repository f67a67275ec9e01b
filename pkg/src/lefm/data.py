"""Dataset ingestion, majority-vote labels, patches, augmentation, synthesis.

On-disk layout: `root/<sample_id>/image.png` plus one `annotator_<k>.png`
8-bit grayscale mask per annotator (nonzero = positive), with an optional
`root/metadata.csv` carrying sample_id, patient_id, organ columns.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DataError

SYNTHETIC_RULES = ("LINEAR", "PRODUCT", "MIX")
_RULE_DEFAULT_TAU = {"LINEAR": 0.5, "PRODUCT": 0.25, "MIX": 0.5}


@dataclass
class AnnotatedSample:
    sample_id: str
    image: np.ndarray            # H x W x 3 float in [0, 1]
    annotations: np.ndarray      # A x H x W uint8 in {0, 1}
    majority_label: np.ndarray   # H x W uint8 in {0, 1}
    patient_id: str
    organ: str | None = None

    @property
    def n_annotators(self) -> int:
        return self.annotations.shape[0]


def majority_vote(annotations) -> np.ndarray:
    """Per-pixel majority over an A x H x W stack; even-count ties go positive."""
    stack = np.asarray(annotations)
    if stack.ndim != 3:
        raise ValueError("annotations must be an A x H x W stack")
    a = stack.shape[0]
    return (2 * stack.astype(np.int64).sum(axis=0) >= a).astype(np.uint8)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return (np.asarray(img.convert("L")) > 0).astype(np.uint8)
    except OSError as exc:
        raise DataError(f"unreadable mask file {path}: {exc}") from exc


def _read_metadata(root: Path) -> dict[str, tuple[str, str | None]]:
    meta_path = root / "metadata.csv"
    if not meta_path.exists():
        return {}
    meta = {}
    with open(meta_path, newline="") as fh:
        for row in csv.DictReader(fh):
            organ = row.get("organ") or None
            meta[row["sample_id"]] = (row.get("patient_id") or row["sample_id"], organ)
    return meta


def load_dataset(root_path) -> list[AnnotatedSample]:
    """Load every sample folder under root; majority labels are computed here."""
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    meta = _read_metadata(root)
    samples = []
    expected_annotators = None
    for sample_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        image_path = sample_dir / "image.png"
        if not image_path.exists():
            raise DataError(f"missing image file {image_path}")
        image = _read_image(image_path)
        mask_paths = sorted(sample_dir.glob("annotator_*.png"))
        if not mask_paths:
            raise DataError(f"no annotator masks in {sample_dir}")
        indices = sorted(int(p.stem.split("_")[1]) for p in mask_paths)
        if indices != list(range(len(indices))):
            raise DataError(f"annotator masks in {sample_dir} are not annotator_0..annotator_{len(indices) - 1}")
        if expected_annotators is None:
            expected_annotators = len(mask_paths)
        elif len(mask_paths) != expected_annotators:
            raise DataError(
                f"{sample_dir} has {len(mask_paths)} annotator masks, other samples have {expected_annotators}"
            )
        masks = []
        for path in sorted(mask_paths, key=lambda p: int(p.stem.split("_")[1])):
            mask = _read_mask(path)
            if mask.shape != image.shape[:2]:
                raise DataError(f"mask {path} has shape {mask.shape}, image is {image.shape[:2]}")
            masks.append(mask)
        annotations = np.stack(masks)
        patient_id, organ = meta.get(sample_dir.name, (sample_dir.name, None))
        samples.append(
            AnnotatedSample(
                sample_id=sample_dir.name,
                image=image,
                annotations=annotations,
                majority_label=majority_vote(annotations),
                patient_id=patient_id,
                organ=organ,
            )
        )
    if not samples:
        raise DataError(f"no sample folders found under {root}")
    return samples


def save_dataset(samples, root_path):
    """Write samples in the on-disk layout (images, masks, metadata.csv)."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        sample_dir = root / sample.sample_id
        sample_dir.mkdir(exist_ok=True)
        img = Image.fromarray(np.round(sample.image * 255.0).astype(np.uint8), mode="RGB")
        img.save(sample_dir / "image.png")
        for k in range(sample.n_annotators):
            mask = Image.fromarray(sample.annotations[k] * np.uint8(255), mode="L")
            mask.save(sample_dir / f"annotator_{k}.png")
    with open(root / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "patient_id", "organ"])
        for sample in samples:
            writer.writerow([sample.sample_id, sample.patient_id, sample.organ or ""])


@dataclass
class SplitSpec:
    train_ids: list[str]
    test_ids: list[str]
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self, samples=None):
        if set(self.train_ids) & set(self.test_ids):
            raise ConfigurationError("train and test ids overlap")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if samples is not None:
            by_id = {s.sample_id: s for s in samples}
            train_patients = {by_id[i].patient_id for i in self.train_ids}
            test_patients = {by_id[i].patient_id for i in self.test_ids}
            if train_patients & test_patients:
                raise ConfigurationError("train and test share patients")

    def to_dict(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SplitSpec":
        return cls(
            train_ids=list(payload["train_ids"]),
            test_ids=list(payload["test_ids"]),
            val_fraction=float(payload.get("val_fraction", 0.2)),
            seed=int(payload.get("seed", 0)),
        )


def make_split(samples, test_fraction: float, seed: int, val_fraction: float = 0.2) -> SplitSpec:
    """Patient-disjoint train/test split; whole patients go to one side."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in (0, 1)")
    patients: dict[str, list[str]] = {}
    for sample in samples:
        patients.setdefault(sample.patient_id, []).append(sample.sample_id)
    order = sorted(patients)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    target = test_fraction * len(samples)
    test_ids: list[str] = []
    for patient in order:
        if len(test_ids) >= target:
            break
        test_ids.extend(patients[patient])
    test_set = set(test_ids)
    train_ids = [s.sample_id for s in samples if s.sample_id not in test_set]
    if not train_ids or not test_ids:
        raise ConfigurationError("split left train or test empty; adjust test_fraction")
    spec = SplitSpec(train_ids=train_ids, test_ids=sorted(test_ids), val_fraction=val_fraction, seed=seed)
    spec.validate(samples)
    return spec


@dataclass
class Patch:
    image: np.ndarray   # P x P x 3
    label: np.ndarray   # P x P uint8
    origin: tuple[int, int]
    sample_id: str


def _axis_origins(length: int, size: int, stride: int) -> list[int]:
    origins = list(range(0, length - size + 1, stride))
    if origins[-1] != length - size:
        origins.append(length - size)  # edge-aligned remainder patch
    return origins


def make_patches(sample: AnnotatedSample, patch_size: int = 64, stride: int | None = None) -> list[Patch]:
    """Tile the sample into square patches; right/bottom remainders are edge aligned."""
    if patch_size % 8 != 0:
        raise ConfigurationError("patch_size must be a multiple of 8")
    stride = patch_size if stride is None else stride
    if stride < 1:
        raise ConfigurationError("stride must be positive")
    h, w = sample.majority_label.shape
    if patch_size > h or patch_size > w:
        raise ConfigurationError(f"patch size {patch_size} exceeds image size {(h, w)}")
    patches = []
    for r in _axis_origins(h, patch_size, stride):
        for c in _axis_origins(w, patch_size, stride):
            patches.append(
                Patch(
                    image=sample.image[r:r + patch_size, c:c + patch_size],
                    label=sample.majority_label[r:r + patch_size, c:c + patch_size],
                    origin=(r, c),
                    sample_id=sample.sample_id,
                )
            )
    return patches


@dataclass
class AugmentationConfig:
    """Independent random transforms, each applied with `probability`.

    Positive rotation moves pixel (r, c) toward (c, H-1-r), i.e. a +90 degree
    rotation of a square image is an exact quarter turn.  Images interpolate
    bilinearly and are clipped back to [0, 1]; masks use nearest neighbour so
    labels stay binary; out-of-frame regions fill with 0.
    """

    shift_limit: float = 0.2
    scale_limit: float = 0.2
    rotation_limit: float = 30.0
    horizontal_flip: bool = True
    vertical_flip: bool = True
    probability: float = 0.5
    seed: int = 0


def _affine_matrix(height, width, angle_deg, scale, shift_rc):
    theta = math.radians(angle_deg)
    rot = np.array([[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]])
    forward = scale * rot
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    inverse = np.linalg.inv(forward)
    offset = center - inverse @ (center + np.asarray(shift_rc))
    return inverse, offset


def augment(pair, config: AugmentationConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Apply the configured random transforms to an (image, mask) pair."""
    image, mask = pair
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if config.probability <= 0.0:
        return image.copy(), mask.copy()

    if config.horizontal_flip and rng.random() < config.probability:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    if config.vertical_flip and rng.random() < config.probability:
        image = image[::-1, :]
        mask = mask[::-1, :]

    h, w = mask.shape
    shift = np.zeros(2)
    scale = 1.0
    angle = 0.0
    warp = False
    if config.shift_limit > 0 and rng.random() < config.probability:
        shift = np.array([rng.uniform(-config.shift_limit, config.shift_limit) * h,
                          rng.uniform(-config.shift_limit, config.shift_limit) * w])
        warp = True
    if config.scale_limit > 0 and rng.random() < config.probability:
        scale = 1.0 + rng.uniform(-config.scale_limit, config.scale_limit)
        warp = True
    if config.rotation_limit > 0 and rng.random() < config.probability:
        angle = rng.uniform(-config.rotation_limit, config.rotation_limit)
        warp = True

    if warp:
        matrix, offset = _affine_matrix(h, w, angle, scale, shift)
        warped = np.empty_like(image)
        for ch in range(image.shape[2]):
            warped[:, :, ch] = ndimage.affine_transform(
                image[:, :, ch], matrix, offset=offset, order=1, mode="constant", cval=0.0
            )
        image = np.clip(warped, 0.0, 1.0)
        mask = ndimage.affine_transform(
            mask.astype(np.float64), matrix, offset=offset, order=0, mode="constant", cval=0.0
        ).astype(mask.dtype)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def _smooth_field(rng, height, width, smoothness):
    field_ = rng.random((height, width))
    if smoothness <= 0:
        return field_
    field_ = ndimage.gaussian_filter(field_, sigma=smoothness, mode="reflect")
    span = field_.max() - field_.min()
    if span < 1e-12:
        return np.full_like(field_, 0.5)
    return (field_ - field_.min()) / span


def synthetic_rule(rule: str, channels, tau: float) -> np.ndarray:
    """Evaluate a label rule on noiseless channel fields; boundary excluded."""
    r, g, b = channels
    if rule == "LINEAR":
        score = 0.5 * r + 0.5 * b
    elif rule == "PRODUCT":
        score = r * b
    elif rule == "MIX":
        score = r * g + b * b
    else:
        raise ConfigurationError(f"unknown rule {rule!r}; expected one of {SYNTHETIC_RULES}")
    return (score > tau).astype(np.uint8)


def generate_synthetic(
    n_images: int,
    height: int,
    width: int,
    rule: str,
    noise_sigma: float,
    seed: int,
    tau: float | None = None,
    smoothness: float = 8.0,
) -> list[AnnotatedSample]:
    """Deterministic synthetic dataset with one annotator per image.

    Channels are smooth random fields in [0, 1] (raw uniform noise when
    smoothness is 0).  Labels come from the noiseless field; gaussian noise
    with `noise_sigma` is added to the stored image only.
    """
    if rule not in SYNTHETIC_RULES:
        raise ConfigurationError(f"unknown rule {rule!r}; expected one of {SYNTHETIC_RULES}")
    if n_images < 1:
        raise ConfigurationError("n_images must be positive")
    tau = _RULE_DEFAULT_TAU[rule] if tau is None else float(tau)
    samples = []
    for idx in range(n_images):
        # per-image substream: fields are drawn before noise, so labels do
        # not depend on noise_sigma
        rng = np.random.default_rng([seed, idx])
        channels = [_smooth_field(rng, height, width, smoothness) for _ in range(3)]
        label = synthetic_rule(rule, channels, tau)
        image = np.stack(channels, axis=2)
        if noise_sigma > 0:
            image = np.clip(image + rng.normal(0.0, noise_sigma, size=image.shape), 0.0, 1.0)
        sample_id = f"synth_{idx:04d}"
        samples.append(
            AnnotatedSample(
                sample_id=sample_id,
                image=image,
                annotations=label[None, :, :].copy(),
                majority_label=label,
                patient_id=sample_id,
            )
        )
    return samples
