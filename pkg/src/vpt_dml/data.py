"""
Datasets, augmentation and class-balanced sampling.

Two sources are supported:
- Synthetic clustered images: one smooth random template per class plus
  Gaussian pixel noise. With zero noise every class collapses to a single
  image, which makes end-to-end retrieval results predictable.
- An image folder laid out as `root/<class_name>/<image>`. PPM (P6/P3) is
  decoded in-package; PNG needs the optional Pillow extra.

Every dataset is split into class-disjoint train and eval parts with labels
re-indexed densely, the standard open-set protocol for metric learning. A
third disjoint part can be held back for backbone pretraining.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AugmentConfig, ConfigurationError, DataConfig, SyntheticConfig
from .utils import DMLError

logger = logging.getLogger(__name__)

BICUBIC_A = -0.5
# Side of the coarse grid that synthetic class templates are upsampled from.
TEMPLATE_GRID = 4
TEMPLATE_ATTEMPTS = 100
CROP_ATTEMPTS = 2
IMAGE_SUFFIXES = (".ppm", ".png")


class DatasetError(DMLError):
    """Raised when a dataset cannot be built or read."""


@dataclass
class Dataset:
    """
    Images with dense integer labels.

    Attributes:
        images: H×W×3 float32 arrays in [0, 1] (sizes may differ for folders)
        labels: Class id of every image, in [0, num_classes)
        class_names: Name of every class id
    """

    images: list[np.ndarray]
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if not self.class_names:
            count = int(self.labels.max()) + 1 if len(self.labels) else 0
            self.class_names = [str(c) for c in range(count)]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, classes: Sequence[int]) -> Dataset:
        """Keep only `classes`, re-indexing labels to 0..len(classes)-1."""
        remap = {int(c): i for i, c in enumerate(classes)}
        keep = [i for i, label in enumerate(self.labels) if int(label) in remap]
        return Dataset(
            images=[self.images[i] for i in keep],
            labels=np.array([remap[int(self.labels[i])] for i in keep], dtype=np.int64),
            class_names=[self.class_names[int(c)] for c in classes],
        )

    def split(self, train_classes: int | None = None) -> tuple[Dataset, Dataset]:
        """
        Class-disjoint train/eval split.

        The first `train_classes` classes (default: half, rounded down) train,
        the remaining classes evaluate.
        """
        total = self.num_classes
        count = total // 2 if train_classes is None else train_classes
        if not 0 < count < total:
            raise ConfigurationError(
                f"data.train_classes must leave classes for both splits "
                f"(got {count} of {total})"
            )
        return self.subset(range(count)), self.subset(range(count, total))


@dataclass
class ClassSplits:
    train: Dataset
    eval: Dataset
    pretrain: Dataset


def split_classes(dataset: Dataset, train_classes: int | None = None,
                  pretrain_classes: int | None = None) -> ClassSplits:
    """
    Class-disjoint pretrain, train and eval splits.

    With `pretrain_classes` set, the first that many classes are reserved for
    pretraining and the remaining ones are split as `Dataset.split` does.
    Without it, pretraining uses the train split.
    """
    if pretrain_classes is None:
        train, held_out = dataset.split(train_classes)
        return ClassSplits(train, held_out, train)
    total = dataset.num_classes
    if not 0 < pretrain_classes < total:
        raise ConfigurationError(
            f"pretrain.classes must leave classes for tuning (got {pretrain_classes} of {total})"
        )
    train, held_out = dataset.subset(range(pretrain_classes, total)).split(train_classes)
    return ClassSplits(train, held_out, dataset.subset(range(pretrain_classes)))


# ---------------------------------------------------------------------------
# Resampling and augmentation
# ---------------------------------------------------------------------------


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    """Cubic convolution kernel with parameter `a`."""
    x = np.abs(x)
    near = ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    far = ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """(out, in) interpolation matrix with half-pixel centers and edge clamping."""
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    centers = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    taps = np.floor(centers)[:, None].astype(np.int64) + np.arange(-1, 3)
    rows = np.broadcast_to(np.arange(out_size)[:, None], taps.shape)
    np.add.at(weights, (rows, np.clip(taps, 0, in_size - 1)),
              cubic_kernel(centers[:, None] - taps))
    return weights


def resize_bicubic(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Bicubic resample of an H×W×3 image; output is clipped to [0, 1]."""
    width = height if width is None else width
    rows = _resize_weights(image.shape[0], height)
    cols = _resize_weights(image.shape[1], width)
    out = np.einsum("oh,hwc->owc", rows, image.astype(np.float64))
    out = np.einsum("pw,owc->opc", cols, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def _random_crop_box(height: int, width: int, rng: np.random.Generator,
                     config: AugmentConfig) -> tuple[int, int, int, int] | None:
    area = height * width
    log_ratio = (math.log(config.ratio_min), math.log(config.ratio_max))
    for _ in range(CROP_ATTEMPTS):
        target = area * rng.uniform(config.scale_min, config.scale_max)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return None


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig,
            size: int, force_flip: bool | None = None) -> np.ndarray:
    """
    Training augmentation: random horizontal flip, random resized crop and a
    bicubic resample to `size`.

    A crop box that does not fit is drawn again once; after that the whole
    image is used.
    """
    flip = rng.uniform() < config.flip_p if force_flip is None else force_flip
    if flip:
        image = hflip(image)
    box = _random_crop_box(image.shape[0], image.shape[1], rng, config)
    if box is not None:
        top, left, h, w = box
        image = image[top:top + h, left:left + w]
    return resize_bicubic(image, size)


def eval_transform(image: np.ndarray, config: AugmentConfig, size: int) -> np.ndarray:
    """Deterministic center crop (eval_crop of the short side) and resize."""
    height, width = image.shape[:2]
    side = max(1, int(round(min(height, width) * config.eval_crop)))
    top = (height - side) // 2
    left = (width - side) // 2
    crop = image[top:top + side, left:left + side]
    if crop.shape[0] == size and crop.shape[1] == size:
        return crop.astype(np.float32)
    return resize_bicubic(crop, size)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def balanced_sampler(labels: Sequence[int] | np.ndarray, batch_size: int,
                     per_class: int, seed: int) -> Iterator[np.ndarray]:
    """
    Endless iterator of index batches with B/n classes × n samples each.

    Classes are drawn without replacement until fewer than B/n unused ones
    remain, then a new epoch starts from a fresh permutation. Samples within
    a class are drawn without replacement.

    Raises:
        ConfigurationError: If B is not divisible by n or too few classes have
            at least n samples
    """
    if batch_size % per_class != 0:
        raise ConfigurationError(
            f"batch size {batch_size} is not divisible by per-class count {per_class}"
        )
    classes_per_batch = batch_size // per_class
    label_array = np.asarray(labels)
    members = {
        int(c): np.flatnonzero(label_array == c) for c in np.unique(label_array)
    }
    eligible = np.array(sorted(c for c, idx in members.items() if idx.size >= per_class))
    skipped = len(members) - len(eligible)
    if skipped:
        logger.warning("%d classes have fewer than %d samples and are never sampled",
                       skipped, per_class)
    if len(eligible) < classes_per_batch:
        raise ConfigurationError(
            f"Only {len(eligible)} classes have at least {per_class} samples; "
            f"a batch needs {classes_per_batch}"
        )
    return _balanced_batches(members, eligible, classes_per_batch, per_class, seed)


def _balanced_batches(members: dict[int, np.ndarray], eligible: np.ndarray,
                      classes_per_batch: int, per_class: int,
                      seed: int) -> Iterator[np.ndarray]:
    rng = np.random.default_rng([seed, 0x5A])
    order = rng.permutation(eligible)
    cursor = 0
    while True:
        if cursor + classes_per_batch > len(order):
            order = rng.permutation(eligible)
            cursor = 0
        chosen = order[cursor:cursor + classes_per_batch]
        cursor += classes_per_batch
        yield np.concatenate([
            rng.choice(members[int(c)], size=per_class, replace=False) for c in chosen
        ])


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------


def generate_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    """
    Clustered synthetic images.

    Each class template is a smooth random image (a coarse random grid
    upsampled bicubically); templates are redrawn until every pair is at
    least `cluster_separation` apart in L2. Samples are the template plus
    Gaussian noise, clipped to [0, 1].

    Raises:
        DatasetError: If the separation cannot be reached at this image size
    """
    size = config.image_size
    max_distance = math.sqrt(3.0 * size * size)
    if config.cluster_separation > max_distance:
        raise DatasetError(
            f"cluster_separation {config.cluster_separation} exceeds the largest "
            f"possible distance {max_distance:.2f} for {size}×{size} images"
        )
    rng = np.random.default_rng([seed, 0x5E])
    templates: list[np.ndarray] = []
    for label in range(config.classes):
        for _ in range(TEMPLATE_ATTEMPTS):
            grid = rng.uniform(0.0, 1.0, (TEMPLATE_GRID, TEMPLATE_GRID, 3))
            candidate = resize_bicubic(grid, size).astype(np.float64)
            if all(np.linalg.norm(candidate - t) >= config.cluster_separation
                   for t in templates):
                templates.append(candidate)
                break
        else:
            raise DatasetError(
                f"Could not place class {label} at separation "
                f"{config.cluster_separation} after {TEMPLATE_ATTEMPTS} attempts"
            )

    images: list[np.ndarray] = []
    labels: list[int] = []
    for label, template in enumerate(templates):
        for _ in range(config.per_class):
            noise = rng.normal(0.0, config.noise_std, template.shape) if config.noise_std else 0.0
            images.append(np.clip(template + noise, 0.0, 1.0).astype(np.float32))
            labels.append(label)
    return Dataset(images, np.array(labels), [f"class_{c:03d}" for c in range(config.classes)])


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("Truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos


def decode_ppm(data: bytes) -> np.ndarray:
    """
    Decode a binary (P6) or ASCII (P3) PPM into an H×W×3 float32 array in [0, 1].

    Raises:
        DatasetError: On a malformed header or truncated pixel data
    """
    tokens, pos = _ppm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P6", b"P3"):
        raise DatasetError(f"Not a PPM image (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError("Invalid PPM header fields") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DatasetError(f"Invalid PPM geometry {width}×{height}, maxval {maxval}")
    count = width * height * 3

    if magic == b"P3":
        values = data[pos:].split()
        if len(values) < count:
            raise DatasetError("Truncated PPM pixel data")
        pixels = np.array([int(v) for v in values[:count]], dtype=np.float64)
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        needed = count * dtype.itemsize
        if len(data) - pos < needed:
            raise DatasetError(
                f"Truncated PPM pixel data: need {needed} bytes, have {len(data) - pos}"
            )
        pixels = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.float64)
    return (pixels / maxval).reshape(height, width, 3).astype(np.float32)


def _read_png(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:
        raise DatasetError(
            "PNG support needs Pillow; install the 'png' extra"
        ) from None
    with Image.open(path) as img:
        return (np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0).astype(np.float32)


def read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".ppm":
        return decode_ppm(path.read_bytes())
    return _read_png(path)


def load_image_folder(root: str | Path) -> Dataset:
    """
    Load `root/<class_name>/<image>` with labels in lexicographic class order.

    Unreadable images are skipped with a warning.

    Raises:
        DatasetError: If the root is missing, has no class directories, or a
            class ends up with no readable image
    """
    root_path = Path(root)
    if not root_path.is_dir():
        raise DatasetError(f"Image folder not found: {root_path}")
    class_dirs = sorted(p for p in root_path.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"No class directories under {root_path}")

    images: list[np.ndarray] = []
    labels: list[int] = []
    for label, class_dir in enumerate(class_dirs):
        loaded = 0
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                image = read_image(path)
            except (DatasetError, OSError) as e:
                logger.warning("Skipping unreadable image %s: %s", path, e)
                continue
            images.append(image)
            labels.append(label)
            loaded += 1
        if loaded == 0:
            raise DatasetError(f"Class directory has no readable images: {class_dir}")
    logger.info("Loaded %d images in %d classes from %s",
                len(images), len(class_dirs), root_path)
    return Dataset(images, np.array(labels), [p.name for p in class_dirs])


def load_dataset(config: DataConfig, seed: int) -> Dataset:
    if config.source == "folder":
        assert config.folder is not None
        return load_image_folder(config.folder)
    return generate_synthetic(config.synthetic, seed)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    step: int


def make_batch(dataset: Dataset, indices: np.ndarray, step: int,
               rng: np.random.Generator | None, config: AugmentConfig,
               size: int) -> Batch:
    """
    Assemble a batch. With an `rng` and augmentation enabled the training
    transform is applied, otherwise the deterministic eval transform.
    """
    if rng is not None and config.enabled:
        images = [augment(dataset.images[i], rng, config, size) for i in indices]
    else:
        images = [eval_transform(dataset.images[i], config, size) for i in indices]
    return Batch(np.stack(images), dataset.labels[indices].copy(), step)
