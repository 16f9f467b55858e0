"""Procedural scenes, weak/strong augmentation and the TMRD dataset file.

Scenes are 64x64 grayscale images on a dark background holding one to
three axis-aligned rectangles. The class of a rectangle is its texture:
0 solid, 1 vertical stripes, 2 checkerboard.
"""

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from codec import ByteReader, pack_floats
from detector import IMAGE_SIZE, NUM_CLASSES
from errors import FormatError
from metrics import iou_matrix

MAGIC = b"TMRD"
VERSION = 1
CLASS_NAMES = ("solid", "striped", "checker")
BACKGROUND = 0.1
MIN_SIDE = 12
MAX_SIDE = 22
MAX_OBJECTS = 3
MAX_OVERLAP = 0.3
PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: tuple


@dataclass
class Scene:
    """An image with its objects; ``objects`` is None for unlabeled scenes."""

    image: np.ndarray
    objects: list = None

    @property
    def labeled(self):
        return self.objects is not None

    def unlabeled(self):
        return Scene(self.image, None)


@dataclass
class Dataset:
    labeled: list
    unlabeled: list
    test: list = field(default_factory=list)
    seed: int = 0


@dataclass(frozen=True)
class AugmentConfig:
    """Strengths of the weak/strong pair; ``AugmentConfig.zero()`` is the identity."""

    flip_probability: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    noise_std: float = 0.05
    cutout_probability: float = 0.5
    cutout_min: int = 8
    cutout_max: int = 16
    cutout_fill: float = 0.5

    @classmethod
    def zero(cls):
        return cls(
            flip_probability=0.0,
            brightness=0.0,
            contrast=0.0,
            noise_std=0.0,
            cutout_probability=0.0,
        )


@dataclass
class AugmentedPair:
    weak: Scene
    strong: Scene
    flip_applied: bool


def _texture(class_id, height, width):
    rows, cols = np.mgrid[0:height, 0:width]
    if class_id == 0:
        return np.full((height, width), 0.9)
    if class_id == 1:
        return np.where((cols // 2) % 2 == 0, 0.9, 0.4)
    return np.where(((rows // 2) + (cols // 2)) % 2 == 0, 0.9, 0.3)


def sample_layout(rng, size=IMAGE_SIZE, num_classes=NUM_CLASSES):
    """Draw 1..3 non-overlapping (IoU <= 0.3) boxes with uniform classes."""
    wanted = int(rng.integers(1, MAX_OBJECTS + 1))
    objects = []
    for _ in range(wanted):
        for _ in range(PLACEMENT_ATTEMPTS):
            width, height = (int(v) for v in rng.integers(MIN_SIDE, MAX_SIDE + 1, size=2))
            x1 = int(rng.integers(0, size - width + 1))
            y1 = int(rng.integers(0, size - height + 1))
            box = (float(x1), float(y1), float(x1 + width), float(y1 + height))
            if objects and iou_matrix(box, [o.box for o in objects]).max() > MAX_OVERLAP:
                continue
            objects.append(GroundTruth(int(rng.integers(0, num_classes)), box))
            break
    return objects


def render(objects, size=IMAGE_SIZE):
    image = np.full((size, size), BACKGROUND)
    for obj in objects:
        x1, y1, x2, y2 = (int(v) for v in obj.box)
        image[y1:y2, x1:x2] = _texture(obj.class_id, y2 - y1, x2 - x1)
    return image


def make_scene(rng):
    objects = sample_layout(rng)
    return Scene(render(objects), objects)


def split_sizes(count, split_ratio):
    labeled = int(round(count * split_ratio))
    if count >= 2:
        labeled = min(max(labeled, 1), count - 1)
    return labeled, count - labeled


def generate(seed, count, split_ratio):
    """Labeled and unlabeled scenes, deterministic in (seed, count, split_ratio).

    Returns:
        tuple: (labeled scenes, unlabeled scenes with objects stripped).
    """
    dataset = generate_dataset(seed, count, split_ratio, test_count=0)
    return dataset.labeled, dataset.unlabeled


def generate_dataset(seed, count, split_ratio, test_count=0):
    """Training split plus an independent labeled test split.

    Args:
        seed (int): Master seed.
        count (int): Training scenes (labeled + unlabeled), > 0.
        split_ratio (float): Labeled fraction, strictly inside (0, 1).
        test_count (int): Labeled test scenes drawn from a separate stream.

    Returns:
        Dataset: The three splits.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split ratio must lie strictly between 0 and 1")
    if test_count < 0:
        raise ValueError("test count must not be negative")

    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    train_rng = np.random.default_rng(train_seed)
    test_rng = np.random.default_rng(test_seed)
    n_labeled, _ = split_sizes(count, split_ratio)
    scenes = [make_scene(train_rng) for _ in range(count)]
    dataset = Dataset(
        labeled=scenes[:n_labeled],
        unlabeled=[s.unlabeled() for s in scenes[n_labeled:]],
        test=[make_scene(test_rng) for _ in range(test_count)],
        seed=seed,
    )
    logging.info(
        "Generated dataset seed=%d: %d labeled, %d unlabeled, %d test scenes.",
        seed,
        len(dataset.labeled),
        len(dataset.unlabeled),
        len(dataset.test),
    )
    return dataset


# Augmentation


def flip_box(box, width=IMAGE_SIZE):
    x1, y1, x2, y2 = box
    return (width - x2, y1, width - x1, y2)


def flip_scene(scene):
    objects = None
    if scene.objects is not None:
        objects = [replace(o, box=flip_box(o.box, scene.image.shape[1])) for o in scene.objects]
    return Scene(scene.image[:, ::-1].copy(), objects)


def weak_augment(scene, rng, config=None, force=None):
    """Horizontal flip with probability ``config.flip_probability``.

    Args:
        force (bool, optional): Flip (True) or keep (False) regardless of rng.

    Returns:
        tuple: (view, flip_applied).
    """
    config = config or AugmentConfig()
    flip = force if force is not None else bool(rng.random() < config.flip_probability)
    return (flip_scene(scene) if flip else scene), flip


def strong_augment(scene, rng, config=None):
    """Photometric jitter, Gaussian noise and one optional cutout; boxes untouched."""
    config = config or AugmentConfig()
    image = scene.image.copy()
    if config.brightness > 0.0 or config.contrast > 0.0:
        shift = rng.uniform(-config.brightness, config.brightness)
        gain = rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)
        mean = image.mean()
        image = (image - mean) * gain + mean + shift
    if config.noise_std > 0.0:
        image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    if config.cutout_probability > 0.0 and rng.random() < config.cutout_probability:
        height, width = image.shape
        side_h, side_w = (int(v) for v in rng.integers(config.cutout_min, config.cutout_max + 1, size=2))
        top = int(rng.integers(0, height - side_h + 1))
        left = int(rng.integers(0, width - side_w + 1))
        image[top:top + side_h, left:left + side_w] = config.cutout_fill
    return Scene(image, scene.objects)


def augment_pair(scene, rng, config=None):
    weak, flipped = weak_augment(scene, rng, config)
    return AugmentedPair(weak=weak, strong=strong_augment(scene, rng, config), flip_applied=flipped)


def sample_batch(scenes, size, rng):
    """Draw ``size`` scenes; without replacement when the pool is large enough."""
    if not scenes:
        raise ValueError("cannot sample from an empty split")
    index = rng.choice(len(scenes), size=size, replace=len(scenes) < size)
    return [scenes[i] for i in index]


# TMRD container


def _pack_scene(scene):
    objects = scene.objects or []
    chunks = [pack_floats(scene.image), struct.pack("<I", len(objects))]
    for obj in objects:
        chunks.append(struct.pack("<I4d", obj.class_id, *obj.box))
    return b"".join(chunks)


def dataset_bytes(dataset):
    header = struct.pack(
        "<4sIIIIIIIQ",
        MAGIC,
        VERSION,
        IMAGE_SIZE,
        IMAGE_SIZE,
        NUM_CLASSES,
        len(dataset.labeled),
        len(dataset.unlabeled),
        len(dataset.test),
        dataset.seed,
    )
    body = [_pack_scene(s) for s in dataset.labeled + dataset.unlabeled + dataset.test]
    return header + b"".join(body)


def write_dataset(dataset, path):
    with open(path, "wb") as handle:
        handle.write(dataset_bytes(dataset))
    logging.info("Wrote dataset to %s.", path)


def read_dataset(path):
    """Load a TMRD file written by ``write_dataset``.

    Raises:
        FormatError: Bad magic, unsupported version, mismatched geometry or truncation.
    """
    with open(path, "rb") as handle:
        reader = ByteReader(handle.read(), "dataset file")
    reader.expect_magic(MAGIC)
    version = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    height, width, classes = reader.unpack("<III")
    if (height, width, classes) != (IMAGE_SIZE, IMAGE_SIZE, NUM_CLASSES):
        raise FormatError(f"dataset geometry {height}x{width}, K={classes} does not match the detector")
    counts = reader.unpack("<III")
    seed = reader.unpack("<Q")

    splits = []
    for index, count in enumerate(counts):
        scenes = []
        for _ in range(count):
            image = reader.floats(height * width).reshape(height, width)
            objects = []
            for _ in range(reader.unpack("<I")):
                class_id, *box = reader.unpack("<I4d")
                if class_id >= classes:
                    raise FormatError(f"class id {class_id} out of range")
                objects.append(GroundTruth(int(class_id), tuple(box)))
            scenes.append(Scene(image, None if index == 1 else objects))
        splits.append(scenes)
    reader.expect_end()
    logging.info("Read dataset %s with counts %s.", path, counts)
    return Dataset(labeled=splits[0], unlabeled=splits[1], test=splits[2], seed=seed)
