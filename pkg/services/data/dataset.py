"""
Dataset directories

Layout:
    <dir>/<id>_a.ppm   aerial
    <dir>/<id>_s.ppm   ground semantic map
    <dir>/<id>_g.ppm   ground image
    <dir>/split.txt    "train: id id ..." and "test: id ..." lines

Ids are zero-padded 5-digit integers. Pixels load as float32 C x H x W in
[-1, 1] via x / 127.5 - 1.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from services.common.exceptions import ConfigError, DatasetError, DimensionError, FormatError
from services.data.ppm import ppm_read, ppm_write
from services.data.scenes import ImageTriplet, random_scene, synth_triplet
from services.engine.rng import Rng

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
SPLIT_FILE = "split.txt"
MEMBERS = {"aerial": "a", "semantic": "s", "ground": "g"}


def sample_id(index: int) -> str:
    return f"{index:05d}"


def member_path(directory: Union[str, Path], sid: str, member: str) -> Path:
    return Path(directory) / f"{sid}_{MEMBERS[member]}.ppm"


# ============ Normalisation ============

def normalize(img: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 -> 3 x H x W float32 in [-1, 1]"""
    if img.dtype != np.uint8:
        raise DimensionError("normalize expects uint8 pixels", expected="uint8", actual=str(img.dtype))
    return (img.transpose(2, 0, 1).astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize(x: np.ndarray) -> np.ndarray:
    """3 x H x W floats in [-1, 1] -> H x W x 3 uint8 (rounded, clipped)"""
    scaled = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


@dataclass
class Sample:
    """One normalised triplet"""

    id: str
    aerial: np.ndarray
    semantic: np.ndarray
    ground: np.ndarray


# ============ Writing ============

def format_split(splits: Dict[str, Sequence[str]]) -> str:
    return "".join(f"{name}: {' '.join(splits[name])}\n" for name in SPLITS)


def write_dataset(
    out_dir: Union[str, Path],
    seed: int,
    count: int,
    size: int,
    test_fraction: float = 0.2,
) -> Dict[str, List[str]]:
    """
    Render `count` random scenes and write the dataset directory

    Scene seeds come from the "dataset/scenes" stream of `seed`, so reruns
    with the same arguments are byte-identical. The first
    round(count * (1 - test_fraction)) ids form the train split.

    Returns:
        The split mapping written to split.txt
    """
    if count < 1:
        raise ConfigError(f"count must be positive, got {count}", field="count")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}", field="test_fraction")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene_seeds = Rng(seed).fresh("dataset/scenes").integers(0, 2**31 - 1, size=count)

    ids = [sample_id(i) for i in range(count)]
    for sid, scene_seed in zip(ids, scene_seeds):
        triplet = synth_triplet(random_scene(int(scene_seed)), size)
        for member in MEMBERS:
            ppm_write(member_path(out, sid, member), getattr(triplet, member))

    n_train = int(np.floor(count * (1.0 - test_fraction) + 0.5))
    splits = {"train": ids[:n_train], "test": ids[n_train:]}
    (out / SPLIT_FILE).write_text(format_split(splits), encoding="utf-8")
    logger.info(
        f"Wrote {count} triplets ({len(splits['train'])} train / {len(splits['test'])} test) to {out}"
    )
    return splits


# ============ Reading ============

def read_split(directory: Union[str, Path]) -> Dict[str, List[str]]:
    path = Path(directory) / SPLIT_FILE
    if not path.exists():
        raise DatasetError(f"missing {SPLIT_FILE} in {directory}")
    splits: Dict[str, List[str]] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        name, sep, rest = raw.partition(":")
        name = name.strip()
        if not sep or name not in SPLITS:
            raise DatasetError(f"{path}:{lineno}: expected 'train:' or 'test:' line")
        if name in splits:
            raise DatasetError(f"{path}:{lineno}: duplicate {name} line")
        splits[name] = rest.split()
    for name in SPLITS:
        splits.setdefault(name, [])
    return splits


def load_triplet(directory: Union[str, Path], sid: str) -> ImageTriplet:
    """
    Read one raw triplet

    Raises:
        DatasetError: If a member file is missing or unreadable (names the id)
    """
    images = {}
    for member in MEMBERS:
        path = member_path(directory, sid, member)
        if not path.exists():
            raise DatasetError(f"sample {sid}: missing {path.name}", sample_id=sid)
        try:
            images[member] = ppm_read(path)
        except FormatError as exc:
            raise DatasetError(f"sample {sid}: {exc.message}", sample_id=sid) from exc
    shapes = {img.shape for img in images.values()}
    if len(shapes) != 1:
        raise DatasetError(f"sample {sid}: members differ in size {sorted(shapes)}", sample_id=sid)
    return ImageTriplet(**images)


def load_dataset(directory: Union[str, Path], split: str) -> List[Sample]:
    """
    Load a split in split-file order, normalised to [-1, 1]

    Raises:
        DatasetError: Unknown split, bad split file, or a missing triplet member
    """
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}, expected one of {SPLITS}")
    ids = read_split(directory)[split]
    samples = []
    for sid in ids:
        triplet = load_triplet(directory, sid)
        samples.append(Sample(
            id=sid,
            aerial=normalize(triplet.aerial),
            semantic=normalize(triplet.semantic),
            ground=normalize(triplet.ground),
        ))
    logger.info(f"Loaded {len(samples)} {split} samples from {directory}")
    return samples


def stack_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(aerial, semantic, ground) as b x 3 x H x W arrays"""
    return (
        np.stack([s.aerial for s in samples]),
        np.stack([s.semantic for s in samples]),
        np.stack([s.ground for s in samples]),
    )


def iter_batches(samples: Sequence[Sample], order: Sequence[int], batch_size: int,
                 start: int = 0) -> Iterator[Tuple[int, Tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """
    Yield (batch index, batch) over `order` starting at batch `start`

    The last batch may be short.
    """
    n_batches = (len(order) + batch_size - 1) // batch_size
    for index in range(start, n_batches):
        chosen = order[index * batch_size:(index + 1) * batch_size]
        yield index, stack_batch([samples[i] for i in chosen])
