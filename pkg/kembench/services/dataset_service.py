"""Deterministic generators for the noise-sharing toy and Sort-of-CLEVR.

Every draw comes from a Philox stream keyed by the seed and the sample (or
batch) index, so any slice of a dataset can be regenerated on its own.
"""
import json
import logging
import struct
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

import config
from kembench.exceptions import ContractError, DimensionError
from kembench.models import DatasetManifest, ImbalanceSpec
from kembench.utils.autodiff import Tensor
from kembench.utils.file_utils import ensure_dir
from kembench.utils.rng_utils import (
    STREAM_CLEVR, STREAM_NOISE_DISTRACTOR, STREAM_NOISE_EMBED, STREAM_NOISE_LATENT, STREAM_NOISE_TOKENS,
    make_rng,
)

try:
    from PIL import Image
    PREVIEW_AVAILABLE = True
except ImportError as e:
    logging.warning(f"Pillow not available, dataset previews disabled: {e}")
    PREVIEW_AVAILABLE = False
    Image = None

logger = logging.getLogger(__name__)

# noise toy

NOISE_EVAL_INDEX = 1 << 40


@dataclass
class NoiseToyBatch:
    batch: int
    latent: Tensor
    task1_tokens: Tensor
    task2_tokens: Tensor
    task3_tokens: Tensor
    labels1: np.ndarray
    labels2: np.ndarray

    def task_tokens(self) -> List[Tensor]:
        return [self.task1_tokens, self.task2_tokens, self.task3_tokens]


def noise_toy_embeddings(seed: int, m: int, d: int) -> np.ndarray:
    """Per-task, per-token latent embeddings of tasks 1 and 2, shape (2, m, latent, d)."""
    rng = make_rng(seed, STREAM_NOISE_EMBED, m, d)
    latent = config.NOISE_LATENT_DIM
    return rng.normal(0.0, 1.0 / np.sqrt(latent), size=(2, m, latent, d))


def gen_noise_toy(seed: int, batch: int, m: int, d: int, index: int = 0) -> NoiseToyBatch:
    """Batch ``index`` of the noise toy.

    Tasks 1 and 2 embed a shared latent ``z`` (plus small token noise); task 3
    is pure noise from its own stream. Labels are argmaxes over overlapping
    latent windows, so tasks 1 and 2 share knowledge and task 3 carries none.
    """
    if m < 2 or d < 2:
        raise ContractError(f"noise toy needs m, d >= 2, got m={m}, d={d}")
    if batch < 1:
        raise ContractError(f"batch must be positive, got {batch}")
    embeddings = noise_toy_embeddings(seed, m, d)
    z = make_rng(seed, STREAM_NOISE_LATENT, index).standard_normal((batch, config.NOISE_LATENT_DIM))
    token_noise = make_rng(seed, STREAM_NOISE_TOKENS, index).normal(
        0.0, config.NOISE_TOKEN_STD, size=(2, batch, m, d))
    distractor = make_rng(seed, STREAM_NOISE_DISTRACTOR, index).standard_normal((batch, m, d))

    task1 = np.einsum("bz,jzd->bjd", z, embeddings[0]) + token_noise[0]
    task2 = np.einsum("bz,jzd->bjd", z, embeddings[1]) + token_noise[1]
    return NoiseToyBatch(
        batch=batch,
        latent=Tensor(z),
        task1_tokens=Tensor(task1),
        task2_tokens=Tensor(task2),
        task3_tokens=Tensor(distractor),
        labels1=np.argmax(z[:, 0:4], axis=1),
        labels2=np.argmax(z[:, 3:7], axis=1),
    )


# Sort-of-CLEVR

COLOR_NAMES = ["red", "green", "blue", "orange", "gray", "yellow"]
COLOR_VALUES = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 156, 0), (128, 128, 128), (255, 255, 0)]
SHAPE_NAMES = ["square", "circle"]
ANSWER_VOCABULARY = ["yes", "no", "square", "circle", "1", "2", "3", "4", "5", "6"]
NON_RELATIONAL_SUBTYPES = ["shape", "top", "left"]
RELATIONAL_SUBTYPES = ["closest-shape", "furthest-shape", "count-same-shape"]
QUESTION_LENGTH = len(COLOR_NAMES) + 2 + 3
OBJECTS_PER_IMAGE = len(COLOR_NAMES)
SPLITS = {"train": 0, "test": 1, "long-tail": 2}
PREVIEW_CAPTIONS = "captions.txt"
RECORD_LAYOUT = [
    "record_bytes:uint32",
    f"image:float32[{config.CLEVR_IMAGE_SIZE}x{config.CLEVR_IMAGE_SIZE}x3]",
    f"question:float32[{QUESTION_LENGTH}]",
    "answer:int32",
    f"objects:int32[{OBJECTS_PER_IMAGE}x4](color,shape,x,y)",
]


@dataclass(frozen=True)
class ClevrObject:
    color: int
    shape: int
    x: int
    y: int


@dataclass
class SortOfClevrSample:
    image: np.ndarray
    objects: List[ClevrObject]
    question: np.ndarray
    answer: int

    @property
    def question_color(self) -> int:
        return int(np.argmax(self.question[:len(COLOR_NAMES)]))

    @property
    def relational(self) -> bool:
        return bool(self.question[len(COLOR_NAMES) + 1] == 1.0)

    @property
    def subtype(self) -> int:
        return int(np.argmax(self.question[len(COLOR_NAMES) + 2:]))

    def describe(self) -> str:
        kinds = RELATIONAL_SUBTYPES if self.relational else NON_RELATIONAL_SUBTYPES
        return f"{COLOR_NAMES[self.question_color]} {kinds[self.subtype]} -> {ANSWER_VOCABULARY[self.answer]}"


def encode_question(color: int, relational: bool, subtype: int) -> np.ndarray:
    question = np.zeros(QUESTION_LENGTH, dtype=np.float32)
    question[color] = 1.0
    question[len(COLOR_NAMES) + (1 if relational else 0)] = 1.0
    question[len(COLOR_NAMES) + 2 + subtype] = 1.0
    return question


def _count_answer(count: int) -> int:
    return ANSWER_VOCABULARY.index(str(count))


def answer_question(objects: Sequence[ClevrObject], color: int, relational: bool, subtype: int) -> int:
    """Rule oracle: answer index for a question about the object of ``color``."""
    by_color = {obj.color: obj for obj in objects}
    if color not in by_color:
        raise ContractError(f"no object of color {COLOR_NAMES[color]} in the scene")
    target = by_color[color]
    half = config.CLEVR_IMAGE_SIZE // 2

    if not relational:
        if subtype == 0:
            return ANSWER_VOCABULARY.index(SHAPE_NAMES[target.shape])
        if subtype == 1:
            return ANSWER_VOCABULARY.index("yes" if target.y < half else "no")
        if subtype == 2:
            return ANSWER_VOCABULARY.index("yes" if target.x < half else "no")
        raise ContractError(f"unknown non-relational subtype {subtype}")

    others = [obj for obj in objects if obj is not target]
    distances = [(obj.x - target.x) ** 2 + (obj.y - target.y) ** 2 for obj in others]
    if subtype == 0:
        return ANSWER_VOCABULARY.index(SHAPE_NAMES[others[int(np.argmin(distances))].shape])
    if subtype == 1:
        return ANSWER_VOCABULARY.index(SHAPE_NAMES[others[int(np.argmax(distances))].shape])
    if subtype == 2:
        return _count_answer(sum(1 for obj in objects if obj.shape == target.shape))
    raise ContractError(f"unknown relational subtype {subtype}")


def _place_objects(rng: np.random.Generator) -> List[ClevrObject]:
    size = config.CLEVR_OBJECT_SIZE
    limit = config.CLEVR_IMAGE_SIZE - size
    min_dist2 = config.CLEVR_MIN_CENTER_DISTANCE ** 2
    centers: List[Tuple[int, int]] = []
    while len(centers) < OBJECTS_PER_IMAGE:
        x, y = (int(v) for v in rng.integers(size, limit, size=2))
        if all((x - cx) ** 2 + (y - cy) ** 2 >= min_dist2 for cx, cy in centers):
            centers.append((x, y))
    shapes = rng.integers(0, len(SHAPE_NAMES), size=OBJECTS_PER_IMAGE)
    return [ClevrObject(color=i, shape=int(shapes[i]), x=x, y=y) for i, (x, y) in enumerate(centers)]


def render_scene(objects: Sequence[ClevrObject]) -> np.ndarray:
    """RGB float32 image in [0, 1] on a white background."""
    size = config.CLEVR_IMAGE_SIZE
    radius = config.CLEVR_OBJECT_SIZE
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    for obj in objects:
        color = COLOR_VALUES[obj.color]
        if obj.shape == 0:
            cv2.rectangle(canvas, (obj.x - radius, obj.y - radius), (obj.x + radius, obj.y + radius), color, -1)
        else:
            cv2.circle(canvas, (obj.x, obj.y), radius, color, -1)
    return canvas.astype(np.float32) / 255.0


def _draw_scene(seed: int, index: int, color_weights: np.ndarray,
                split: str) -> Tuple[List[ClevrObject], int, bool, int]:
    rng = make_rng(seed, STREAM_CLEVR, SPLITS[split], index)
    objects = _place_objects(rng)
    color = int(rng.choice(len(COLOR_NAMES), p=color_weights))
    relational = bool(rng.integers(0, 2))
    subtype = int(rng.integers(0, 3))
    return objects, color, relational, subtype


def generate_sample(seed: int, index: int, color_weights: np.ndarray, split: str = "train") -> SortOfClevrSample:
    objects, color, relational, subtype = _draw_scene(seed, index, color_weights, split)
    return SortOfClevrSample(
        image=render_scene(objects),
        objects=objects,
        question=encode_question(color, relational, subtype),
        answer=answer_question(objects, color, relational, subtype),
    )


class SortOfClevrDataset(SequenceABC):
    """Lazily generated split; sample ``i`` depends only on (seed, split, i)."""

    def __init__(self, seed: int, count: int, imbalance: Optional[ImbalanceSpec] = None, split: str = "train"):
        if count < 1:
            raise ContractError(f"count must be >= 1, got {count}")
        if split not in SPLITS:
            raise ContractError(f"unknown split '{split}', expected one of {list(SPLITS)}")
        self.seed = seed
        self.count = count
        self.imbalance = imbalance
        self.split = split
        weights = imbalance.weights(len(COLOR_NAMES)) if imbalance else [1.0 / len(COLOR_NAMES)] * len(COLOR_NAMES)
        self.color_weights = np.asarray(weights, dtype=np.float64)

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: Union[int, slice]):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self.count))]
        if index < 0:
            index += self.count
        if not 0 <= index < self.count:
            raise IndexError(f"sample {index} outside a split of {self.count}")
        return generate_sample(self.seed, index, self.color_weights, self.split)

    def __iter__(self) -> Iterator[SortOfClevrSample]:
        for i in range(self.count):
            yield self[i]

    def question_colors(self) -> np.ndarray:
        """Queried color of every sample, without rendering the images."""
        return np.array([_draw_scene(self.seed, i, self.color_weights, self.split)[1] for i in range(self.count)],
                        dtype=np.int64)

    def batch(self, indices: Sequence[int]) -> Dict[str, np.ndarray]:
        samples = [self[int(i)] for i in indices]
        return {
            "images": np.stack([s.image for s in samples]).astype(np.float64),
            "questions": np.stack([s.question for s in samples]).astype(np.float64),
            "answers": np.array([s.answer for s in samples], dtype=np.int64),
            "relational": np.array([s.relational for s in samples], dtype=bool),
            "colors": np.array([s.question_color for s in samples], dtype=np.int64),
        }


def gen_sort_of_clevr(seed: int, count: int, imbalance: Optional[ImbalanceSpec] = None,
                      split: str = "train") -> SortOfClevrDataset:
    return SortOfClevrDataset(seed, count, imbalance=imbalance, split=split)


# split files: per record a little-endian uint32 payload length, then the payload

def _encode_record(sample: SortOfClevrSample) -> bytes:
    objects = np.array([[o.color, o.shape, o.x, o.y] for o in sample.objects], dtype="<i4")
    payload = b"".join([
        np.asarray(sample.image, dtype="<f4").tobytes(),
        np.asarray(sample.question, dtype="<f4").tobytes(),
        struct.pack("<i", sample.answer),
        objects.tobytes(),
    ])
    return struct.pack("<I", len(payload)) + payload


def _decode_record(payload: bytes) -> SortOfClevrSample:
    size = config.CLEVR_IMAGE_SIZE
    image_bytes = size * size * 3 * 4
    question_bytes = QUESTION_LENGTH * 4
    expected = image_bytes + question_bytes + 4 + OBJECTS_PER_IMAGE * 16
    if len(payload) != expected:
        raise DimensionError(f"record of {len(payload)} bytes, expected {expected}")
    image = np.frombuffer(payload, dtype="<f4", count=size * size * 3).reshape(size, size, 3).astype(np.float32)
    question = np.frombuffer(payload, dtype="<f4", count=QUESTION_LENGTH, offset=image_bytes).astype(np.float32)
    (answer,) = struct.unpack_from("<i", payload, image_bytes + question_bytes)
    raw = np.frombuffer(payload, dtype="<i4", offset=image_bytes + question_bytes + 4).reshape(OBJECTS_PER_IMAGE, 4)
    objects = [ClevrObject(color=int(c), shape=int(s), x=int(x), y=int(y)) for c, s, x, y in raw]
    return SortOfClevrSample(image=image, objects=objects, question=question, answer=int(answer))


def write_split(path: Path, samples: Iterable[SortOfClevrSample]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with open(path, "wb") as handle:
        for sample in samples:
            handle.write(_encode_record(sample))
            written += 1
    logger.info(f"Wrote {written} records to {path}")
    return path


def read_sort_of_clevr_split(path: Path) -> List[SortOfClevrSample]:
    samples = []
    with open(path, "rb") as handle:
        while True:
            prefix = handle.read(4)
            if not prefix:
                break
            if len(prefix) != 4:
                raise DimensionError(f"truncated length prefix in {path}")
            (length,) = struct.unpack("<I", prefix)
            payload = handle.read(length)
            if len(payload) != length:
                raise DimensionError(f"truncated record in {path}")
            samples.append(_decode_record(payload))
    return samples


def save_previews(samples: Sequence[SortOfClevrSample], directory: Path) -> List[str]:
    """PNG per sample plus ``captions.txt`` with the question and answer of each."""
    if not PREVIEW_AVAILABLE:
        logger.warning("Skipping previews: Pillow is not installed")
        return []
    ensure_dir(str(directory))
    paths, captions = [], []
    for i, sample in enumerate(samples):
        path = directory / f"sample_{i:03d}.png"
        Image.fromarray(np.round(sample.image * 255.0).astype(np.uint8)).save(path)
        paths.append(str(path))
        captions.append(f"{path.name}\t{sample.describe()}\n")
    (directory / PREVIEW_CAPTIONS).write_text("".join(captions))
    return paths


def dump_sort_of_clevr(out_dir: Path, seed: int, counts: Dict[str, int],
                       imbalance: Optional[ImbalanceSpec] = None,
                       previews: int = config.CLEVR_PREVIEW_COUNT) -> DatasetManifest:
    """Write one split file per entry of ``counts`` plus ``manifest.json``.

    The imbalance applies to the ``train`` and ``long-tail`` splits; ``test``
    stays balanced.
    """
    out_dir = ensure_dir(str(out_dir))
    files = {}
    for split, count in counts.items():
        skewed = imbalance if split != "test" else None
        dataset = gen_sort_of_clevr(seed, count, imbalance=skewed, split=split)
        files[split] = write_split(out_dir / f"{split}.bin", dataset).name
        if previews:
            save_previews(dataset[:previews], out_dir / f"{split}_previews")

    manifest = DatasetManifest(
        seed=seed,
        counts=dict(counts),
        imbalance=imbalance,
        image_size=config.CLEVR_IMAGE_SIZE,
        objects_per_image=OBJECTS_PER_IMAGE,
        question_length=QUESTION_LENGTH,
        answer_vocabulary=ANSWER_VOCABULARY,
        record_layout=RECORD_LAYOUT,
        files=files,
    )
    (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Dataset manifest written to {out_dir / 'manifest.json'}")
    return manifest


def read_manifest(path: Path) -> DatasetManifest:
    return DatasetManifest.model_validate(json.loads(Path(path).read_text()))
