"""
Synthetic Data for the JointSR Project
Deterministic text-line rendering, paired HR/LR sample synthesis, on-disk datasets with a
TSV manifest and a seeded train/test split, and step-indexed batch sources for training.
"""

import logging
import os
import shutil
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from engine.trainer import TrainTriple
from synth.degradation import DegradeSpec, degrade
from synth.glyphs import GLYPH_COLS, GLYPH_ROWS, draw_glyph, supported_glyphs
from synth.vocab import DEFAULT_CHARSET, Vocabulary
from utils.exceptions import DatasetError, DatasetIOError
from utils.image_io import from_uint8, load_image, save_image
from utils.seeding import make_generator, make_numpy_rng, substream_seed

MANIFEST_COLUMNS = ["hr_path", "lr_path", "transcription"]
MANIFEST_FILE = "manifest.tsv"
TRAIN_FILE = "train.tsv"
TEST_FILE = "test.tsv"
GLYPH_HEIGHT_FRACTION = 0.6
LETTER_SPACING = 1.3

logger = logging.getLogger(__name__)


@dataclass
class RenderSpec:
    """
    Text-line rendering settings.

    Glyph ``charset[i]`` is vocabulary id i; PAD is ``len(charset)``.
    Intensities are in [-1, 1]; jitter is a fraction of the glyph height.
    """

    charset: str = DEFAULT_CHARSET
    canvas: Tuple[int, int] = (32, 128)
    text_len: Tuple[int, int] = (4, 4)
    fg_range: Tuple[float, float] = (-1.0, -0.5)
    bg_range: Tuple[float, float] = (0.3, 1.0)
    jitter: float = 0.06
    channels: int = 3
    supersample: int = 4
    min_cell_width: int = 5

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.text_len = tuple(int(v) for v in self.text_len)
        unknown = set(self.charset) - set(supported_glyphs())
        if unknown:
            raise DatasetError(f"No glyph bitmaps for {sorted(unknown)}")
        lo, hi = self.text_len
        if not 1 <= lo <= hi:
            raise DatasetError(f"text_len must satisfy 1 <= min <= max, got {self.text_len}")
        if hi > self.capacity:
            raise DatasetError(f"text_len max {hi} exceeds canvas capacity {self.capacity}")
        if self.channels not in (1, 3):
            raise DatasetError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def capacity(self) -> int:
        """Most glyphs that fit on one line."""
        return self.canvas[1] // self.min_cell_width

    def vocabulary(self, seq_len: int) -> Vocabulary:
        return Vocabulary(charset=self.charset, seq_len=seq_len)


def _gray_level(value: float) -> int:
    return int(np.rint((np.clip(value, -1.0, 1.0) + 1.0) * 127.5))


def render(text: Sequence[int], spec: RenderSpec, seed: int) -> torch.Tensor:
    """
    Draw a token sequence as a centered, left-to-right line of glyphs.

    Args:
        text: Glyph ids and PAD ids; PAD renders nothing
        spec: Rendering settings
        seed: Seed for intensities and glyph jitter

    Returns:
        (channels, H, W) float32 tensor in [-1, 1]

    Raises:
        DatasetError: On ids that are neither glyphs nor PAD, or more glyphs than the canvas holds
    """
    pad_id = len(spec.charset)
    ids = [int(i) for i in text]
    if any(i < 0 or i > pad_id for i in ids):
        raise DatasetError(f"Render ids must be glyphs or PAD (<= {pad_id}), got {ids}")
    glyph_ids = [i for i in ids if i != pad_id]
    if len(glyph_ids) > spec.capacity:
        raise DatasetError(f"{len(glyph_ids)} glyphs exceed canvas capacity {spec.capacity}")

    rng = make_numpy_rng(seed)
    background = rng.uniform(*spec.bg_range)
    foreground = rng.uniform(*spec.fg_range)

    height, width = spec.canvas
    ss = spec.supersample
    canvas = Image.new("L", (width * ss, height * ss), color=_gray_level(background))
    draw = ImageDraw.Draw(canvas)

    count = len(glyph_ids)
    if count:
        glyph_h = height * GLYPH_HEIGHT_FRACTION
        glyph_w = glyph_h * GLYPH_COLS / GLYPH_ROWS
        cell_w = min(glyph_w * LETTER_SPACING, width * 0.95 / count)
        glyph_w = min(glyph_w, cell_w / LETTER_SPACING)
        glyph_h = glyph_w * GLYPH_ROWS / GLYPH_COLS
        left = (width - count * cell_w) / 2
        top = (height - glyph_h) / 2
        for k, glyph_id in enumerate(glyph_ids):
            dx, dy = rng.uniform(-spec.jitter, spec.jitter, size=2) * glyph_h
            draw_glyph(
                draw, spec.charset[glyph_id],
                (left + k * cell_w + (cell_w - glyph_w) / 2 + dx) * ss,
                (top + dy) * ss,
                glyph_w * ss, glyph_h * ss,
                fill=_gray_level(foreground),
            )

    line = canvas.resize((width, height), Image.BOX)
    gray = from_uint8(np.asarray(line, dtype=np.uint8))
    return gray.expand(spec.channels, -1, -1).contiguous()


def random_text(rng: np.random.Generator, spec: RenderSpec) -> str:
    length = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
    return "".join(spec.charset[i] for i in rng.integers(0, len(spec.charset), size=length))


def synthesize_sample(index: int, seed: int, render_spec: RenderSpec, degrade_spec: DegradeSpec,
                      vocab: Vocabulary) -> Tuple[torch.Tensor, torch.Tensor, str]:
    """
    Sample ``index`` of the stream rooted at ``seed``: (hr, lr, transcription).

    Each sample draws from its own (seed, index) substream.
    """
    text = random_text(make_numpy_rng(substream_seed(seed, "data", index, 0)), render_spec)
    hr = render(vocab.encode(text), render_spec, substream_seed(seed, "data", index, 1))
    lr = degrade(hr, degrade_spec, substream_seed(seed, "data", index, 2))
    return hr, lr, text


@dataclass
class ManifestRecord:
    hr_path: str
    lr_path: str
    transcription: str


@dataclass
class Manifest:
    """
    Records with image paths relative to ``root`` (the manifest's directory).
    """

    root: str
    records: List[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, path: str) -> str:
        return os.path.join(self.root, path)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.records], columns=MANIFEST_COLUMNS)

    def save(self, filename: str) -> str:
        """Write the records as a tab-separated file under ``root``."""
        path = os.path.join(self.root, filename)
        try:
            self.to_frame().to_csv(path, sep="\t", index=False, lineterminator="\n", encoding="utf-8")
        except OSError as e:
            raise DatasetIOError(path, str(e)) from e
        return path

    @classmethod
    def load(cls, path: str) -> "Manifest":
        """
        Raises:
            DatasetIOError: If the file is missing or unreadable
            DatasetError: If required columns are missing
        """
        try:
            frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False, encoding="utf-8")
        except (OSError, pd.errors.ParserError) as e:
            raise DatasetIOError(path, str(e)) from e
        missing = set(MANIFEST_COLUMNS) - set(frame.columns)
        if missing:
            raise DatasetError(f"Manifest {path} lacks columns {sorted(missing)}")
        records = [ManifestRecord(*row) for row in frame[MANIFEST_COLUMNS].itertuples(index=False, name=None)]
        return cls(root=os.path.dirname(os.path.abspath(path)), records=records)


def split_indices(count: int, test_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Seeded shuffle into (train, test) index lists, each sorted."""
    if count < 2 or test_fraction <= 0:
        return list(range(count)), []
    n_test = min(count - 1, max(1, int(round(count * test_fraction))))
    order = make_numpy_rng(substream_seed(seed, "data", "split")).permutation(count)
    return sorted(int(i) for i in order[n_test:]), sorted(int(i) for i in order[:n_test])


def _write_image(path: str, image: torch.Tensor) -> None:
    try:
        save_image(path, image)
    except OSError as e:
        raise DatasetIOError(path, str(e)) from e


def _swap_in(staging_dir: str, output_dir: str) -> None:
    """Replace ``output_dir`` with the finished ``staging_dir``."""
    try:
        if os.path.isdir(output_dir):
            shutil.rmtree(output_dir)
        os.replace(staging_dir, output_dir)
    except OSError as e:
        raise DatasetIOError(output_dir, str(e)) from e


def make_dataset(count: int, render_spec: RenderSpec, degrade_spec: DegradeSpec, seed: int,
                 output_dir: str, vocab: Vocabulary, test_fraction: float = 0.1) -> Dict[str, Manifest]:
    """
    Render, degrade and write ``count`` samples plus their manifests.

    Layout: ``hr/NNNNNN.png``, ``lr/NNNNNN.png``, ``manifest.tsv`` (all records),
    ``train.tsv`` and ``test.tsv``. Everything is written to ``<output_dir>.tmp`` and
    moved into place at the end, so ``output_dir`` holds either the previous dataset
    or the complete new one.

    Returns:
        Manifests keyed by "all", "train", "test"

    Raises:
        DatasetError: If count < 1
        DatasetIOError: On write failures, carrying the failing path
    """
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    output_dir = os.path.normpath(output_dir)
    staging_dir = f"{output_dir}.tmp"
    shutil.rmtree(staging_dir, ignore_errors=True)

    try:
        try:
            os.makedirs(staging_dir)
        except OSError as e:
            raise DatasetIOError(staging_dir, str(e)) from e
        records = []
        for index in range(count):
            hr, lr, text = synthesize_sample(index, seed, render_spec, degrade_spec, vocab)
            hr_rel = os.path.join("hr", f"{index:06d}.png")
            lr_rel = os.path.join("lr", f"{index:06d}.png")
            _write_image(os.path.join(staging_dir, hr_rel), hr)
            _write_image(os.path.join(staging_dir, lr_rel), lr)
            records.append(ManifestRecord(hr_rel, lr_rel, text))

        train_ids, test_ids = split_indices(count, test_fraction, seed)
        splits = {"all": records, "train": [records[i] for i in train_ids], "test": [records[i] for i in test_ids]}
        for key, filename in (("all", MANIFEST_FILE), ("train", TRAIN_FILE), ("test", TEST_FILE)):
            Manifest(staging_dir, splits[key]).save(filename)
        _swap_in(staging_dir, output_dir)
    except Exception:
        shutil.rmtree(staging_dir, ignore_errors=True)
        raise

    logger.info(f"Dataset written to {output_dir}: {len(train_ids)} train / {len(test_ids)} test")
    return {key: Manifest(output_dir, split) for key, split in splits.items()}


Item = Tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class ManifestDataset(Dataset):
    """Static dataset read from a manifest; items are (hr, lr, ids)."""

    def __init__(self, manifest: Manifest, vocab: Vocabulary, channels: int = 3):
        if len(manifest) == 0:
            raise DatasetError(f"Manifest under {manifest.root} has no records")
        self.manifest = manifest
        self.vocab = vocab
        self.channels = channels

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> Item:
        record = self.manifest.records[index]
        hr = load_image(self.manifest.resolve(record.hr_path), self.channels)
        lr = load_image(self.manifest.resolve(record.lr_path), self.channels)
        return hr, lr, torch.tensor(self.vocab.encode(record.transcription), dtype=torch.long)


class SyntheticDataset(Dataset):
    """Online synthesis: item ``index`` is rendered and degraded on demand."""

    def __init__(self, render_spec: RenderSpec, degrade_spec: DegradeSpec, vocab: Vocabulary,
                 seed: int, length: Optional[int] = None):
        self.render_spec = render_spec
        self.degrade_spec = degrade_spec
        self.vocab = vocab
        self.seed = seed
        self.length = length

    @property
    def infinite(self) -> bool:
        return self.length is None

    def __len__(self) -> int:
        if self.length is None:
            raise TypeError("SyntheticDataset without length is unbounded")
        return self.length

    def __getitem__(self, index: int) -> Item:
        hr, lr, text = synthesize_sample(index, self.seed, self.render_spec, self.degrade_spec, self.vocab)
        return hr, lr, torch.tensor(self.vocab.encode(text), dtype=torch.long)


def collate_triples(items: Sequence[Item]) -> TrainTriple:
    hr, lr, text = zip(*items)
    return TrainTriple(hr=torch.stack(hr), lr=torch.stack(lr), text=torch.stack(text))


class BatchSource:
    """
    Deterministic step -> batch mapping.

    Finite datasets are walked epoch by epoch in a per-epoch seeded permutation;
    unbounded synthetic datasets use consecutive indices.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self._permutations: Dict[int, torch.Tensor] = {}

    def _permutation(self, epoch: int, size: int) -> torch.Tensor:
        if epoch not in self._permutations:
            generator = make_generator(substream_seed(self.seed, "data", "epoch", epoch))
            self._permutations = {epoch: torch.randperm(size, generator=generator)}
        return self._permutations[epoch]

    def indices(self, step: int) -> List[int]:
        positions = range(step * self.batch_size, (step + 1) * self.batch_size)
        if getattr(self.dataset, "infinite", False):
            return list(positions)
        size = len(self.dataset)
        indices = []
        for position in positions:
            epoch, offset = divmod(position, size)
            indices.append(int(self._permutation(epoch, size)[offset]) if self.shuffle else offset)
        return indices

    def __call__(self, step: int) -> TrainTriple:
        return collate_triples([self.dataset[i] for i in self.indices(step)])
