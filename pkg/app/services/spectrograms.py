"""
Spectrogram data: MELF files, manifests, the synthetic chirp task and batching

MELF layout (little-endian):

    "MELF" | u32 version=1 | u32 n_mels | u32 n_frames | f32 data[n_mels * n_frames]

Mel bins are rows, frames are columns, row-major.
"""

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from app.exceptions import ConfigError, ContractError, FormatError
from app.models import CuePosition, SyntheticTaskSpec
from app.services.augment import SoftLabelBatch
from app.utils.binio import ByteReader, write_f32, write_scalar
from app.utils.config_io import parse_config
from app.utils.helpers import sanitize_filename
from app.utils.rng import PURPOSES, philox

logger = logging.getLogger(__name__)

MELF_MAGIC = b"MELF"
MELF_VERSION = 1
MELF_HEADER_BYTES = 16
TEMPLATE_SIGMA = 1.0

SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class MelSpectrogram:
    """One log-mel spectrogram [n_mels, n_frames]"""
    data: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ContractError(f"spectrogram must be a non-empty 2D array, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ContractError(f"spectrogram '{self.sample_id}' contains non-finite values")

    @property
    def n_mels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def to_tensor(self) -> torch.Tensor:
        """[1, n_mels, n_frames] float32"""
        return torch.from_numpy(self.data.copy()).unsqueeze(0)


def write_melf(spec: MelSpectrogram, sink: BinaryIO) -> None:
    sink.write(MELF_MAGIC)
    write_scalar(sink, "<u4", MELF_VERSION)
    write_scalar(sink, "<u4", spec.n_mels)
    write_scalar(sink, "<u4", spec.n_frames)
    write_f32(sink, spec.data)


def read_melf(source: Union[BinaryIO, bytes], sample_id: str = "") -> MelSpectrogram:
    """
    Parse one MELF stream

    Raises:
        FormatError: bad magic, version, zero dims, truncation or trailing bytes (with byte offset)
    """
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    reader = ByteReader(bytes(data), sample_id or "MELF")
    reader.magic(MELF_MAGIC)
    offset = reader.offset
    version = reader.scalar("<u4", "version")
    if version != MELF_VERSION:
        raise FormatError(f"unsupported MELF version {version}", offset=offset)
    offset = reader.offset
    n_mels = reader.scalar("<u4", "n_mels")
    n_frames = reader.scalar("<u4", "n_frames")
    if n_mels == 0 or n_frames == 0:
        raise FormatError(f"MELF dims must be positive, got {n_mels}x{n_frames}", offset=offset)
    values = reader.array("<f4", n_mels * n_frames, "spectrogram data")
    if not reader.at_end():
        raise FormatError(f"{reader.remaining} trailing bytes after spectrogram data", offset=reader.offset)
    matrix = values.astype(np.float32).reshape(n_mels, n_frames)
    if not np.isfinite(matrix).all():
        bad = int(np.flatnonzero(~np.isfinite(matrix.ravel()))[0])
        raise FormatError("spectrogram contains non-finite values", offset=MELF_HEADER_BYTES + 4 * bad)
    return MelSpectrogram(matrix, sample_id)


def save_melf(path: Union[str, Path], spec: MelSpectrogram) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    write_melf(spec, buffer)
    path.write_bytes(buffer.getvalue())
    return path


def load_melf(path: Union[str, Path]) -> MelSpectrogram:
    path = Path(path)
    return read_melf(path.read_bytes(), sample_id=path.stem)


# ----------------------------------------------------------------------------
# Manifests
# ----------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: Path
    labels: Tuple[int, ...]
    weights: Optional[Tuple[float, ...]] = None

    def target(self, num_classes: int) -> np.ndarray:
        """Probability vector over classes; labels share mass equally unless weights are given"""
        row = np.zeros(num_classes, dtype=np.float64)
        weights = self.weights or tuple(1.0 for _ in self.labels)
        for label, weight in zip(self.labels, weights):
            row[label] += weight
        return row / row.sum()


@dataclass
class Manifest:
    """
    Tab-separated `relpath<TAB>labels[<TAB>weights]` lines

    Header directives `#! key=value` set num_classes, split, mean and std;
    other `#` lines and blank lines are ignored.
    """
    entries: List[ManifestEntry]
    num_classes: int
    split: str = "train"
    root: Path = Path(".")
    mean: float = 0.0
    std: float = 1.0


def _parse_ints(text: str, line: int) -> Tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise FormatError(f"labels must be comma-separated integers, got '{text}'", line=line) from e
    if not values:
        raise FormatError("entry has no labels", line=line)
    return values


def parse_manifest(text: str, root: Union[str, Path] = ".", num_classes: Optional[int] = None) -> Manifest:
    directives = {}
    rows = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#!"):
            key, sep, value = line[2:].partition("=")
            if not sep:
                raise FormatError(f"directive must be '#! key=value', got '{line}'", line=number)
            directives[key.strip().lower()] = (value.strip(), number)
            continue
        if line.startswith("#"):
            continue
        parts = raw.rstrip("\r\n").split("\t")
        if len(parts) not in (2, 3) or not parts[0].strip():
            raise FormatError(f"expected 'path<TAB>labels[<TAB>weights]', got '{line}'", line=number)
        labels = _parse_ints(parts[1], number)
        weights = None
        if len(parts) == 3:
            try:
                weights = tuple(float(w) for w in parts[2].split(","))
            except ValueError as e:
                raise FormatError(f"weights must be comma-separated numbers, got '{parts[2]}'", line=number) from e
            if len(weights) != len(labels) or any(w < 0 for w in weights) or sum(weights) <= 0:
                raise FormatError("weights must be non-negative, one per label, with a positive sum", line=number)
        rows.append((number, ManifestEntry(Path(parts[0].strip()), labels, weights)))

    def directive(key: str, cast, default):
        if key not in directives:
            return default
        value, number = directives[key]
        try:
            return cast(value)
        except ValueError as e:
            raise FormatError(f"bad value for '{key}': '{value}'", line=number) from e

    declared = directive("num_classes", int, None)
    if num_classes is not None and declared is not None and declared != num_classes:
        raise ConfigError(f"manifest declares num_classes={declared}, expected {num_classes}", ["num_classes"])
    num_classes = num_classes or declared
    if num_classes is None:
        num_classes = 1 + max((max(entry.labels) for _, entry in rows), default=0)
    for number, entry in rows:
        bad = [label for label in entry.labels if not 0 <= label < num_classes]
        if bad:
            raise FormatError(f"label {bad[0]} out of range for num_classes={num_classes}", line=number)

    std = directive("std", float, 1.0)
    if std <= 0:
        raise FormatError(f"std must be positive, got {std}", line=directives["std"][1])
    return Manifest(
        entries=[entry for _, entry in rows],
        num_classes=num_classes,
        split=directive("split", str, "train"),
        root=Path(root),
        mean=directive("mean", float, 0.0),
        std=std,
    )


def load_manifest(path: Union[str, Path], num_classes: Optional[int] = None, check_paths: bool = False) -> Manifest:
    """
    Read a manifest; entry paths are relative to the manifest's directory

    Raises:
        FormatError: malformed line or out-of-range label, naming the line
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Manifest not found: {path}", ["data"])
    manifest = parse_manifest(path.read_text(encoding="utf-8"), root=path.parent, num_classes=num_classes)
    if check_paths:
        missing = [str(e.path) for e in manifest.entries if not (manifest.root / e.path).is_file()]
        if missing:
            raise FormatError(f"{len(missing)} manifest entries do not resolve, first: {missing[0]}")
    logger.info("📋 Loaded manifest %s: %d entries, %d classes", path, len(manifest.entries), manifest.num_classes)
    return manifest


def manifest_text(manifest: Manifest) -> str:
    lines = [
        f"#! num_classes={manifest.num_classes}",
        f"#! split={manifest.split}",
        f"#! mean={manifest.mean!r}",
        f"#! std={manifest.std!r}",
    ]
    for entry in manifest.entries:
        line = f"{entry.path.as_posix()}\t{','.join(str(label) for label in entry.labels)}"
        if entry.weights is not None:
            line += "\t" + ",".join(repr(w) for w in entry.weights)
        lines.append(line)
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------------

@dataclass
class SpectrogramDataset:
    """In-memory dataset: inputs [N, 1, n_mels, n_frames], soft targets [N, K], primary labels [N]"""
    inputs: torch.Tensor
    targets: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    sample_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.inputs):
            raise ContractError("dataset is empty")
        if not self.sample_ids:
            self.sample_ids = [f"sample_{i:06d}" for i in range(len(self.inputs))]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_size(self) -> Tuple[int, int]:
        return tuple(self.inputs.shape[-2:])

    def batch(self, indices: Sequence[int], dtype: torch.dtype = torch.float32) -> SoftLabelBatch:
        index = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return SoftLabelBatch(self.inputs[index].to(dtype), self.targets[index].to(dtype))

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "SpectrogramDataset":
        if not manifest.entries:
            raise ContractError("manifest has no entries")
        specs = [load_melf(manifest.root / entry.path) for entry in manifest.entries]
        shapes = {spec.data.shape for spec in specs}
        if len(shapes) != 1:
            raise ContractError(f"manifest mixes spectrogram shapes {sorted(shapes)}")
        stacked = np.stack([spec.data for spec in specs])
        inputs = (torch.from_numpy(stacked).unsqueeze(1) - manifest.mean) / manifest.std
        targets = torch.from_numpy(np.stack([e.target(manifest.num_classes) for e in manifest.entries]))
        labels = torch.tensor([int(np.argmax(e.target(manifest.num_classes))) for e in manifest.entries])
        return cls(inputs.float(), targets, labels, manifest.num_classes, [spec.sample_id for spec in specs])


# ----------------------------------------------------------------------------
# Synthetic chirp task
# ----------------------------------------------------------------------------

def cue_length(n_frames: int) -> int:
    return max(2, n_frames // 10)


def chirp_template(label: int, task: SyntheticTaskSpec) -> np.ndarray:
    """
    Unit-peak time-frequency track for class `label`, shape [n_mels, cue_length]

    Class k owns the band centred at (k + 0.5) * n_mels / K; its track sweeps a
    quarter of the band width around the centre, upward for even k and
    downward for odd k, under a Gaussian profile of width TEMPLATE_SIGMA bins.
    """
    K, n_mels = task.num_classes, task.n_mels
    length = cue_length(task.n_frames)
    band = n_mels / K
    centre = (label + 0.5) * band
    sweep = 0.25 * band * (1.0 if label % 2 == 0 else -1.0)
    tau = np.linspace(-1.0, 1.0, length)
    track = centre + sweep * tau
    bins = np.arange(n_mels, dtype=np.float64)[:, None]
    return np.exp(-((bins - track[None, :]) ** 2) / (2.0 * TEMPLATE_SIGMA ** 2))


def chirp_templates(task: SyntheticTaskSpec) -> np.ndarray:
    """[K, n_mels, cue_length]"""
    return np.stack([chirp_template(k, task) for k in range(task.num_classes)])


def cue_onset_range(task: SyntheticTaskSpec) -> Tuple[int, int]:
    """Inclusive range of cue start frames"""
    length = cue_length(task.n_frames)
    last = task.n_frames - length
    if task.cue_position is CuePosition.EARLY_10PCT:
        last = min(last, max(0, math.ceil(0.1 * task.n_frames) - length))
    return 0, max(last, 0)


def gen_synthetic(task: SyntheticTaskSpec, n: int, split: str = "train") -> SpectrogramDataset:
    """
    Noise background plus one class chirp per sample

    The cue amplitude is 10^(snr_db/20) against unit-variance noise; an
    infinite SNR gives unit amplitude and no noise. Deterministic in
    (task.seed, split).
    """
    if task.num_classes < 2:
        raise ConfigError("synthetic task needs at least 2 classes", ["num_classes"])
    if n < 1:
        raise ContractError(f"sample count must be positive, got {n}")
    if split not in SPLITS:
        raise ContractError(f"unknown split '{split}', expected one of {sorted(SPLITS)}")
    generator = philox(task.seed, PURPOSES["data"], SPLITS[split])
    templates = chirp_templates(task)
    length = templates.shape[-1]
    if math.isinf(task.snr_db) and task.snr_db > 0:
        amplitude, noise_std = 1.0, 0.0
    else:
        amplitude, noise_std = 10.0 ** (task.snr_db / 20.0), 1.0

    labels = generator.integers(task.num_classes, size=n)
    low, high = cue_onset_range(task)
    onsets = generator.integers(low, high + 1, size=n)
    data = generator.standard_normal((n, task.n_mels, task.n_frames)) * noise_std
    for i, (label, onset) in enumerate(zip(labels, onsets)):
        data[i, :, onset:onset + length] += amplitude * templates[label]

    inputs = torch.from_numpy(data.astype(np.float32)).unsqueeze(1)
    label_tensor = torch.from_numpy(labels.astype(np.int64))
    targets = F.one_hot(label_tensor, task.num_classes).double()
    ids = [f"{split}_{i:06d}" for i in range(n)]
    return SpectrogramDataset(inputs, targets, label_tensor, task.num_classes, ids)


def matched_filter_classify(inputs: torch.Tensor, task: SyntheticTaskSpec) -> torch.Tensor:
    """
    Nearest-template classifier: max over onsets of the normalised
    cross-correlation with each class template

    Args:
        inputs: [N, 1, n_mels, n_frames]

    Returns:
        Predicted labels [N]
    """
    templates = torch.from_numpy(chirp_templates(task)).to(inputs.dtype)
    norms = templates.flatten(1).norm(dim=1)
    scores = F.conv2d(inputs, templates.unsqueeze(1))
    scores = scores.amax(dim=(-2, -1)) / norms
    return scores.argmax(dim=1)


def export_dataset(dataset: SpectrogramDataset, out_dir: Union[str, Path], split: str) -> Path:
    """Write one MELF per sample under out_dir/split/ and a manifest out_dir/<split>.tsv"""
    out_dir = Path(out_dir)
    entries = []
    for sample_id, spectrogram, target in zip(dataset.sample_ids, dataset.inputs, dataset.targets):
        relpath = Path(split) / f"{sanitize_filename(sample_id)}.melf"
        save_melf(out_dir / relpath, MelSpectrogram(spectrogram[0].numpy(), sample_id))
        labels = tuple(int(i) for i in torch.nonzero(target > 0).flatten())
        weights = None if len(labels) == 1 else tuple(float(target[i]) for i in labels)
        entries.append(ManifestEntry(relpath, labels, weights))
    manifest = Manifest(entries, dataset.num_classes, split=split, root=out_dir)
    path = out_dir / f"{split}.tsv"
    path.write_text(manifest_text(manifest), encoding="utf-8")
    logger.info("💾 Wrote %d %s spectrograms to %s", len(entries), split, out_dir)
    return path


def parse_synthetic_arg(arg: str) -> SyntheticTaskSpec:
    """`synthetic:key=value,key=value` -> SyntheticTaskSpec"""
    body = arg.split(":", 1)[1] if ":" in arg else ""
    values = {}
    for item in filter(None, (part.strip() for part in body.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"synthetic data option must be key=value, got '{item}'", ["data"])
        values[key] = value
    return parse_config(values, SyntheticTaskSpec)


def open_datasets(
    data: str,
    val_data: Optional[str] = None,
    num_classes: Optional[int] = None,
) -> Tuple[SpectrogramDataset, Optional[SpectrogramDataset]]:
    """Resolve the CLI --data/--val-data arguments into (train, val) datasets"""
    if data.startswith("synthetic"):
        task = parse_synthetic_arg(data)
        train = gen_synthetic(task, task.n_train, "train")
        val = gen_synthetic(task, task.n_val, "val") if task.n_val else None
    else:
        train = SpectrogramDataset.from_manifest(load_manifest(data, num_classes, check_paths=True))
        val = None
    if val_data is not None:
        val = SpectrogramDataset.from_manifest(load_manifest(val_data, train.num_classes, check_paths=True))
    return train, val


# ----------------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------------

@dataclass
class BatchIndices:
    indices: np.ndarray
    epoch: int
    short: bool = False


def batch_iter(
    size: Union[int, SpectrogramDataset],
    batch_size: int,
    shuffle_seed: Optional[int],
    epoch: int = 0,
) -> Iterator[BatchIndices]:
    """
    One epoch of index batches

    The order is a permutation drawn from the "shuffle" stream of
    (shuffle_seed, epoch); None keeps dataset order. A final short batch is
    emitted with short=True.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = size if isinstance(size, int) else len(size)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = philox(shuffle_seed, PURPOSES["shuffle"], epoch).permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        yield BatchIndices(chunk, epoch, short=len(chunk) < batch_size)


def endless_batches(size: int, batch_size: int, shuffle_seed: Optional[int]) -> Iterator[BatchIndices]:
    """Consecutive epochs of batch_iter"""
    epoch = 0
    while True:
        yield from batch_iter(size, batch_size, shuffle_seed, epoch)
        epoch += 1
