"""
Manifest-based multispectral datasets.

A manifest is a text file::

    #channels=12 height=120 width=120 classes=43 task=multilabel bands=B01,B02,...
    samples/00000.vigt<TAB>3;7;12
    samples/00001.vigt<TAB>0

Each sample file is a tensor container holding one [h, w] array per band.
Bands coarser than the target grid are upsampled with align-corners bilinear
interpolation, then stacked in the declared band order.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, FormatError
from .tensor import Tensor, bilinear_resize
from .tensorfile import read_tensor_file, write_tensor_file

TASKS = ("multiclass", "multilabel")
NOISE_STD = 0.1
SIGNAL_AMPLITUDE = 1.0


@dataclass
class Manifest:
    channels: int
    height: int
    width: int
    classes: int
    task: str
    records: list                     # (relative path, tuple of labels)
    bands: Optional[list] = None
    root: str = "."

    def header(self) -> str:
        line = (f"#channels={self.channels} height={self.height} width={self.width} "
                f"classes={self.classes} task={self.task}")
        if self.bands:
            line += " bands=" + ",".join(self.bands)
        return line


def parse_labels(spec: str, num_classes: int, where: str = "") -> tuple:
    spec = spec.strip()
    if not spec:
        return ()
    try:
        labels = tuple(int(tok) for tok in spec.split(";"))
    except ValueError:
        raise DataError(f"{where}: label spec {spec!r} is not a ;-separated list of integers") from None
    for lab in labels:
        if not 0 <= lab < num_classes:
            raise DataError(f"{where}: label {lab} out of range [0, {num_classes})")
    return labels


def read_manifest(path) -> Manifest:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: first line must be the '#channels=... task=...' header")
    fields = {}
    for tok in lines[0][1:].split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise DataError(f"{path}: malformed header token {tok!r}")
        fields[key] = value
    try:
        channels, height, width, classes = (int(fields[k]) for k in ("channels", "height", "width", "classes"))
        task = fields["task"]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: header is missing or has a malformed field ({exc})") from None
    if task not in TASKS:
        raise DataError(f"{path}: task {task!r} not in {TASKS}")
    bands = fields["bands"].split(",") if fields.get("bands") else None
    if bands is not None and len(bands) != channels:
        raise DataError(f"{path}: header lists {len(bands)} bands but channels={channels}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        rel, sep, spec = line.partition("\t")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected 'path<TAB>labels'")
        labels = parse_labels(spec, classes, f"{path}:{lineno}")
        if task == "multiclass" and len(labels) != 1:
            raise DataError(f"{path}:{lineno}: multiclass record needs exactly one label")
        records.append((rel, labels))
    root = os.path.dirname(os.path.abspath(path))
    return Manifest(channels, height, width, classes, task, records, bands, root)


def write_manifest(path, manifest: Manifest) -> None:
    lines = [manifest.header()]
    for rel, labels in manifest.records:
        lines.append(f"{rel}\t{';'.join(str(l) for l in labels)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class Dataset:
    images: np.ndarray        # [S, C, H, W] float32
    labels: np.ndarray        # [S, N] multi-hot (one-hot for multiclass)
    task: str
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return Dataset(self.images[idx], self.labels[idx], self.task, paths)

    def targets(self) -> np.ndarray:
        """Class indices (multiclass) or the multi-hot matrix (multilabel)."""
        if self.task == "multiclass":
            return self.labels.argmax(axis=1)
        return self.labels


def label_vector(labels: Sequence[int], num_classes: int) -> np.ndarray:
    vec = np.zeros(num_classes, dtype=np.float32)
    vec[list(labels)] = 1.0
    return vec


def load_sample(path, band_names: Optional[Sequence[str]], height: int, width: int) -> np.ndarray:
    """Read one sample file and return its [C, height, width] float32 stack."""
    try:
        tensors = read_tensor_file(path)
    except OSError as exc:
        raise DataError(f"{path}: cannot read sample ({exc})") from None
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from None
    names = list(band_names) if band_names is not None else list(tensors)
    stack = []
    for name in names:
        if name not in tensors:
            raise DataError(f"{path}: band {name!r} missing (file has {sorted(tensors)})")
        band = tensors[name]
        if band.ndim == 3 and band.shape[0] == 1:
            band = band[0]
        if band.ndim != 2:
            raise DataError(f"{path}: band {name!r} must be 2-D, got shape {band.shape}")
        h, w = band.shape
        if (h, w) == (height, width):
            stack.append(band.astype(np.float32, copy=False))
        elif h <= height and w <= width:
            up = bilinear_resize(Tensor(band[None, None], dtype=np.float32), height, width)
            stack.append(up.data[0, 0])
        else:
            raise DataError(f"{path}: band {name!r} is {h}x{w}, larger than the {height}x{width} target")
    return np.stack(stack).astype(np.float32, copy=False)


def load_dataset(manifest_path, band_spec: Optional[Sequence[str]] = None) -> Dataset:
    """Load every record of a manifest into memory."""
    m = read_manifest(manifest_path)
    bands = list(band_spec) if band_spec is not None else m.bands
    if bands is not None and len(bands) != m.channels:
        raise DataError(f"band spec lists {len(bands)} bands but the manifest declares {m.channels} channels")
    images = np.empty((len(m.records), m.channels, m.height, m.width), dtype=np.float32)
    labels = np.zeros((len(m.records), m.classes), dtype=np.float32)
    paths = []
    for i, (rel, labs) in enumerate(m.records):
        full = os.path.join(m.root, rel)
        if not os.path.exists(full):
            raise DataError(f"{full}: sample file not found")
        img = load_sample(full, bands, m.height, m.width)
        if img.shape[0] != m.channels:
            raise DataError(f"{full}: {img.shape[0]} bands, manifest declares {m.channels}")
        images[i] = img
        labels[i] = label_vector(labs, m.classes)
        paths.append(rel)
    return Dataset(images, labels, m.task, paths)


def split_sizes(n: int, fractions=(0.70, 0.15, 0.15)) -> tuple:
    """Floor allocation for validation/test; the remainder goes to training."""
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_dataset(ds: Dataset, fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Seeded shuffle, then contiguous train | val | test cut."""
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-6 or min(fractions) < 0:
        raise DataError(f"split fractions {fractions} must be three non-negative values summing to 1")
    n_train, n_val, _ = split_sizes(len(ds), fractions)
    order = np.random.default_rng(seed).permutation(len(ds))
    return (
        ds.subset(order[:n_train]),
        ds.subset(order[n_train:n_train + n_val]),
        ds.subset(order[n_train + n_val:]),
    )


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def class_code(c: int, channels: int, num_classes: int) -> np.ndarray:
    """±1 per band from the bits of ``c`` (band b reads bit b mod nbits)."""
    nbits = max(1, math.ceil(math.log2(max(2, num_classes))))
    return np.array([1.0 if (c >> (b % nbits)) & 1 else -1.0 for b in range(channels)])


def class_template(c: int, num_classes: int, channels: int, height: int, width: int) -> np.ndarray:
    """Deterministic [C, H, W] signal for class ``c`` with peak amplitude 1.

    Half the amplitude is a per-band offset (the class code) and half a
    plane wave whose frequency and orientation depend on the class.
    """
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    fx = 1 + c % 4
    fy = (c // 4) % 4
    code = class_code(c, channels, num_classes)
    out = np.empty((channels, height, width))
    for b in range(channels):
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + 2 * np.pi * b / channels)
        out[b] = 0.5 * SIGNAL_AMPLITUDE * code[b] + 0.5 * SIGNAL_AMPLITUDE * wave
    return out


def synthesize_arrays(num_classes: int, samples_per_class: int, channels: int, height: int, width: int,
                      task: str = "multiclass", seed: int = 0):
    """In-memory synthetic set: returns (images [S, C, H, W] float32, label lists)."""
    if min(num_classes, samples_per_class, channels, height, width) < 1:
        raise DataError("synthetic dataset sizes must all be positive")
    if task not in TASKS:
        raise DataError(f"task {task!r} not in {TASKS}")
    rng = np.random.default_rng(seed)
    templates = [class_template(c, num_classes, channels, height, width) for c in range(num_classes)]
    total = num_classes * samples_per_class
    images = np.empty((total, channels, height, width), dtype=np.float32)
    labels = []
    for i in range(total):
        primary = i // samples_per_class
        if task == "multiclass":
            labs = (primary,)
        else:
            extra = int(rng.integers(0, min(3, num_classes)))
            others = [c for c in range(num_classes) if c != primary]
            chosen = rng.choice(others, size=extra, replace=False) if extra else []
            labs = tuple(sorted({primary, *map(int, chosen)}))
        signal = sum(templates[c] for c in labs)
        noise = rng.normal(0.0, NOISE_STD, size=(channels, height, width))
        images[i] = (signal + noise).astype(np.float32)
        labels.append(labs)
    return images, labels


def synthesize_dataset(out_dir, num_classes: int, samples_per_class: int, channels: int, height: int,
                       width: int, task: str = "multiclass", seed: int = 0,
                       low_res_bands: Sequence[int] = (), low_res_factor: int = 1) -> str:
    """Write a synthetic dataset (sample files + manifest) and return the manifest path.

    Bands listed in ``low_res_bands`` are stored block-averaged by
    ``low_res_factor`` so loading exercises the upsampling path.
    """
    images, labels = synthesize_arrays(num_classes, samples_per_class, channels, height, width, task, seed)
    if low_res_bands and (height % low_res_factor or width % low_res_factor):
        raise DataError(f"low_res_factor {low_res_factor} must divide {height}x{width}")
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    bands = [f"band{b:02d}" for b in range(channels)]
    records = []
    for i, (img, labs) in enumerate(zip(images, labels)):
        tensors = {}
        for b, name in enumerate(bands):
            band = img[b]
            if b in low_res_bands and low_res_factor > 1:
                f = low_res_factor
                band = band.reshape(height // f, f, width // f, f).mean(axis=(1, 3)).astype(np.float32)
            tensors[name] = band
        rel = f"samples/{i:05d}.vigt"
        write_tensor_file(os.path.join(out_dir, rel), tensors)
        records.append((rel, labs))
    manifest = Manifest(channels, height, width, num_classes, task, records, bands)
    path = os.path.join(out_dir, "manifest.txt")
    write_manifest(path, manifest)
    return path


def dataset_from_arrays(images: np.ndarray, labels: Sequence[Sequence[int]], num_classes: int, task: str) -> Dataset:
    vecs = np.stack([label_vector(l, num_classes) for l in labels]) if len(labels) else np.zeros((0, num_classes))
    return Dataset(np.asarray(images, dtype=np.float32), vecs.astype(np.float32), task, [])
