"""Dataset ingestion, normalization, deterministic subsetting, synthetics.

CIFAR archives are read directly in the published binary layout
(3073-byte records for CIFAR-10: one label byte + 3072 pixel bytes
row-major per channel; CIFAR-100 prepends a coarse label byte and the
fine label comes second). Nothing is downloaded unless explicitly
allowed. Synthetic datasets are generated in memory and exist so the
whole training stack can be exercised without any files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tarfile
import urllib.request
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from gompertz_kd.errors import ConfigurationError, IngestError, InputError, IntegrityError

DATA_ROOT_ENV = "GKD_DATA_ROOT"

CIFAR10_DIRNAME = "cifar-10-batches-bin"
CIFAR100_DIRNAME = "cifar-100-binary"

_CIFAR_LAYOUT = {
    # name -> (num label bytes, fine-label byte index, classes, dirname)
    "cifar10": (1, 0, 10, CIFAR10_DIRNAME),
    "cifar100": (2, 1, 100, CIFAR100_DIRNAME),
}
_CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
_CIFAR_ARCHIVES = {
    "cifar10": (
        "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
        "c32a1d4ab5d03f1284b67883e8d87530",
    ),
    "cifar100": (
        "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        "03b5dce01913d631647c71ecec9e9cb8",
    ),
}

IMAGE_SIZE = 32
_PIXELS = 3 * IMAGE_SIZE * IMAGE_SIZE


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the in-memory blob-classification dataset."""

    num_classes: int = 4
    samples_per_class: int = 128
    test_samples_per_class: int = 64
    noise: float = 0.35
    class_separation: float = 1.0


@dataclass(frozen=True)
class DatasetSpec:
    name: str  # cifar10 | cifar100 | synthetic
    root: str | None = None
    split: str = "train"
    subset_size: int | None = None
    subset_seed: int = 0
    normalization: str | tuple = "auto"  # "auto" or (mean3, std3)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def validate(self) -> list[str]:
        violations = []
        if self.name not in ("cifar10", "cifar100", "synthetic"):
            violations.append(
                f"dataset.name must be cifar10, cifar100 or synthetic, got {self.name!r}"
            )
        if self.split not in ("train", "test"):
            violations.append(f"dataset.split must be train or test, got {self.split!r}")
        if self.subset_size is not None and self.subset_size < 1:
            violations.append("dataset.subset_size must be >= 1 when given")
        if self.name != "synthetic" and self.resolve_root() is None:
            violations.append(
                f"dataset.root is required for {self.name} (or set ${DATA_ROOT_ENV})"
            )
        return violations

    def resolve_root(self) -> Path | None:
        if self.root:
            return Path(self.root)
        env = os.environ.get(DATA_ROOT_ENV)
        return Path(env) if env else None


class ArrayDataset:
    """In-memory dataset of normalized image tensors and integer labels."""

    def __init__(
        self,
        images: torch.Tensor,
        labels: torch.Tensor,
        num_classes: int,
        name: str,
        normalization: tuple | None = None,
    ):
        if images.shape[0] != labels.shape[0]:
            raise InputError(
                f"images/labels length mismatch: {images.shape[0]} vs {labels.shape[0]}"
            )
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.name = name
        self.normalization = normalization

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        return self.images[i], int(self.labels[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.num_classes)

    def subset(self, indices: np.ndarray) -> "ArrayDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ArrayDataset(
            self.images[idx],
            self.labels[idx],
            self.num_classes,
            self.name,
            self.normalization,
        )


def _derived_rng(*material: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(material)))


def _name_code(text: str) -> int:
    return zlib.crc32(text.encode())


def stratified_subset_indices(
    labels: np.ndarray,
    subset_size: int,
    num_classes: int,
    name: str,
    split: str,
    subset_seed: int,
) -> np.ndarray:
    """Deterministic class-balanced subset of the given size.

    A pure function of (name, split, subset_size, subset_seed): per-class
    quotas are floor(n/K) with the remainder spread over a seeded class
    permutation, and each class's samples are drawn without replacement.
    Returned indices are sorted ascending.
    """
    n_total = labels.shape[0]
    if subset_size > n_total:
        raise ConfigurationError(
            f"subset_size {subset_size} exceeds split size {n_total}"
        )
    rng = _derived_rng(subset_seed, subset_size, _name_code(name), _name_code(split))
    base, rem = divmod(subset_size, num_classes)
    quotas = np.full(num_classes, base, dtype=np.int64)
    quotas[rng.permutation(num_classes)[:rem]] += 1
    chosen = []
    for k in range(num_classes):
        pool = np.flatnonzero(labels == k)
        if quotas[k] > pool.size:
            raise ConfigurationError(
                f"class {k} has only {pool.size} samples, need {quotas[k]}"
            )
        if quotas[k]:
            chosen.append(rng.choice(pool, size=quotas[k], replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)


def _read_cifar_files(root: Path, name: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    label_bytes, fine_index, num_classes, dirname = _CIFAR_LAYOUT[name]
    record = label_bytes + _PIXELS
    base = root if (root / _CIFAR_FILES[(name, split)][0]).exists() else root / dirname
    images, labels = [], []
    for fname in _CIFAR_FILES[(name, split)]:
        path = base / fname
        if not path.exists():
            raise IngestError(path, "file missing (expected CIFAR binary archive)")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % record != 0:
            raise IngestError(
                path,
                f"size {raw.size} is not a multiple of the {record}-byte record",
                byte_offset=(raw.size // record) * record,
            )
        recs = raw.reshape(-1, record)
        labs = recs[:, fine_index].astype(np.int64)
        bad = np.flatnonzero(labs >= num_classes)
        if bad.size:
            raise IngestError(
                path,
                f"label {labs[bad[0]]} out of range [0, {num_classes})",
                byte_offset=int(bad[0]) * record + fine_index,
            )
        images.append(
            recs[:, label_bytes:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE)
        )
        labels.append(labs)
    return np.concatenate(images), np.concatenate(labels)


def _normalization_cache_path(root: Path, name: str) -> Path:
    _, _, _, dirname = _CIFAR_LAYOUT[name]
    base = root / dirname if (root / dirname).exists() else root
    return base / f"gkd-normalization-{name}.json"


def _train_statistics(root: Path, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of the full train split on the 0..1 scale."""
    cache = _normalization_cache_path(root, name)
    if cache.exists():
        try:
            payload = json.loads(cache.read_text())
            return np.asarray(payload["mean"]), np.asarray(payload["std"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise IntegrityError(f"corrupt normalization cache {cache}: {exc}") from exc
    images, _ = _read_cifar_files(root, name, "train")
    mean_c, std_c = [], []
    for c in range(3):  # one channel at a time: the full split is large
        scaled = images[:, c].astype(np.float64) / 255.0
        mean_c.append(scaled.mean())
        std_c.append(scaled.std())
    mean, std = np.asarray(mean_c), np.asarray(std_c)
    try:
        cache.write_text(
            json.dumps({"name": name, "computed_from": "train", "mean": mean.tolist(), "std": std.tolist()})
        )
    except OSError:
        pass  # read-only data dir: recompute next time
    return mean, std


def _normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> torch.Tensor:
    scaled = images.astype(np.float32) / 255.0
    mean32 = mean.astype(np.float32).reshape(1, 3, 1, 1)
    std32 = std.astype(np.float32).reshape(1, 3, 1, 1)
    return torch.from_numpy((scaled - mean32) / std32)


def load_dataset(spec: DatasetSpec) -> ArrayDataset:
    """Load, normalize, and (optionally) subset a dataset.

    Images come back as float32 (N, 3, 32, 32) tensors standardized with
    per-channel statistics computed from the full train split (cached
    alongside the data for CIFAR). Sample order is deterministic; any
    shuffling is the trainer's job.
    """
    violations = spec.validate()
    if violations:
        raise ConfigurationError("; ".join(violations))
    if spec.name == "synthetic":
        ds = _load_synthetic(spec)
        if spec.subset_size is not None:
            idx = stratified_subset_indices(
                ds.labels.numpy(),
                spec.subset_size,
                ds.num_classes,
                spec.name,
                spec.split,
                spec.subset_seed,
            )
            ds = ds.subset(idx)
        return ds

    root = spec.resolve_root()
    images, labels = _read_cifar_files(root, spec.name, spec.split)
    if spec.normalization == "auto":
        mean, std = _train_statistics(root, spec.name)
    else:
        mean, std = (np.asarray(v, dtype=np.float64) for v in spec.normalization)
    _, _, num_classes, _ = _CIFAR_LAYOUT[spec.name]
    if spec.subset_size is not None:  # subset on raw bytes, then normalize
        idx = stratified_subset_indices(
            labels, spec.subset_size, num_classes, spec.name, spec.split,
            spec.subset_seed,
        )
        images, labels = images[idx], labels[idx]
    return ArrayDataset(
        _normalize(images, mean, std),
        torch.from_numpy(labels),
        num_classes,
        spec.name,
        normalization=(tuple(mean.tolist()), tuple(std.tolist())),
    )


def make_synthetic(
    num_classes: int,
    samples_per_class: int,
    seed: int,
    noise: float = 0.35,
    class_separation: float = 1.0,
) -> ArrayDataset:
    """Blob-pattern classification images, deterministic in all arguments.

    Class k gets a Gaussian blob at a class-specific position with a
    class-specific color, plus additive Gaussian noise. Defaults are easy
    enough that the tiny student exceeds 90% accuracy within 5 epochs;
    `noise` up / `class_separation` down makes the task genuinely hard.
    Returned images are raw (unnormalized); `load_dataset` standardizes.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    if samples_per_class < 1:
        raise ConfigurationError("samples_per_class must be >= 1")
    rng = _derived_rng(seed, num_classes, samples_per_class)
    n = num_classes * samples_per_class
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)

    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), samples_per_class).astype(np.int64)
    for k in range(num_classes):
        theta = 2.0 * np.pi * k / num_classes
        center = 16.0 + class_separation * 9.0 * np.array([np.cos(theta), np.sin(theta)])
        color = 0.5 + class_separation * 0.5 * np.cos(
            theta + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
        )
        m = samples_per_class
        jitter = rng.normal(0.0, 1.5, size=(m, 2))
        amplitude = rng.uniform(0.8, 1.2, size=m)
        sigma = rng.uniform(4.0, 5.0, size=m)
        cx = center[0] + jitter[:, 0]
        cy = center[1] + jitter[:, 1]
        blob = np.exp(
            -(
                (xx[None] - cx[:, None, None]) ** 2
                + (yy[None] - cy[:, None, None]) ** 2
            )
            / (2.0 * sigma[:, None, None] ** 2)
        )
        patterns = amplitude[:, None, None, None] * color[None, :, None, None] * blob[:, None]
        patterns = patterns + rng.normal(0.0, noise, size=patterns.shape)
        images[k * m : (k + 1) * m] = patterns.astype(np.float32)

    order = rng.permutation(n)
    return ArrayDataset(
        torch.from_numpy(images[order]),
        torch.from_numpy(labels[order]),
        num_classes,
        "synthetic",
    )


def _load_synthetic(spec: DatasetSpec) -> ArrayDataset:
    syn = spec.synthetic
    per_class = (
        syn.samples_per_class if spec.split == "train" else syn.test_samples_per_class
    )
    split_seed_offset = 0 if spec.split == "train" else 1
    raw = make_synthetic(
        syn.num_classes,
        per_class,
        seed=spec.subset_seed * 2 + split_seed_offset,
        noise=syn.noise,
        class_separation=syn.class_separation,
    )
    train = (
        raw
        if spec.split == "train"
        else make_synthetic(
            syn.num_classes,
            syn.samples_per_class,
            seed=spec.subset_seed * 2,
            noise=syn.noise,
            class_separation=syn.class_separation,
        )
    )
    if spec.normalization == "auto":
        arr = train.images.numpy().astype(np.float64)
        mean, std = arr.mean(axis=(0, 2, 3)), arr.std(axis=(0, 2, 3))
    else:
        mean, std = (np.asarray(v, dtype=np.float64) for v in spec.normalization)
    mean32 = mean.astype(np.float32).reshape(1, 3, 1, 1)
    std32 = std.astype(np.float32).reshape(1, 3, 1, 1)
    images = (raw.images - torch.from_numpy(mean32)) / torch.from_numpy(std32)
    return ArrayDataset(
        images,
        raw.labels,
        syn.num_classes,
        "synthetic",
        normalization=(tuple(mean.tolist()), tuple(std.tolist())),
    )


def download_dataset(name: str, root: str | Path) -> Path:
    """Fetch and extract a CIFAR binary archive with checksum verification.

    Only runs when explicitly requested (CLI --allow-download); raises
    IntegrityError if the downloaded archive does not match the published
    MD5.
    """
    if name not in _CIFAR_ARCHIVES:
        raise ConfigurationError(f"no download source for dataset {name!r}")
    url, md5 = _CIFAR_ARCHIVES[name]
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    archive = root / url.rsplit("/", 1)[-1]
    if not archive.exists():
        with urllib.request.urlopen(url) as resp, open(archive, "wb") as out:
            while True:
                chunk = resp.read(1 << 20)
                if not chunk:
                    break
                out.write(chunk)
    digest = hashlib.md5(archive.read_bytes()).hexdigest()
    if digest != md5:
        raise IntegrityError(
            f"{archive}: md5 {digest} does not match expected {md5}"
        )
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(root)
    return root


def write_cifar_binary(
    images: np.ndarray, labels: np.ndarray, root: str | Path, name: str = "cifar10"
) -> Path:
    """Serialize uint8 images/labels into the CIFAR binary file layout.

    Mainly a test utility: it produces archives that the regular ingest
    path reads, which lets the full loader run without the real data.
    Train records are split across the standard per-file record counts.
    """
    label_bytes, fine_index, num_classes, dirname = _CIFAR_LAYOUT[name]
    if images.dtype != np.uint8 or images.ndim != 4 or images.shape[1:] != (3, 32, 32):
        raise InputError("images must be uint8 with shape (N, 3, 32, 32)")
    if labels.max(initial=0) >= num_classes:
        raise InputError(f"labels must be < {num_classes}")
    base = Path(root) / dirname
    base.mkdir(parents=True, exist_ok=True)
    flat = images.reshape(images.shape[0], -1)
    n_train = {"cifar10": 50000, "cifar100": 50000}[name]
    per_file = 10000 if name == "cifar10" else n_train
    train_files = _CIFAR_FILES[(name, "train")]
    test_file = _CIFAR_FILES[(name, "test")][0]
    if images.shape[0] != n_train + 10000:
        raise InputError(
            f"{name} layout expects {n_train + 10000} records, got {images.shape[0]}"
        )

    def _write(path: Path, idx: np.ndarray) -> None:
        recs = np.zeros((idx.size, label_bytes + _PIXELS), dtype=np.uint8)
        recs[:, fine_index] = labels[idx]
        recs[:, label_bytes:] = flat[idx]
        path.write_bytes(recs.tobytes())

    for i, fname in enumerate(train_files):
        _write(base / fname, np.arange(i * per_file, (i + 1) * per_file))
    _write(base / test_file, np.arange(n_train, n_train + 10000))
    return base
