"""The one-step digit-sum game and an IDX (MNIST) reader.

Speaker and listener each see an independent digit; the listener picks one of
19 sums and both receive reward 1 iff it is right. ``source=None`` selects the
symbolic mode, in which observations are the digits themselves.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
N_DIGITS = 10
N_ACTIONS = 2 * N_DIGITS - 1


class IdxError(ValueError):
    pass


class WrongMagicError(IdxError):
    pass


class TruncatedIdxError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class IdxDataset:
    images: np.ndarray  # uint8 [N, 28, 28]
    labels: np.ndarray  # uint8 [N]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, i) -> np.ndarray:
        return self.images[i].astype(np.float32) / 255.0


@dataclass(frozen=True)
class DigitRound:
    speaker_digit: int
    listener_digit: int
    speaker_obs: np.ndarray
    listener_obs: np.ndarray


@dataclass(frozen=True)
class DigitBatch:
    speaker_digits: np.ndarray
    listener_digits: np.ndarray
    speaker_obs: np.ndarray  # digits (symbolic) or [B, 28, 28] images in [0, 1]
    listener_obs: np.ndarray

    def __len__(self) -> int:
        return len(self.speaker_digits)


def _read(path: Path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedIdxError(f"{what}: file too short for a header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise WrongMagicError(f"{what}: magic {got} (0x{got:08x}), expected {magic} (0x{magic:08x})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedIdxError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedIdxError(f"{what}: payload has {len(raw) - header} bytes, header says {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> IdxDataset:
    images = _parse(_read(Path(images_path)), IMAGE_MAGIC, 3, "images")
    labels = _parse(_read(Path(labels_path)), LABEL_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise IdxError(f"label value {labels.max()} outside 0..9")
    return IdxDataset(images.copy(), labels.copy())


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images [N, R, C] and labels [N] in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def sample_batch(source: IdxDataset | None, rng: np.random.Generator, n: int) -> DigitBatch:
    """Draw ``n`` independent rounds, uniform over dataset items or over 0..9."""
    if source is None:
        ds, dl = rng.integers(0, N_DIGITS, size=(2, n))
        return DigitBatch(ds, dl, ds.copy(), dl.copy())
    if len(source) == 0:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    i, j = rng.integers(0, len(source), size=(2, n))
    return DigitBatch(source.labels[i].astype(np.int64), source.labels[j].astype(np.int64),
                      source.image(i), source.image(j))


def sample_round(source: IdxDataset | None, rng: np.random.Generator) -> DigitRound:
    b = sample_batch(source, rng, 1)
    return DigitRound(int(b.speaker_digits[0]), int(b.listener_digits[0]),
                      b.speaker_obs[0], b.listener_obs[0])


def resolve_round(rnd: DigitRound | tuple[int, int], action: int) -> int:
    """Shared reward: 1 iff the listener's action equals the digit sum."""
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"action {action} outside 0..{N_ACTIONS - 1}")
    ds, dl = (rnd.speaker_digit, rnd.listener_digit) if isinstance(rnd, DigitRound) else rnd
    return int(int(action) == ds + dl)


def batch_rewards(batch: DigitBatch, actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions)
    if actions.min(initial=0) < 0 or actions.max(initial=0) >= N_ACTIONS:
        raise ValueError("actions outside 0..18")
    return (actions == batch.speaker_digits + batch.listener_digits).astype(np.float32)
