"""Synthetic lung-like segmentation data, its container format, and splits.

Every random draw comes from the Philox4x64-10 counter-based generator
(numpy's `np.random.Philox`), keyed so the same seed reproduces the same
bytes on any platform. Sample i of a dataset with seed S uses key (S, i).

Container format "ALQD" (little-endian throughout):

    magic   4 bytes  b"ALQD"
    version u32      1
    count   u32
    then per record:
      id    u64
      H     u32
      W     u32
      box   4 x u32  (x0, y0, x1, y1), half-open pixel bounds
      image H*W float32
      mask  H*W bytes in {0, 1}

An optional PGM (P5) ingestion path turns external image/mask pairs into
records for users with real data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"ALQD"
VERSION = 1

_HEADER = struct.Struct("<4sII")
_REC_FIXED = struct.Struct("<QII4I")


@dataclass
class SampleRecord:
    sample_id: int
    image: np.ndarray          # float32 H x W in [0, 1]
    mask: np.ndarray           # uint8 H x W in {0, 1}
    box: tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open, mask-covering

    def validate(self) -> None:
        h, w = self.mask.shape
        x0, y0, x1, y1 = self.box
        if self.image.shape != (h, w):
            raise ContractError(f"record {self.sample_id}: image/mask shape mismatch")
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ContractError(f"record {self.sample_id}: box {self.box} outside {h}x{w}")
        if not self.mask.any():
            raise ContractError(f"record {self.sample_id}: empty mask")
        ys, xs = np.nonzero(self.mask)
        if xs.min() < x0 or xs.max() >= x1 or ys.min() < y0 or ys.max() >= y1:
            raise ContractError(f"record {self.sample_id}: box does not cover mask")


@dataclass
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


def rng_for(key) -> np.random.Generator:
    """Philox generator for an integer key or sequence of integer keys."""
    if isinstance(key, (int, np.integer)):
        key = (int(key),)
    return np.random.Generator(np.random.Philox(key=list(int(k) for k in key)))


def _ellipse_mask(h: int, w: int, cx: float, cy: float, ax: float, ay: float,
                  theta: float, wobble_amp: float, wobble_freq: int,
                  wobble_phase: float) -> np.ndarray:
    """Filled ellipse with a low-frequency sinusoidal boundary perturbation."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - cx
    dy = ys - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / ax
    v = (-dx * st + dy * ct) / ay
    r = np.sqrt(u * u + v * v)
    phi = np.arctan2(v, u)
    boundary = 1.0 + wobble_amp * np.sin(wobble_freq * phi + wobble_phase)
    return r <= boundary


def generate_sample(seed, h: int, w: int) -> SampleRecord:
    """Deterministic lung-like sample: two wobbled ellipses on a noisy field.

    `seed` may be an int or an (int, int) key; the record is a pure function
    of it. Geometry draws that produce an empty mask are retried up to 8
    times before raising.
    """
    if h < 32 or w < 32:
        raise ContractError(f"generate_sample: need H, W >= 32, got {h}x{w}")
    rng = rng_for(seed)
    sample_id = seed if isinstance(seed, (int, np.integer)) else int(seed[-1])

    mask = None
    for _ in range(8):
        lobes = []
        for side in (0.30, 0.70):
            cx = (side + rng.uniform(-0.04, 0.04)) * w
            cy = (0.50 + rng.uniform(-0.06, 0.06)) * h
            ax = rng.uniform(0.10, 0.16) * w
            ay = rng.uniform(0.20, 0.30) * h
            theta = rng.uniform(-0.18, 0.18)
            amp = rng.uniform(0.03, 0.10)
            freq = int(rng.integers(2, 6))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            lobes.append(_ellipse_mask(h, w, cx, cy, ax, ay, theta, amp, freq, phase))
        cand = np.logical_or(lobes[0], lobes[1])
        if cand.any():
            mask = cand
            break
    if mask is None:
        raise ContractError(f"generate_sample: degenerate geometry for seed {seed!r}")

    m = mask.astype(np.float32)
    grad = np.linspace(-0.08, 0.08, h, dtype=np.float32)[:, None]
    noise = rng.normal(0.0, 0.05, size=(h, w)).astype(np.float32)
    image = np.clip(0.35 * (1.0 - m) + 0.75 * m + grad + noise, 0.0, 1.0).astype(np.float32)

    ys, xs = np.nonzero(mask)
    jit = rng.integers(0, 4, size=4)  # 0..3 px dilation per side
    x0 = max(0, int(xs.min()) - int(jit[0]))
    y0 = max(0, int(ys.min()) - int(jit[1]))
    x1 = min(w, int(xs.max()) + 1 + int(jit[2]))
    y1 = min(h, int(ys.max()) + 1 + int(jit[3]))

    rec = SampleRecord(sample_id=int(sample_id), image=image,
                       mask=mask.astype(np.uint8), box=(x0, y0, x1, y1))
    rec.validate()
    return rec


def generate_dataset(seed: int, count: int, size: int) -> list[SampleRecord]:
    """Samples 0..count-1 of dataset `seed`, each from Philox key (seed, i)."""
    recs = []
    for i in range(count):
        rec = generate_sample((seed, i), size, size)
        rec.sample_id = i
        recs.append(rec)
    return recs


# -- container I/O ----------------------------------------------------------------


def write_dataset(path, records: list[SampleRecord]) -> None:
    if not records:
        raise ContractError("write_dataset: empty record list")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(records)))
        for rec in records:
            rec.validate()
            h, w = rec.mask.shape
            f.write(_REC_FIXED.pack(rec.sample_id, h, w, *rec.box))
            f.write(rec.image.astype("<f4").tobytes())
            f.write(rec.mask.astype(np.uint8).tobytes())


def read_dataset(path) -> list[SampleRecord]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header at byte {len(blob)}")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    off = _HEADER.size
    records = []
    for _ in range(count):
        if off + _REC_FIXED.size > len(blob):
            raise FormatError(f"truncated record header at byte {off}")
        sid, h, w, x0, y0, x1, y1 = _REC_FIXED.unpack_from(blob, off)
        off += _REC_FIXED.size
        n_img = h * w * 4
        n_mask = h * w
        if off + n_img + n_mask > len(blob):
            raise FormatError(f"truncated record payload at byte {off}")
        image = np.frombuffer(blob, dtype="<f4", count=h * w, offset=off).reshape(h, w).copy()
        off += n_img
        mask = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
        off += n_mask
        rec = SampleRecord(sample_id=sid, image=image, mask=mask, box=(x0, y0, x1, y1))
        rec.validate()
        records.append(rec)
    if off != len(blob):
        raise FormatError(f"trailing bytes at offset {off}")
    return records


def record_nbytes(h: int, w: int) -> int:
    """Serialized size of one record."""
    return _REC_FIXED.size + h * w * 4 + h * w


def dataset_nbytes(records: list[SampleRecord]) -> int:
    return _HEADER.size + sum(record_nbytes(*r.mask.shape) for r in records)


# -- splitting --------------------------------------------------------------------


def split_dataset(ids, seed: int) -> DatasetSplit:
    """Seeded shuffle, then contiguous 80:10:10 partition.

    Val and test sizes are round(0.1 * n) each (so 576 -> 460/58/58), with
    the remainder going to train.
    """
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise ContractError(f"split_dataset: need >= 10 ids, got {n}")
    rng = rng_for((seed, 0x5B71))
    perm = rng.permutation(n)
    shuffled = [ids[i] for i in perm]
    n_val = round(0.1 * n)
    n_test = round(0.1 * n)
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )


# -- PGM ingestion ------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Minimal binary PGM (P5) reader returning a uint8/uint16 array."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise FormatError("not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(blob, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.uint16 if maxval >= 256 else np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a uint8 grayscale image as binary PGM (P5)."""
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def ingest_pgm_pair(image_path, mask_path, sample_id: int) -> SampleRecord:
    """Build a record from external PGM image/mask files (tight box, no jitter)."""
    img = read_pgm(image_path).astype(np.float32)
    img /= img.max() if img.max() > 0 else 1.0
    mask = (read_pgm(mask_path) > 0).astype(np.uint8)
    if not mask.any():
        raise ContractError(f"ingest: mask {mask_path} is empty")
    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    rec = SampleRecord(sample_id=sample_id, image=img.astype(np.float32), mask=mask, box=box)
    rec.validate()
    return rec
