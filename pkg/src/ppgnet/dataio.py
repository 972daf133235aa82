"""On-disk formats: recording manifests + signal CSVs, windowed datasets, weights.

Manifest (UTF-8 text, one ``key = value`` per line, ``#`` starts a comment)::

    subject_id  = S01
    ppg_rate_hz = 50
    ecg_rate_hz = 400
    ppg_file    = S01_ppg.csv     # relative to the manifest's directory
    ecg_file    = S01_ecg.csv

Signal CSVs hold one real per line, '.' decimal separator, LF endings.

Binary containers (windowed datasets and weights) share one frame: an
8-byte magic, a little-endian u32 format version, the payload, then the
SHA-256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

WINDOW_RATE_HZ = 125.0
WINDOW_SAMPLES = 1000
LABEL_BOUNDS_BPM = (20.0, 250.0)

DATASET_MAGIC = b"PPGDSET\x00"
WEIGHTS_MAGIC = b"PPGWGHT\x00"
FORMAT_VERSION = 1
_DIGEST = 32

MANIFEST_KEYS = ("subject_id", "ppg_rate_hz", "ecg_rate_hz", "ppg_file", "ecg_file")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ChecksumError(DataError):
    pass


class TruncatedError(DataError):
    pass


# recordings ------------------------------------------------------------------

@dataclass
class Recording:
    subject_id: str
    ppg: np.ndarray
    ppg_rate_hz: float
    ecg: np.ndarray
    ecg_rate_hz: float

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float64)
        self.ecg = np.asarray(self.ecg, dtype=np.float64)
        self.ppg_rate_hz = float(self.ppg_rate_hz)
        self.ecg_rate_hz = float(self.ecg_rate_hz)
        if not self.subject_id:
            raise DataError("subject_id must be non-empty")
        if self.ppg_rate_hz <= 0 or self.ecg_rate_hz <= 0:
            raise DataError("sample rates must be positive")
        if self.ppg.ndim != 1 or self.ecg.ndim != 1 or self.ppg.size == 0 or self.ecg.size == 0:
            raise DataError("ppg and ecg must be non-empty 1-D signals")
        tolerance = 1.0 / min(self.ppg_rate_hz, self.ecg_rate_hz)
        if abs(self.ppg_duration_s - self.ecg_duration_s) > tolerance + 1e-12:
            raise DataError(
                f"{self.subject_id}: PPG covers {self.ppg_duration_s:.3f} s but ECG "
                f"{self.ecg_duration_s:.3f} s"
            )

    @property
    def ppg_duration_s(self) -> float:
        return self.ppg.size / self.ppg_rate_hz

    @property
    def ecg_duration_s(self) -> float:
        return self.ecg.size / self.ecg_rate_hz


def read_signal_csv(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"signal file not found: {path}")
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                v = float(text)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric sample {text!r}") from None
            if not np.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite sample {text!r}")
            values.append(v)
    return np.asarray(values, dtype=np.float64)


def write_signal_csv(path: str | os.PathLike, x: np.ndarray) -> None:
    text = "".join(f"{v!r}\n" for v in np.asarray(x, dtype=np.float64).tolist())
    atomic_write_bytes(path, text.encode("utf-8"))


def parse_manifest(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in MANIFEST_KEYS:
            raise DataError(f"{path}:{lineno}: unknown manifest key {key!r}")
        entries[key] = value
    missing = [k for k in MANIFEST_KEYS if k not in entries]
    if missing:
        raise DataError(f"{path}: missing manifest keys {missing}")
    return entries


def load_recording(manifest_path: str | os.PathLike) -> Recording:
    manifest_path = Path(manifest_path)
    m = parse_manifest(manifest_path)
    rates = {}
    for key in ("ppg_rate_hz", "ecg_rate_hz"):
        try:
            rates[key] = float(m[key])
        except ValueError:
            raise DataError(f"{manifest_path}: {key} is not a number: {m[key]!r}") from None
        if not rates[key] > 0:
            raise DataError(f"{manifest_path}: {key} must be positive")
    base = manifest_path.parent
    ppg = read_signal_csv(base / m["ppg_file"])
    ecg = read_signal_csv(base / m["ecg_file"])
    return Recording(m["subject_id"], ppg, rates["ppg_rate_hz"], ecg, rates["ecg_rate_hz"])


def save_recording(recording: Recording, out_dir: str | os.PathLike) -> Path:
    """Write CSVs and a manifest into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = recording.subject_id
    write_signal_csv(out_dir / f"{sid}_ppg.csv", recording.ppg)
    write_signal_csv(out_dir / f"{sid}_ecg.csv", recording.ecg)
    manifest = out_dir / f"{sid}.manifest"
    text = (
        f"subject_id = {sid}\n"
        f"ppg_rate_hz = {recording.ppg_rate_hz!r}\n"
        f"ecg_rate_hz = {recording.ecg_rate_hz!r}\n"
        f"ppg_file = {sid}_ppg.csv\n"
        f"ecg_file = {sid}_ecg.csv\n"
    )
    atomic_write_bytes(manifest, text.encode("utf-8"))
    return manifest


# windowed datasets -----------------------------------------------------------

@dataclass
class WindowedDataset:
    """Aligned arrays of 8 s / 125 Hz windows and their labels."""

    samples: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    window_index: np.ndarray
    sample_rate_hz: float = field(default=WINDOW_RATE_HZ)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, WINDOW_SAMPLES)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        self.subject_ids = np.asarray([str(s) for s in self.subject_ids], dtype=object)
        self.window_index = np.asarray(self.window_index, dtype=np.int64).reshape(-1)
        n = self.samples.shape[0]
        if not (self.labels.size == self.subject_ids.size == self.window_index.size == n):
            raise DataError("samples, labels, subject ids and window indices must align")
        if self.sample_rate_hz != WINDOW_RATE_HZ:
            raise DataError(f"windowed datasets are fixed at {WINDOW_RATE_HZ} Hz")
        lo, hi = LABEL_BOUNDS_BPM
        bad = ~((self.labels >= lo) & (self.labels <= hi))
        if np.any(bad):
            raise DataError(f"{int(bad.sum())} label(s) outside [{lo}, {hi}] BPM")
        if np.any(self.window_index < 0):
            raise DataError("window indices must be non-negative")
        keys = set(zip(self.subject_ids.tolist(), self.window_index.tolist()))
        if len(keys) != n:
            raise DataError("(subject_id, window_index) pairs must be unique")

    @classmethod
    def empty(cls) -> "WindowedDataset":
        return cls(np.empty((0, WINDOW_SAMPLES)), np.empty(0), np.empty(0, dtype=object), np.empty(0))

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def subjects(self) -> list[str]:
        """Subject ids in order of first appearance."""
        seen: dict[str, None] = {}
        for s in self.subject_ids.tolist():
            seen.setdefault(s, None)
        return list(seen)

    def select(self, indices) -> "WindowedDataset":
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64)
        return WindowedDataset(
            self.samples[idx], self.labels[idx], self.subject_ids[idx], self.window_index[idx]
        )

    def for_subjects(self, subjects: Iterable[str]) -> "WindowedDataset":
        return self.select(np.isin(self.subject_ids, list(subjects)))

    @classmethod
    def concat(cls, parts: Iterable["WindowedDataset"]) -> "WindowedDataset":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.samples for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.subject_ids for p in parts]),
            np.concatenate([p.window_index for p in parts]),
        )

    def equals(self, other: "WindowedDataset") -> bool:
        return (
            np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
            and self.subject_ids.tolist() == other.subject_ids.tolist()
            and np.array_equal(self.window_index, other.window_index)
        )


# binary frame ----------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def text(self, s: str, wide: bool = False) -> None:
        raw = s.encode("utf-8")
        self.pack("I" if wide else "H", len(raw))
        self.parts.append(raw)

    def floats(self, a: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, offset: int, end: int, path):
        self.buf, self.pos, self.end, self.path = buf, offset, end, path

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(f"{self.path}: unexpected end of data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, wide: bool = False) -> str:
        (n,) = self.unpack("I" if wide else "H")
        return self.take(n).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _frame(magic: bytes, payload: bytes) -> bytes:
    body = magic + struct.pack("<I", FORMAT_VERSION) + payload
    return body + hashlib.sha256(body).digest()


def _unframe(path, magic: bytes) -> _Reader:
    buf = Path(path).read_bytes()
    header = len(magic) + 4
    if len(buf) < header + _DIGEST:
        raise TruncatedError(f"{path}: file too short ({len(buf)} bytes)")
    if buf[: len(magic)] != magic:
        raise DataError(f"{path}: wrong file type (bad magic)")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (corrupted or truncated file)")
    (version,) = struct.unpack("<I", buf[len(magic):header])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    return _Reader(buf, header, len(body), path)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary sibling file and rename, so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_windowed(dataset: WindowedDataset, path: str | os.PathLike) -> None:
    w = _Writer()
    w.pack("QId", len(dataset), WINDOW_SAMPLES, dataset.sample_rate_hz)
    for i in range(len(dataset)):
        w.text(dataset.subject_ids[i])
        w.pack("qd", int(dataset.window_index[i]), float(dataset.labels[i]))
        w.floats(dataset.samples[i])
    atomic_write_bytes(path, _frame(DATASET_MAGIC, w.getvalue()))


def load_windowed(path: str | os.PathLike) -> WindowedDataset:
    r = _unframe(path, DATASET_MAGIC)
    n, width, rate = r.unpack("QId")
    if width != WINDOW_SAMPLES:
        raise DataError(f"{path}: window length {width}, expected {WINDOW_SAMPLES}")
    samples = np.empty((n, width))
    labels = np.empty(n)
    index = np.empty(n, dtype=np.int64)
    subjects = []
    for i in range(n):
        subjects.append(r.text())
        index[i], labels[i] = r.unpack("qd")
        samples[i] = r.floats(width)
    if r.pos != r.end:
        raise DataError(f"{path}: trailing bytes after {n} windows")
    return WindowedDataset(samples, labels, np.asarray(subjects, dtype=object), index, rate)


# weights ---------------------------------------------------------------------

def save_weights(model, path: str | os.PathLike, metadata: dict | None = None) -> None:
    """Persist every parameter and running statistic of ``model``.

    The model configuration travels in a JSON header so the file can
    rebuild its own model.
    """
    meta = {"config": model.config.to_dict(), **(metadata or {})}
    arrays = model.state_arrays()
    w = _Writer()
    w.text(json.dumps(meta, sort_keys=True), wide=True)
    w.pack("I", len(arrays))
    for block, name, values in arrays:
        w.text(block)
        w.text(name)
        w.pack("B", values.ndim)
        w.pack(f"{values.ndim}I", *values.shape)
        w.floats(values)
    atomic_write_bytes(path, _frame(WEIGHTS_MAGIC, w.getvalue()))


def read_weights(path: str | os.PathLike) -> tuple[dict, list[tuple[str, str, np.ndarray]]]:
    """Raw contents of a weights file: ``(metadata, [(block, name, array), ...])``."""
    from .model import BLOCK_NAMES, STATS_BLOCK

    r = _unframe(path, WEIGHTS_MAGIC)
    meta = json.loads(r.text(wide=True))
    (count,) = r.unpack("I")
    arrays = []
    for _ in range(count):
        block, name = r.text(), r.text()
        if block not in BLOCK_NAMES and block != STATS_BLOCK:
            raise DataError(f"{path}: unknown block name {block!r}")
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arrays.append((block, name, r.floats(size).reshape(shape)))
    if r.pos != r.end:
        raise DataError(f"{path}: trailing bytes after {count} arrays")
    return meta, arrays


def load_weights(model, path: str | os.PathLike):
    """Load a weights file into an already-built ``model`` (shapes must match)."""
    _, arrays = read_weights(path)
    try:
        model.load_state_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return model


def model_from_weights(path: str | os.PathLike):
    """Build the model described by a weights file and load its values."""
    from .model import ModelConfig, build_model

    meta, arrays = read_weights(path)
    model = build_model(ModelConfig(**meta["config"]))
    try:
        model.load_state_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return model, meta
