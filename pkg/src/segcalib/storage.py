"""Binary containers for subjects, predictions, and model parameters.

Two little-endian formats share one family:

``SCV1`` (subject/volume container): magic ``SCV1``, a version byte, grid
height and width as unsigned 32-bit integers, and a one-byte presence
bitmap. The payload holds one float64 row-major grid per set bit, in slot
order (image, labels, eval_mask, reference_posterior, logits,
probabilities, sample_std). One file stores one subject; the subject id is
the file stem.

``SCW1`` (weight container): magic ``SCW1``, a version byte, and a kind
byte (network / affine calibrator / convolutional calibrator). Network
checkpoints record an architecture fingerprint, the training regime tag,
and the dropout configuration, and refuse to load into a mismatched
architecture. Loading a calibrator as a different kind is an error; use
:func:`segcalib.calibrate.platt_to_aux_conv` for the explicit widening.

Round-trips are bit-exact: float64 payloads are written verbatim.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .calibrate import AuxConvParams, PlattParams
from .exceptions import CompatibilityError, FormatError
from .grids import Subject
from .network import (
    ARCHITECTURE,
    DROPOUT_SITES,
    N_LAYERS,
    DropoutConfig,
    NetParams,
    NO_DROPOUT,
    architecture_fingerprint,
)

SUBJECT_MAGIC = b"SCV1"
WEIGHT_MAGIC = b"SCW1"
FORMAT_VERSION = 1

GRID_SLOTS = (
    "image",
    "labels",
    "eval_mask",
    "reference_posterior",
    "logits",
    "probabilities",
    "sample_std",
)

KIND_NETWORK = 1
KIND_PLATT = 2
KIND_AUX = 3

SUBJECT_SUFFIX = ".scv1"


class _Reader:
    """Sequential reader that raises FormatError naming the file on any
    short read or trailing garbage."""

    def __init__(self, path: Path):
        self.path = path
        self.data = path.read_bytes()
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"{self.path}: truncated (needed {n} more bytes)")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def grid(self, height: int, width: int) -> np.ndarray:
        raw = self.take(height * width * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(height, width).copy()

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.offset} trailing bytes")


def _check_header(reader: _Reader, magic: bytes) -> None:
    got = reader.take(4)
    if got != magic:
        raise FormatError(f"{reader.path}: bad magic {got!r}, expected {magic!r}")
    (version,) = reader.unpack("<B")
    if version != FORMAT_VERSION:
        raise FormatError(f"{reader.path}: unsupported version {version}")


def _grid_bytes(grid: np.ndarray) -> bytes:
    return np.ascontiguousarray(grid, dtype="<f8").tobytes()


def write_grid_file(path, grids: dict[str, np.ndarray]) -> None:
    """Write named grids (a subset of GRID_SLOTS, all one shape) as SCV1."""
    path = Path(path)
    present = [name for name in GRID_SLOTS if name in grids]
    unknown = set(grids) - set(GRID_SLOTS)
    if unknown:
        raise FormatError(f"unknown grid slots {sorted(unknown)}")
    if not present:
        raise FormatError("at least one grid is required")
    shape = grids[present[0]].shape
    bitmap = 0
    for name in present:
        if grids[name].shape != shape:
            raise FormatError("all grids in one file must share a shape")
        bitmap |= 1 << GRID_SLOTS.index(name)
    blob = bytearray()
    blob += SUBJECT_MAGIC
    blob += struct.pack("<B", FORMAT_VERSION)
    blob += struct.pack("<II", shape[0], shape[1])
    blob += struct.pack("<B", bitmap)
    for name in present:
        blob += _grid_bytes(grids[name])
    path.write_bytes(bytes(blob))


def read_grid_file(path) -> dict[str, np.ndarray]:
    """Read an SCV1 file into a {slot name: grid} dict."""
    reader = _Reader(Path(path))
    _check_header(reader, SUBJECT_MAGIC)
    height, width = reader.unpack("<II")
    if height < 1 or width < 1:
        raise FormatError(f"{reader.path}: invalid grid shape {height}x{width}")
    (bitmap,) = reader.unpack("<B")
    grids = {}
    for i, name in enumerate(GRID_SLOTS):
        if bitmap & (1 << i):
            grids[name] = reader.grid(height, width)
    if bitmap >> len(GRID_SLOTS):
        raise FormatError(f"{reader.path}: unknown bits in presence bitmap")
    reader.finish()
    return grids


def save_subject(subject: Subject, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grids = {
        "image": subject.image,
        "labels": subject.labels,
        "eval_mask": subject.eval_mask,
    }
    if subject.reference_posterior is not None:
        grids["reference_posterior"] = subject.reference_posterior
    if subject.logits is not None:
        grids["logits"] = subject.logits
    path = directory / f"{subject.id}{SUBJECT_SUFFIX}"
    write_grid_file(path, grids)
    return path


def load_subject(path) -> Subject:
    path = Path(path)
    grids = read_grid_file(path)
    for required in ("image", "labels", "eval_mask"):
        if required not in grids:
            raise FormatError(f"{path}: subject file is missing the {required} grid")
    return Subject(
        id=path.stem,
        image=grids["image"],
        labels=grids["labels"],
        eval_mask=grids["eval_mask"],
        reference_posterior=grids.get("reference_posterior"),
        logits=grids.get("logits"),
    )


def save_dataset(subjects, directory) -> list[Path]:
    return [save_subject(subject, directory) for subject in subjects]


def load_dataset(directory) -> list[Subject]:
    directory = Path(directory)
    paths = sorted(directory.glob(f"*{SUBJECT_SUFFIX}"))
    if not paths:
        raise FormatError(f"no {SUBJECT_SUFFIX} files found in {directory}")
    return [load_subject(path) for path in paths]


def save_predictions(path, probabilities: np.ndarray, sample_std: Optional[np.ndarray] = None):
    grids = {"probabilities": probabilities}
    if sample_std is not None:
        grids["sample_std"] = sample_std
    write_grid_file(path, grids)


def load_predictions(path) -> dict[str, np.ndarray]:
    grids = read_grid_file(path)
    if "probabilities" not in grids:
        raise FormatError(f"{path}: prediction file is missing the probabilities grid")
    return grids


def _pack_string(text: str) -> bytes:
    raw = text.encode("ascii")
    return struct.pack("<H", len(raw)) + raw


def _read_string(reader: _Reader) -> str:
    (length,) = reader.unpack("<H")
    return reader.take(length).decode("ascii")


def save_network_checkpoint(
    path,
    params: NetParams,
    regime: str = "none",
    dropout: DropoutConfig = NO_DROPOUT,
) -> None:
    blob = bytearray()
    blob += WEIGHT_MAGIC
    blob += struct.pack("<BB", FORMAT_VERSION, KIND_NETWORK)
    blob += _pack_string(architecture_fingerprint())
    blob += _pack_string(regime)
    site_bits = 0
    for i, site in enumerate(DROPOUT_SITES):
        if site in dropout.sites:
            site_bits |= 1 << i
    frozen_bits = 0
    for i, flag in enumerate(params.frozen):
        if flag:
            frozen_bits |= 1 << i
    blob += struct.pack("<BdB", site_bits, dropout.rate, frozen_bits)
    for w, b in zip(params.weights, params.biases):
        blob += _grid_bytes(w.reshape(1, -1))
        blob += _grid_bytes(b.reshape(1, -1))
    Path(path).write_bytes(bytes(blob))


def _open_checkpoint(path, expected_kind: int) -> _Reader:
    reader = _Reader(Path(path))
    _check_header(reader, WEIGHT_MAGIC)
    (kind,) = reader.unpack("<B")
    if kind != expected_kind:
        names = {KIND_NETWORK: "network", KIND_PLATT: "platt", KIND_AUX: "aux_conv"}
        raise CompatibilityError(
            f"{reader.path}: checkpoint holds {names.get(kind, kind)!r} parameters, "
            f"expected {names[expected_kind]!r}"
        )
    return reader


def load_network_checkpoint(path):
    """Load a network checkpoint as ``(params, regime, dropout)``."""
    reader = _open_checkpoint(path, KIND_NETWORK)
    fingerprint = _read_string(reader)
    if fingerprint != architecture_fingerprint():
        raise CompatibilityError(
            f"{reader.path}: architecture fingerprint {fingerprint!r} does not match "
            f"{architecture_fingerprint()!r}"
        )
    regime = _read_string(reader)
    site_bits, rate, frozen_bits = reader.unpack("<BdB")
    sites = tuple(site for i, site in enumerate(DROPOUT_SITES) if site_bits & (1 << i))
    frozen = tuple(bool(frozen_bits & (1 << i)) for i in range(N_LAYERS))
    weights, biases = [], []
    for k, c_in, c_out, _ in ARCHITECTURE:
        weights.append(reader.grid(1, c_out * c_in * k * k).reshape(c_out, c_in, k, k))
        biases.append(reader.grid(1, c_out).reshape(c_out))
    reader.finish()
    params = NetParams(weights=tuple(weights), biases=tuple(biases), frozen=frozen)
    return params, regime, DropoutConfig(sites=sites, rate=rate)


def save_platt_checkpoint(path, params: PlattParams) -> None:
    blob = WEIGHT_MAGIC + struct.pack("<BB", FORMAT_VERSION, KIND_PLATT)
    blob += struct.pack("<dd", params.a, params.b)
    Path(path).write_bytes(blob)


def load_platt_checkpoint(path) -> PlattParams:
    reader = _open_checkpoint(path, KIND_PLATT)
    a, b = reader.unpack("<dd")
    reader.finish()
    return PlattParams(a=a, b=b)


def save_aux_checkpoint(path, params: AuxConvParams) -> None:
    blob = bytearray()
    blob += WEIGHT_MAGIC + struct.pack("<BB", FORMAT_VERSION, KIND_AUX)
    blob += struct.pack("<I", params.k)
    blob += _grid_bytes(params.kernel)
    blob += struct.pack("<d", params.bias)
    Path(path).write_bytes(bytes(blob))


def load_aux_checkpoint(path) -> AuxConvParams:
    reader = _open_checkpoint(path, KIND_AUX)
    (k,) = reader.unpack("<I")
    if k < 1 or k % 2 == 0:
        raise FormatError(f"{reader.path}: invalid kernel size {k}")
    kernel = reader.grid(k, k)
    (bias,) = reader.unpack("<d")
    reader.finish()
    return AuxConvParams(kernel=kernel, bias=bias)


def checkpoint_kind(path) -> str:
    """Peek at a checkpoint's kind without loading the payload."""
    reader = _Reader(Path(path))
    _check_header(reader, WEIGHT_MAGIC)
    (kind,) = reader.unpack("<B")
    names = {KIND_NETWORK: "network", KIND_PLATT: "platt", KIND_AUX: "aux_conv"}
    if kind not in names:
        raise FormatError(f"{reader.path}: unknown checkpoint kind {kind}")
    return names[kind]
