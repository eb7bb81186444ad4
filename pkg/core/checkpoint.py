"""
Model checkpoint files and format-version handling.

Layout:
    8 bytes   magic b"HRNNCKPT"
    4 bytes   header length N, uint32 little-endian
    N bytes   UTF-8 JSON header (format version, model config, vocabulary hash,
              seed, array names and shapes in file order, extra metadata)
    ...       each array as 32-bit little-endian floats, C order, in header order

Model parameters come first in ``ModelParams.named_parameters`` order,
followed by optimizer state arrays named ``adam.m.<param>`` / ``adam.v.<param>``.
"""

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.hrnn import ModelConfig, ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"HRNNCKPT"
FORMAT_VERSION = "1.0.0"
ARRAY_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written, read or does not match the model."""
    pass


@dataclass
class VersionInfo:
    major: int
    minor: int
    patch: int
    prerelease: Optional[str] = None

    def __str__(self):
        text = f"{self.major}.{self.minor}.{self.patch}"
        if self.prerelease:
            text += f"-{self.prerelease}"
        return text


def parse_version(version_string: str) -> Optional[VersionInfo]:
    """Parse "1.2.3" or "v1.2.3-beta"; None when it does not match."""
    if not version_string:
        return None
    match = re.match(r'^(\d+)\.(\d+)\.(\d+)(?:-([a-zA-Z0-9.-]+))?$', version_string.lstrip('v'))
    if not match:
        return None
    return VersionInfo(int(match.group(1)), int(match.group(2)), int(match.group(3)), match.group(4))


def compare_versions(version1: str, version2: str) -> int:
    """-1, 0 or 1 like a classic cmp; prereleases sort before their release."""
    v1, v2 = parse_version(version1), parse_version(version2)
    if not v1 or not v2:
        return (version1 > version2) - (version1 < version2)
    for a, b in ((v1.major, v2.major), (v1.minor, v2.minor), (v1.patch, v2.patch)):
        if a != b:
            return (a > b) - (a < b)
    if v1.prerelease is None and v2.prerelease is not None:
        return 1
    if v1.prerelease is not None and v2.prerelease is None:
        return -1
    if v1.prerelease is not None and v2.prerelease is not None:
        return (v1.prerelease > v2.prerelease) - (v1.prerelease < v2.prerelease)
    return 0


def is_compatible(file_version: str) -> bool:
    """Same major version and not newer than this reader."""
    parsed, ours = parse_version(file_version), parse_version(FORMAT_VERSION)
    if parsed is None:
        return False
    return parsed.major == ours.major and compare_versions(file_version, FORMAT_VERSION) <= 0


@dataclass
class Checkpoint:
    """Parameters plus the metadata needed to resume or score."""
    config: ModelConfig
    params: Dict[str, np.ndarray]
    vocab_hash: str = ""
    seed: int = 0
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)

    def build_params(self) -> ModelParams:
        """
        ModelParams for ``config`` loaded with the stored values.

        Raises:
            CheckpointError: If names or shapes do not match the model
        """
        model = ModelParams.zeros(self.config)
        expected = [(name, p.shape) for name, p in model.named_parameters()]
        stored = [(name, self.params[name].shape) for name in self.params]
        if expected != stored:
            raise CheckpointError(f"Checkpoint arrays {stored} do not match model layout {expected}")
        model.load_values(self.params)
        return model


def save_checkpoint(path: str, params: ModelParams, vocab_hash: str = "", seed: int = 0,
                    optimizer_state: Optional[Dict[str, np.ndarray]] = None,
                    extra: Optional[Dict[str, object]] = None) -> Path:
    """Write ``params`` (and optional optimizer state) in the documented layout."""
    arrays: List[Tuple[str, np.ndarray]] = [(name, p.value) for name, p in params.named_parameters()]
    optimizer_names = []
    for name in sorted(optimizer_state or {}):
        arrays.append((name, optimizer_state[name]))
        optimizer_names.append(name)
    header = {
        "format_version": FORMAT_VERSION,
        "model": params.config.to_dict(),
        "vocab_hash": vocab_hash,
        "seed": seed,
        "arrays": [{"name": name, "shape": list(np.shape(value))} for name, value in arrays],
        "optimizer_arrays": optimizer_names,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, value in arrays:
            f.write(np.ascontiguousarray(value, dtype=ARRAY_DTYPE).tobytes())
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: str, expected_vocab_hash: Optional[str] = None) -> Checkpoint:
    """
    Read and validate a checkpoint.

    Raises:
        CheckpointError: On a bad magic, incompatible version, truncated data,
            shape mismatch or vocabulary hash mismatch
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint")
    offset = len(MAGIC)
    if len(data) < offset + 4:
        raise CheckpointError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<I", data[offset:offset + 4])
    offset += 4
    try:
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})")
    offset += header_len

    version = header.get("format_version", "")
    if not is_compatible(version):
        raise CheckpointError(f"{path}: format version {version} is not readable by {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(header["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model config ({e})")
    if expected_vocab_hash is not None and header.get("vocab_hash") != expected_vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash does not match the current vocabulary")

    optimizer_names = set(header.get("optimizer_arrays", []))
    params: Dict[str, np.ndarray] = {}
    optimizer_state: Dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * ARRAY_DTYPE.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: array {entry['name']} is truncated")
        value = np.frombuffer(data, dtype=ARRAY_DTYPE, count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
        (optimizer_state if entry["name"] in optimizer_names else params)[entry["name"]] = value
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    checkpoint = Checkpoint(
        config=config,
        params=params,
        vocab_hash=header.get("vocab_hash", ""),
        seed=int(header.get("seed", 0)),
        optimizer_state=optimizer_state,
        extra=header.get("extra", {}),
    )
    checkpoint.build_params()
    return checkpoint
