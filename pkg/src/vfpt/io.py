"""Checkpoint container, run configuration, and artifact writers.

The checkpoint is a single self-describing binary file:

    magic "VFPT" | version u32 | entry count u32 | entries...

with each entry

    name length u32 | name (UTF-8) | dtype code u8 (1 = float64) |
    rank u8 | dims (rank x u64) | values (row-major float64)

All integers and floats are little-endian. A save/load round trip
reproduces every tensor bit for bit. All writers go through a
temp-file-and-rename path so a crashed run never leaves a partial
artifact that looks like a result.
"""

from __future__ import annotations

import configparser
import hashlib
import io as _io
import json
import os
import struct
import tempfile

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"VFPT"
VERSION = 1
DTYPE_F64 = 1


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint container

def serialize_tensors(named) -> bytes:
    names = list(named)
    if len(set(names)) != len(names):
        raise FormatError("tensor names must be unique within a container")
    out = _io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<I", len(names)))
    for name in names:
        arr = named[name]
        arr = arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<BB", DTYPE_F64, arr.ndim))
        for dim in arr.shape:
            out.write(struct.pack("<Q", dim))
        out.write(arr.tobytes())
    return out.getvalue()


def save(path, named):
    """Write named tensors (Tensor or ndarray values) to a container file."""
    atomic_write_bytes(path, serialize_tensors(named))


class _Reader:
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.payload):
            raise FormatError(f"truncated while reading {what}", offset=self.offset)
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]


def deserialize_tensors(payload: bytes):
    r = _Reader(payload)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    count = r.u32("entry count")
    named = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        if name in named:
            raise FormatError(f"duplicate tensor name {name!r}", offset=r.offset)
        dtype = r.u8("dtype code")
        if dtype != DTYPE_F64:
            raise FormatError(f"unknown dtype code {dtype}", offset=r.offset - 1)
        rank = r.u8("rank")
        shape = tuple(r.u64("dims") for _ in range(rank))
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(8 * n_values, f"values of {name!r}")
        named[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if r.offset != len(payload):
        raise FormatError("trailing bytes after final entry", offset=r.offset)
    return named


def load(path):
    """Read a container file back into {name: float64 ndarray}."""
    with open(path, "rb") as fh:
        payload = fh.read()
    return deserialize_tensors(payload)


def checksum_tensors(named):
    h = hashlib.sha256()
    for name in sorted(named):
        arr = named[name]
        arr = arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# run configuration

_SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs/out"),
        "backbone_checkpoint": (str, ""),
        "tuned_checkpoint": (str, ""),
    },
    "backbone": {
        "image_size": (int, 32),
        "patch_size": (int, 8),
        "channels": (int, 1),
        "depth": (int, 6),
        "width": (int, 64),
        "heads": (int, 4),
        "mlp_ratio": (int, 4),
        "num_classes_pretrain": (int, 4),
    },
    "prompt": {
        "prompts_per_layer": (int, 10),
        "alpha": (float, 1.0),
        "location": (str, "prepend"),
        "depth_set": (str, ""),  # comma-separated layer indices; empty = all
        "dim_mode": (str, "both"),
        "transform": (str, "fft"),
        "variant": (str, "deep"),
    },
    "train": {
        "epochs": (int, 100),
        "batch_size": (int, 32),
        "base_lr": (float, 0.5),
        "weight_decay": (float, 0.0001),
        "lr_grid": (str, "1.0,0.5,0.1,0.05"),
        "wd_grid": (str, "0.0001,0.0"),
        "seeds": (str, "0,1,2,3,4"),
        "warmup_epochs": (int, 10),
        "momentum": (float, 0.9),
    },
    "data": {
        "name": (str, "task"),
        "kind": (str, "frequency_band"),
        "num_classes": (int, 4),
        "train_count": (int, 800),
        "val_count": (int, 200),
        "test_count": (int, 200),
        "image_size": (int, 32),
        "noise_std": (float, 0.2),
        "seed": (int, 0),
        "source_noise_std": (float, 0.1),
        "source_seed": (int, 100),
    },
    "analysis": {
        "resolution": (int, 41),
        "map_resolution": (int, 5),
        "span": (float, 1.0),
        "tau": (float, 0.01),
        "subset": (int, 512),
        "map_subset": (int, 64),
        "eig_tol": (float, 0.001),
        "eig_maxiter": (int, 200),
        "direction_seed": (int, 0),
        "attention_index": (int, 0),
    },
}


def default_config():
    return {section: {key: default for key, (_, default) in keys.items()}
            for section, keys in _SCHEMA.items()}


def parse_config_text(text):
    """Parse sectioned key=value text; unknown sections or keys are fatal."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    resolved = default_config()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            typ, _ = _SCHEMA[section][key]
            try:
                resolved[section][key] = typ(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for {key!r} in [{section}]: {raw!r}") from exc
    return resolved


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def config_to_text(config):
    lines = []
    for section, keys in config.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def parse_number_list(text, typ=float):
    if not text.strip():
        return ()
    try:
        return tuple(typ(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad numeric list {text!r}") from exc


# ---------------------------------------------------------------------------
# CSV / image writers

def format_float(x):
    return repr(float(x))


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            format_float(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_grid_csv(path, grid):
    write_csv(path, grid.header(), list(grid.rows()))


def write_pgm(path, matrix, sidecar=None):
    """Min-max scaled binary portable graymap plus a sidecar scale record."""
    arr = np.asarray(matrix, dtype=np.float64)
    lo = float(np.nanmin(arr))
    hi = float(np.nanmax(arr))
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((arr - lo) / span * 255.0, 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + scaled.tobytes())
    sidecar = sidecar or (str(path) + ".txt")
    atomic_write_text(sidecar, (
        "pixel = round(255 * (value - min) / (max - min))\n"
        f"min = {format_float(lo)}\nmax = {format_float(hi)}\n"))


def write_manifest(path, command, config, seed, artifacts, extra=None):
    """Resolved-config manifest that pins a run for bit-identical replay."""
    manifest = {
        "command": command,
        "seed": seed,
        "build_id": build_id(),
        "config": config,
        "artifacts": {name: sha256_file(p) for name, p in artifacts.items()
                      if os.path.exists(p)},
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def build_id():
    import subprocess
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    try:
        from importlib.metadata import version
        return "vfpt-" + version("vfpt")
    except Exception:
        return "vfpt-unknown"
