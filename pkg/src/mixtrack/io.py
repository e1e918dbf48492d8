"""Text serialization: tensor golden files, parameter archives, seed streams.

Golden-file format: a header line ``shape: e1 e2 ...`` followed by the
values in row-major order, 17 significant digits (lossless for float64).
Parameter archives stack one ``== <key>`` record per tensor in a single
file, keys being slot path strings.
"""

from __future__ import annotations

import hashlib

import numpy as np


def format_values(arr):
    return " ".join(f"{v:.17g}" for v in np.asarray(arr, dtype=np.float64).reshape(-1))


def dump_tensor(arr):
    arr = np.asarray(arr, dtype=np.float64)
    header = "shape: " + " ".join(str(e) for e in arr.shape)
    return header + "\n" + format_values(arr) + "\n"


def parse_tensor(text):
    lines = text.strip().split("\n", 1)
    head = lines[0]
    if not head.startswith("shape:"):
        raise ValueError(f"bad tensor header: {head!r}")
    shape = tuple(int(t) for t in head[len("shape:") :].split())
    body = lines[1] if len(lines) > 1 else ""
    tokens = body.split()
    values = np.array([float(t) for t in tokens]) if tokens else np.array([])
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise ValueError(f"tensor body has {values.size} values, header implies {expected}")
    return values.reshape(shape)


def save_tensor(path, arr):
    with open(path, "w") as f:
        f.write(dump_tensor(arr))


def load_tensor(path):
    with open(path) as f:
        return parse_tensor(f.read())


def save_archive(path, items):
    """Write a keyed tensor archive; ``items`` yields (key, array) pairs."""
    with open(path, "w") as f:
        for key, arr in items:
            f.write(f"== {key}\n")
            f.write(dump_tensor(arr))


def load_archive(path):
    out = {}
    key = None
    buf = []
    with open(path) as f:
        for line in f:
            if line.startswith("== "):
                if key is not None:
                    out[key] = parse_tensor("".join(buf))
                key = line[3:].strip()
                buf = []
            else:
                buf.append(line)
    if key is not None:
        out[key] = parse_tensor("".join(buf))
    return out


def stable_hash(*parts):
    """Platform-independent 63-bit hash of the string forms of ``parts``."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_stream(root_seed, name):
    """Named child generator: all randomness hangs off (root seed, name)."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & 0x7FFFFFFF, stable_hash(name)]))
