"""Named-array checkpoint tables.

One text file per checkpoint: a header line with a format version tag and
optional config hash, then one line per array holding its name, shape, and
row-major values. Float values are written with ``repr`` so they round-trip
float64 exactly, which keeps re-runs bitwise reproducible.
"""

import hashlib

import numpy as np

FORMAT_TAG = "structobs-arrays"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays, config_hash=""):
    """Write a dict of name -> ndarray; names must not contain whitespace."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{FORMAT_TAG} v{FORMAT_VERSION} config={config_hash}\n")
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            if any(ch.isspace() for ch in name):
                raise CheckpointError(f"array name contains whitespace: {name!r}")
            dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            vals = " ".join(repr(float(v)) for v in arr.reshape(-1))
            fh.write(f"{name} {dims} {vals}\n")


def load_arrays(path):
    """Read a checkpoint table; returns (arrays dict, config hash)."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split()
        if len(parts) != 3 or parts[0] != FORMAT_TAG:
            raise CheckpointError(f"not a {FORMAT_TAG} file: {path}")
        if parts[1] != f"v{FORMAT_VERSION}":
            raise CheckpointError(f"unsupported version {parts[1]} in {path}")
        config_hash = parts[2].removeprefix("config=")
        arrays = {}
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            name, dims = fields[0], fields[1]
            values = np.array([float(v) for v in fields[2:]], dtype=np.float64)
            if dims == "scalar":
                if values.size != 1:
                    raise CheckpointError(f"scalar entry {name!r} has {values.size} values")
                arrays[name] = values.reshape(())
            else:
                shape = tuple(int(d) for d in dims.split("x"))
                if values.size != int(np.prod(shape)):
                    raise CheckpointError(f"entry {name!r}: {values.size} values for shape {shape}")
                arrays[name] = values.reshape(shape)
    return arrays, config_hash


def array_table_hash(arrays):
    """SHA-256 over a canonical encoding of names, shapes, and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
