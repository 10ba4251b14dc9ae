"""Bit-exact JSON encoding of numpy arrays for checkpoints and exchange files.

Arrays are stored as base64 of their little-endian bytes, so round-trips are
exact on any platform regardless of native endianness.
"""

from __future__ import annotations

import base64

import numpy as np

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        code = "<f8"
    elif np.issubdtype(arr.dtype, np.integer):
        code = "<i8"
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    data = arr.astype(_DTYPES[code], copy=False).tobytes()
    return {
        "dtype": code,
        "shape": list(arr.shape),
        "data": base64.b64encode(data).decode("ascii"),
    }


def decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    arr = np.frombuffer(raw, dtype=_DTYPES[blob["dtype"]])
    return arr.reshape(blob["shape"]).copy()
