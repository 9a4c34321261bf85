"""Canonical JSON emission: sorted keys, fixed float formatting.

Output is byte-identical across runs and platforms: floats render with 9
significant digits ('%.9g'), keys are sorted, separators are fixed, and
non-finite floats are rejected (use explicit sentinels in the schema
instead).  Parsing such a file and re-emitting it is a fixed point because
a 9-digit decimal survives the double round trip exactly.
"""

from __future__ import annotations

import json
import math


def _emit(value, out: list):
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError("non-finite float in canonical JSON")
        if value == int(value) and abs(value) < 1e15:
            out.append(f"{value:.1f}")
        else:
            out.append(f"{value:.9g}")
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=True))
    elif isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if not isinstance(key, str):
                raise TypeError("canonical JSON keys must be strings")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _emit(value[key], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _emit(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot canonicalize {type(value).__name__}")


def canonical_dumps(value) -> str:
    out: list = []
    _emit(value, out)
    return "".join(out)


def canonical_dump_bytes(value) -> bytes:
    return (canonical_dumps(value) + "\n").encode("ascii")


def round9(x: float) -> float:
    """Quantize a float to its canonical 9-significant-digit representation."""
    return float(f"{float(x):.9g}")
