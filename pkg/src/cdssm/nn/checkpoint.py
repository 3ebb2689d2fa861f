"""Plain-text parameter checkpoints.

Each tensor is a block::

    tensor <name>
    shape <n0> <n1> ...
    <value> <value> ...        (row-major, 17 significant digits, 8 per line)

Blocks are separated by a blank line.  Lines starting with ``#`` are
comments; ``meta <key> <json>`` lines carry free-form metadata.  17 digits
round-trip every float64 exactly.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

PER_LINE = 8


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dumps(tensors, meta: dict | None = None) -> str:
    lines = ["# cdssm checkpoint v1"]
    for key, val in sorted((meta or {}).items()):
        lines.append(f"meta {key} {json.dumps(val, sort_keys=True)}")
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=np.float64)
        lines.append("")
        lines.append(f"tensor {name}")
        lines.append("shape " + " ".join(str(n) for n in a.shape))
        flat = a.ravel()
        for i in range(0, flat.size, PER_LINE):
            lines.append(" ".join(_fmt(v) for v in flat[i : i + PER_LINE]))
    return "\n".join(lines) + "\n"


def loads(text: str):
    """Parse checkpoint text into ``(OrderedDict name -> array, meta dict)``."""
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    meta: dict = {}
    name = shape = None
    values: list[float] = []

    def flush():
        nonlocal name, shape, values
        if name is None:
            return
        n = int(np.prod(shape)) if shape else 1
        if len(values) != n:
            raise ValueError(f"tensor {name!r}: expected {n} values, found {len(values)}")
        tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
        name, shape, values = None, None, []

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, _, rest = line.partition(" ")
        if head == "meta":
            key, _, payload = rest.partition(" ")
            meta[key] = json.loads(payload)
        elif head == "tensor":
            flush()
            name = rest.strip()
            if name in tensors:
                raise ValueError(f"duplicate tensor {name!r}")
        elif head == "shape":
            if name is None:
                raise ValueError(f"line {lineno}: shape before tensor")
            shape = tuple(int(s) for s in rest.split())
        else:
            if name is None or shape is None:
                raise ValueError(f"line {lineno}: values outside a tensor block")
            try:
                values.extend(float(s) for s in line.split())
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
    flush()
    return tensors, meta


def save(path, tensors, meta: dict | None = None) -> None:
    Path(path).write_text(dumps(tensors, meta), encoding="utf-8")


def load(path):
    return loads(Path(path).read_text(encoding="utf-8"))
