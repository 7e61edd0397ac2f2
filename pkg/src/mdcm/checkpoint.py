"""Model checkpoints: a text header followed by a flat binary payload.

Layout (all header lines ASCII, newline-terminated)::

    MDCM-CKPT 1
    step <int>
    count <int>
    <name> <d0,d1,...|()> <element-offset>
    ...          (exactly ``count`` entry lines, header order = payload order)
    END
    <raw little-endian float64 payload>

Entries cover model parameters and running buffers alike; ``step`` carries
the optimizer's position in the learning-rate schedule so a resumed run
continues where the saved one stopped.
"""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError

MAGIC = "MDCM-CKPT 1"


def _shape_token(shape: tuple[int, ...]) -> str:
    return "()" if shape == () else ",".join(str(d) for d in shape)


def _parse_shape(token: str) -> tuple[int, ...]:
    if token == "()":
        return ()
    try:
        dims = tuple(int(d) for d in token.split(","))
    except ValueError:
        raise CheckpointError(f"malformed shape token {token!r}")
    if any(d <= 0 for d in dims):
        raise CheckpointError(f"malformed shape token {token!r}")
    return dims


def save(path: str, arrays: dict[str, np.ndarray], step: int = 0) -> None:
    """Write ``arrays`` (name -> float array) and the schedule ``step``."""
    if step < 0:
        raise CheckpointError(f"step must be >= 0, got {step}")
    lines = [MAGIC, f"step {step}", f"count {len(arrays)}"]
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid entry name {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        lines.append(f"{name} {_shape_token(a.shape)} {offset}")
        offset += a.size
        blobs.append(a.tobytes())  # C-order copy regardless of layout
    header = "\n".join(lines) + "\nEND\n"
    payload = b"".join(blobs)
    data = np.frombuffer(payload, dtype=np.float64)
    payload = data.astype("<f8").tobytes()  # force little-endian explicitly
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def load(path: str) -> tuple[dict[str, np.ndarray], int]:
    """Read a checkpoint; returns (name -> array, step)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end_marker = b"\nEND\n"
    cut = raw.find(end_marker)
    if cut < 0:
        raise CheckpointError("missing END marker in header")
    header = raw[:cut].decode("ascii", errors="replace").split("\n")
    payload = raw[cut + len(end_marker):]
    if not header or header[0] != MAGIC:
        raise CheckpointError(
            f"bad magic line {header[0]!r}, expected {MAGIC!r}")
    if len(header) < 3:
        raise CheckpointError("truncated header")
    try:
        step = int(header[1].split()[1]) if header[1].startswith("step ") \
            else None
        count = int(header[2].split()[1]) if header[2].startswith("count ") \
            else None
    except (IndexError, ValueError):
        raise CheckpointError("malformed step/count lines")
    if step is None or count is None or step < 0 or count < 0:
        raise CheckpointError("malformed step/count lines")
    entries = header[3:]
    if len(entries) != count:
        raise CheckpointError(
            f"header declares {count} entries but lists {len(entries)}")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    for line in entries:
        parts = line.split()
        if len(parts) != 3:
            raise CheckpointError(f"malformed entry line {line!r}")
        name, shape_tok, off_tok = parts
        shape = _parse_shape(shape_tok)
        try:
            off = int(off_tok)
        except ValueError:
            raise CheckpointError(f"malformed offset in {line!r}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if off < 0 or off + n > flat.size:
            raise CheckpointError(
                f"entry {name!r} spans [{off}, {off + n}) but payload has "
                f"{flat.size} elements")
        if name in arrays:
            raise CheckpointError(f"duplicate entry name {name!r}")
        arrays[name] = flat[off:off + n].reshape(shape).copy()
    return arrays, step


def state_arrays(model) -> dict[str, np.ndarray]:
    """Every persistent array of a model: parameters then buffers."""
    out: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        out[f"param.{name}"] = p.data
    for name, b in model.named_buffers().items():
        out[f"buffer.{name}"] = b
    return out


def save_model(path: str, model, step: int = 0) -> None:
    save(path, state_arrays(model), step=step)


def load_into_model(path: str, model) -> int:
    """Restore a model's parameters and buffers in place; returns the step.

    Raises CheckpointError naming the first offending entry on any shape
    mismatch, and listing missing/unexpected names on a key mismatch.
    """
    arrays, step = load(path)
    expected = state_arrays(model)
    missing = sorted(set(expected) - set(arrays))
    unexpected = sorted(set(arrays) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match model: missing={missing} "
            f"unexpected={unexpected}")
    for name, arr in expected.items():
        if arrays[name].shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint has "
                f"{arrays[name].shape}, model expects {arr.shape}")
    params = model.named_parameters()
    buffers = model.named_buffers()
    for name, p in params.items():
        np.copyto(p.data, arrays[f"param.{name}"])
    for name, b in buffers.items():
        np.copyto(b, arrays[f"buffer.{name}"])
    return step
