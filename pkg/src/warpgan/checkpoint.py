"""Binary checkpoint container.

Layout: 4-byte magic, u32 little-endian manifest length, UTF-8 JSON
manifest, raw little-endian float32 array payload.  The manifest lists
array descriptors (name, shape, byte offset into the payload) in
payload order plus a CRC32 of the payload, so corruption is detected
before any array is handed out.  Writes are atomic (temp file then
rename) and canonical (sorted keys, sorted array names), which makes
save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import os
import zlib

import numpy as np

from .errors import CorruptCheckpoint, VersionMismatch

MAGIC = b"WGZ1"
FORMAT_VERSION = 1


def save_checkpoint(path, fields: dict, arrays: dict):
    """Write a checkpoint: JSON-serializable fields plus named arrays."""
    names = sorted(arrays)
    descs = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(arrays[name], dtype="<f4")
        blob = arr.tobytes()  # C-order bytes even for strided views
        descs.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = dict(fields)
    manifest["format_version"] = FORMAT_VERSION
    manifest["arrays"] = descs
    manifest["payload_crc32"] = zlib.crc32(payload)
    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(body)).tobytes())
        f.write(body)
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (fields, arrays as float32 ndarrays)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    n = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if len(raw) < 8 + n:
        raise CorruptCheckpoint(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable manifest: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    payload = raw[8 + n :]
    if zlib.crc32(payload) != manifest.get("payload_crc32"):
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch")
    arrays = {}
    for desc in manifest["arrays"]:
        shape = tuple(desc["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = desc["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CorruptCheckpoint(f"{path}: array {desc['name']} out of bounds")
        arrays[desc["name"]] = (
            np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        )
    fields = {
        k: v
        for k, v in manifest.items()
        if k not in ("arrays", "payload_crc32", "format_version")
    }
    return fields, arrays


def rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    # PCG64 state holds 128-bit ints; stringify for JSON portability
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def rng_state_from_json(d: dict) -> np.random.Generator:
    if d["bit_generator"] != "PCG64":
        raise VersionMismatch(f"unsupported bit generator {d['bit_generator']}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }
    return np.random.Generator(bg)
