"""Binary frame and checkpoint files, datasets on disk.

Both file kinds start with ``b"DMCF"``, a ``u32`` format version and a
``u32`` kind tag (1 = frames, 2 = model). All numbers are little-endian.

Frame file (kind 1)::

    u32 d | f64 dt | f64 particle_radius | f64[d] gravity | u32 F | u32 N
    u8[N] type labels
    F x (f32[N*d] positions, f32[N*d] velocities)
    f32[N*d] normals
    u32 L | L bytes of UTF-8 JSON metadata

Checkpoint (kind 2)::

    u32 field count, then per ArchitectureConfig field:
        u16 name length | name | u8 tag | value
        (tag 0: i64, 1: f64, 2: u8 bool, 3: u16 length + UTF-8, 4: u32 count + i64[count])
    u32 tensor count, then per tensor:
        u32 name length | name | u32 rank | u64[rank] dims | f32 values
"""
import io
import json
import os
import struct

import numpy as np

from .data import Scene, TrajectoryDataset
from .network import ArchitectureConfig, param_shapes

MAGIC = b"DMCF"
VERSION = 1
KIND_FRAMES = 1
KIND_MODEL = 2


class FormatError(ValueError):
    pass


def _header(kind):
    return MAGIC + struct.pack("<II", VERSION, kind)


def _check_header(buf, kind):
    head = buf.read(12)
    if len(head) < 12 or head[:4] != MAGIC:
        raise FormatError("not a DMCF file")
    version, got = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})")
    if got != kind:
        raise FormatError(f"file holds kind {got}, expected {kind}")


def _read(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise FormatError("truncated file")
    return b


def _unpack(buf, fmt):
    return struct.unpack(fmt, _read(buf, struct.calcsize(fmt)))


def _f32(buf, count):
    return np.frombuffer(_read(buf, 4 * count), dtype="<f4").copy()


def frames_to_bytes(scene):
    out = io.BytesIO()
    F, N, d = scene.positions.shape
    out.write(_header(KIND_FRAMES))
    out.write(struct.pack("<Idd", d, scene.dt, scene.particle_radius))
    out.write(np.asarray(scene.gravity, dtype="<f8").reshape(d).tobytes())
    out.write(struct.pack("<II", F, N))
    out.write(np.asarray(scene.types, dtype=np.uint8).tobytes())
    for f in range(F):
        out.write(np.asarray(scene.positions[f], dtype="<f4").tobytes())
        out.write(np.asarray(scene.velocities[f], dtype="<f4").tobytes())
    out.write(np.asarray(scene.normals, dtype="<f4").reshape(N, d).tobytes())
    meta = dict(scene.meta)
    meta["name"] = scene.name
    blob = json.dumps(meta, sort_keys=True).encode()
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    return out.getvalue()


def frames_from_bytes(data):
    buf = io.BytesIO(data)
    _check_header(buf, KIND_FRAMES)
    d, dt, radius = _unpack(buf, "<Idd")
    if d not in (1, 2, 3):
        raise FormatError(f"invalid dimension {d}")
    gravity = np.frombuffer(_read(buf, 8 * d), dtype="<f8").astype(float)
    F, N = _unpack(buf, "<II")
    types = np.frombuffer(_read(buf, N), dtype=np.uint8).astype(np.int8)
    pos = np.empty((F, N, d), dtype=np.float32)
    vel = np.empty((F, N, d), dtype=np.float32)
    for f in range(F):
        pos[f] = _f32(buf, N * d).reshape(N, d)
        vel[f] = _f32(buf, N * d).reshape(N, d)
    normals = _f32(buf, N * d).reshape(N, d)
    (L,) = _unpack(buf, "<I")
    meta = json.loads(_read(buf, L).decode())
    if buf.read(1):
        raise FormatError("trailing bytes after payload")
    name = meta.pop("name", "scene")
    return Scene(name, pos.astype(float), vel.astype(float), types, normals.astype(float), dt, gravity, radius,
                 meta=meta)


def write_frames(path, scene):
    with open(path, "wb") as fh:
        fh.write(frames_to_bytes(scene))


def read_frames(path):
    with open(path, "rb") as fh:
        return frames_from_bytes(fh.read())


def _encode_value(v):
    if isinstance(v, bool):
        return struct.pack("<B", 2) + struct.pack("<B", int(v))
    if isinstance(v, int):
        return struct.pack("<Bq", 0, v)
    if isinstance(v, float):
        return struct.pack("<Bd", 1, v)
    if isinstance(v, str):
        b = v.encode()
        return struct.pack("<BH", 3, len(b)) + b
    if isinstance(v, (tuple, list)):
        return struct.pack("<BI", 4, len(v)) + np.asarray(v, dtype="<i8").tobytes()
    raise TypeError(f"cannot encode {type(v).__name__}")


def _decode_value(buf):
    (tag,) = _unpack(buf, "<B")
    if tag == 0:
        return _unpack(buf, "<q")[0]
    if tag == 1:
        return _unpack(buf, "<d")[0]
    if tag == 2:
        return bool(_unpack(buf, "<B")[0])
    if tag == 3:
        (n,) = _unpack(buf, "<H")
        return _read(buf, n).decode()
    if tag == 4:
        (n,) = _unpack(buf, "<I")
        return tuple(int(x) for x in np.frombuffer(_read(buf, 8 * n), dtype="<i8"))
    raise FormatError(f"unknown value tag {tag}")


def checkpoint_to_bytes(params, arch):
    out = io.BytesIO()
    out.write(_header(KIND_MODEL))
    cfg = arch.to_dict()
    out.write(struct.pack("<I", len(cfg)))
    for name, value in cfg.items():
        b = name.encode()
        out.write(struct.pack("<H", len(b)) + b)
        out.write(_encode_value(value))
    names = list(param_shapes(arch))
    out.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(params[name], dtype="<f4")
        b = name.encode()
        out.write(struct.pack("<I", len(b)) + b)
        out.write(struct.pack("<I", arr.ndim))
        out.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        out.write(arr.tobytes())
    return out.getvalue()


def checkpoint_from_bytes(data):
    """Returns ``(params, arch)``; tensors come back as float64 holding the stored f32 values."""
    buf = io.BytesIO(data)
    _check_header(buf, KIND_MODEL)
    (count,) = _unpack(buf, "<I")
    cfg = {}
    for _ in range(count):
        (n,) = _unpack(buf, "<H")
        name = _read(buf, n).decode()
        cfg[name] = _decode_value(buf)
    unknown = set(cfg) - set(ArchitectureConfig.field_names())
    if unknown:
        raise FormatError(f"unknown config fields {sorted(unknown)}")
    arch = ArchitectureConfig(**cfg)
    (count,) = _unpack(buf, "<I")
    params = {}
    for _ in range(count):
        (n,) = _unpack(buf, "<I")
        name = _read(buf, n).decode()
        (rank,) = _unpack(buf, "<I")
        shape = tuple(int(s) for s in np.frombuffer(_read(buf, 8 * rank), dtype="<u8"))
        size = int(np.prod(shape)) if shape else 1
        params[name] = _f32(buf, size).reshape(shape).astype(float)
    if buf.read(1):
        raise FormatError("trailing bytes after payload")
    expected = param_shapes(arch)
    if set(expected) != set(params) or any(expected[k] != params[k].shape for k in expected):
        raise FormatError("tensor names or shapes do not match the stored config")
    return params, arch


def save_checkpoint(path, params, arch):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(params, arch))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


MANIFEST = "manifest.json"


def write_dataset(directory, dataset, extra=None):
    """One frame file per scene plus a JSON manifest listing them."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for scene in dataset:
        fname = f"{scene.name}.dmcf"
        write_frames(os.path.join(directory, fname), scene)
        entries.append(dict(file=fname, name=scene.name, frames=scene.n_frames, particles=scene.n_particles))
    manifest = dict(meta=dataset.meta, scenes=entries)
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_dataset(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    scenes = [read_frames(os.path.join(directory, e["file"])) for e in manifest["scenes"]]
    return TrajectoryDataset(scenes, manifest.get("meta", {}))
