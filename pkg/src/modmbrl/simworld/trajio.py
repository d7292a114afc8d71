"""Per-step trajectory dumps in a length-prefixed binary container.

Layout (little endian)::

    magic    8 bytes  b"MMBRLTJ\\0"
    version  u32
    count    u64
    records: length u32, then
             design  u16 len + utf-8
             env     u16 len + utf-8
             level, episode, step   i32 x 3
             reward  f64
             state   u32 n + f64 * n
             action  u32 n + f64 * n
             window  u32 n + f64 * n
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MMBRLTJ\0"
VERSION = 1


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class StepRecord:
    design: str
    env: str
    level: int
    episode: int
    step: int
    state: np.ndarray
    action: np.ndarray
    reward: float
    window: np.ndarray


def _vec(v) -> bytes:
    v = np.ascontiguousarray(v, dtype="<f8").reshape(-1)
    return struct.pack("<I", v.size) + v.tobytes()


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_record(r: StepRecord) -> bytes:
    body = (_str(r.design) + _str(r.env) + struct.pack("<iiid", r.level, r.episode, r.step, r.reward)
            + _vec(r.state) + _vec(r.action) + _vec(r.window))
    return struct.pack("<I", len(body)) + body


def write_trajectories(path, records) -> int:
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(records)))
        for r in records:
            fh.write(encode_record(r))
    return len(records)


def _decode(body: memoryview) -> StepRecord:
    pos = 0

    def text():
        nonlocal pos
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2 + n
        return bytes(body[pos - n:pos]).decode("utf-8")

    def vec():
        nonlocal pos
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        v = np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return v

    design, env = text(), text()
    level, episode, step, reward = struct.unpack_from("<iiid", body, pos)
    pos += 20
    state, action, window = vec(), vec(), vec()
    if pos != len(body):
        raise TrajectoryFormatError("record length does not match its contents")
    return StepRecord(design, env, level, episode, step, state, action, reward, window)


def read_trajectories(path) -> list[StepRecord]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise TrajectoryFormatError("not a trajectory dump (bad magic)")
    version, count = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise TrajectoryFormatError(f"unsupported trajectory dump version {version}")
    view = memoryview(blob)
    pos, out = 20, []
    for _ in range(count):
        if pos + 4 > len(blob):
            raise TrajectoryFormatError("truncated trajectory dump")
        (n,) = struct.unpack_from("<I", blob, pos)
        if pos + 4 + n > len(blob):
            raise TrajectoryFormatError("truncated trajectory dump")
        out.append(_decode(view[pos + 4:pos + 4 + n]))
        pos += 4 + n
    if pos != len(blob):
        raise TrajectoryFormatError("trailing bytes after records")
    return out


def export_csv(records, path) -> None:
    """Flat CSV; vector fields become ``state_0..``, ``action_0..``, ``window_0..`` columns."""
    records = list(records)
    if not records:
        Path(path).write_text("design,env,level,episode,step,reward\n")
        return
    nd = max(r.state.size for r in records)
    na = max(r.action.size for r in records)
    nw = max(r.window.size for r in records)
    head = (["design", "env", "level", "episode", "step", "reward"]
            + [f"state_{i}" for i in range(nd)] + [f"action_{i}" for i in range(na)]
            + [f"window_{i}" for i in range(nw)])

    def pad(v, n):
        return [repr(float(x)) for x in v] + [""] * (n - v.size)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for r in records:
            w.writerow([r.design, r.env, r.level, r.episode, r.step, repr(float(r.reward))]
                       + pad(r.state, nd) + pad(r.action, na) + pad(r.window, nw))
