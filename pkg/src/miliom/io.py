"""Dataset file formats: scans, IMU, trajectories, maps and manifests.

Readers fail fast with ``path:line`` diagnostics through :class:`DataError`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataError, parse_key_values
from .frontend import BODY, FeatureCloud
from .imu import ImuStream
from .keyframes import Keyframe, KeyframeStore
from .sim import RawScan

SCAN_MAGIC = b"MLSC"
_SCAN_HEADER = struct.Struct("<4siddiQ")
_SCAN_RECORD = np.dtype([("ring", "<i4"), ("dt", "<f8"), ("x", "<f8"), ("y", "<f8"), ("z", "<f8")])


def _fail(path, line, msg):
    raise DataError(f"{path}:{line}: {msg}")


def _floats(path, lineno, parts, count):
    if len(parts) != count:
        _fail(path, lineno, f"expected {count} fields, got {len(parts)}")
    try:
        values = [float(x) for x in parts]
    except ValueError as exc:
        _fail(path, lineno, str(exc))
    if not np.all(np.isfinite(values)):
        _fail(path, lineno, "non-finite value")
    return values


def _data_lines(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}:0: {exc.strerror or exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield lineno, line


# ---------------------------------------------------------------- scans


def write_scan(path, scan: RawScan, binary: bool = False):
    path = Path(path)
    if binary:
        rec = np.empty(len(scan), _SCAN_RECORD)
        rec["ring"] = scan.ring
        rec["dt"] = scan.dt
        rec["x"], rec["y"], rec["z"] = scan.xyz.T
        head = _SCAN_HEADER.pack(SCAN_MAGIC, scan.lidar_id, scan.t_start, scan.t_end,
                                 scan.channel_count, len(scan))
        path.write_bytes(head + rec.tobytes())
        return
    lines = [f"{scan.lidar_id} {scan.t_start!r} {scan.t_end!r} {scan.channel_count}"]
    lines += [f"{r},{d!r},{x!r},{y!r},{z!r}" for r, d, (x, y, z)
              in zip(scan.ring.tolist(), scan.dt.tolist(), scan.xyz.tolist())]
    path.write_text("\n".join(lines) + "\n")


def read_scan(path) -> RawScan:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}:0: {exc.strerror or exc}") from None
    if raw[:4] == SCAN_MAGIC:
        return _read_scan_binary(path, raw)
    rows = list(_data_lines(path))
    if not rows:
        _fail(path, 1, "empty scan file")
    lineno, header = rows[0]
    parts = header.split()
    if len(parts) != 4:
        _fail(path, lineno, "header must be 'lidar_id t_start t_end channel_count'")
    try:
        lidar_id, channels = int(parts[0]), int(parts[3])
        t_start, t_end = float(parts[1]), float(parts[2])
    except ValueError as exc:
        _fail(path, lineno, f"bad header: {exc}")
    if not t_end > t_start:
        _fail(path, lineno, "t_end must exceed t_start")
    ring = np.empty(len(rows) - 1, np.int64)
    data = np.empty((len(rows) - 1, 4))
    for i, (lineno, line) in enumerate(rows[1:]):
        parts = line.split(",")
        values = _floats(path, lineno, parts, 5)
        if values[0] != int(values[0]) or not 0 <= values[0] < channels:
            _fail(path, lineno, f"ring {parts[0]} outside [0, {channels})")
        ring[i] = int(values[0])
        data[i] = values[1:]
    return RawScan(lidar_id, t_start, t_end, channels, ring, data[:, 0], data[:, 1:])


def _read_scan_binary(path, raw: bytes) -> RawScan:
    if len(raw) < _SCAN_HEADER.size:
        _fail(path, 0, "truncated binary header")
    _, lidar_id, t_start, t_end, channels, n = _SCAN_HEADER.unpack_from(raw)
    body = raw[_SCAN_HEADER.size:]
    if len(body) != n * _SCAN_RECORD.itemsize:
        _fail(path, 0, f"expected {n} records, found {len(body) / _SCAN_RECORD.itemsize:g}")
    rec = np.frombuffer(body, _SCAN_RECORD)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    bad = ~np.all(np.isfinite(xyz), axis=1) | ~np.isfinite(rec["dt"]) | (rec["ring"] < 0) | (rec["ring"] >= channels)
    if np.any(bad):
        _fail(path, 0, f"record {int(np.argmax(bad))} is invalid")
    return RawScan(lidar_id, t_start, t_end, channels, rec["ring"].astype(np.int64), rec["dt"].copy(), xyz)


# ---------------------------------------------------------------- IMU


def write_imu(path, imu: ImuStream):
    data = np.column_stack([imu.t, imu.omega, imu.accel])
    lines = ["t,wx,wy,wz,ax,ay,az"] + [",".join(repr(v) for v in row) for row in data.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_imu(path) -> ImuStream:
    rows = []
    for lineno, line in _data_lines(path):
        if not rows and line.replace(" ", "").startswith("t,"):
            continue
        rows.append(_floats(path, lineno, line.split(","), 7))
        if len(rows) > 1 and rows[-1][0] <= rows[-2][0]:
            _fail(path, lineno, "timestamps must increase")
    if len(rows) < 2:
        _fail(path, 1, "need at least two IMU samples")
    data = np.asarray(rows)
    return ImuStream(data[:, 0], data[:, 1:4], data[:, 4:7])


# ---------------------------------------------------------------- trajectories and maps


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray  # [w, x, y, z]


def write_trajectory(path, t, p, q):
    """``t px py pz qx qy qz qw`` per line; quaternions stored as [w, x, y, z] in memory."""
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    data = np.column_stack([np.asarray(t, float), np.asarray(p, float).reshape(-1, 3), q[:, 1:], q[:, :1]])
    Path(path).write_text("".join(" ".join(f"{v:.9f}" for v in row) + "\n" for row in data.tolist()))


def read_trajectory(path) -> Trajectory:
    rows = []
    for lineno, line in _data_lines(path):
        rows.append(_floats(path, lineno, line.split(), 8))
        if len(rows) > 1 and rows[-1][0] < rows[-2][0]:
            _fail(path, lineno, "timestamps must not decrease")
        if abs(np.linalg.norm(rows[-1][4:]) - 1.0) > 1e-3:
            _fail(path, lineno, "quaternion is not unit length")
    if not rows:
        _fail(path, 1, "empty trajectory")
    data = np.asarray(rows)
    q = np.column_stack([data[:, 7], data[:, 4:7]])
    return Trajectory(data[:, 0], data[:, 1:4], q / np.linalg.norm(q, axis=1, keepdims=True))


def write_map(path, xyz, kind):
    Path(path).write_text("".join(f"{x:.6f} {y:.6f} {z:.6f} {int(k)}\n"
                                  for (x, y, z), k in zip(np.asarray(xyz).tolist(), np.asarray(kind).tolist())))


def read_map(path):
    rows = [_floats(path, lineno, line.split(), 4) for lineno, line in _data_lines(path)]
    data = np.asarray(rows).reshape(-1, 4)
    return data[:, :3], data[:, 3].astype(np.int8)


def save_keyframes(path, store: KeyframeStore):
    kfs = store.keyframes
    clouds = [kf.cfc for kf in kfs] or [FeatureCloud.empty(frame=BODY)]
    np.savez(
        path,
        id=np.array([kf.id for kf in kfs], dtype=np.int64),
        q=np.array([kf.q for kf in kfs]).reshape(-1, 4),
        p=np.array([kf.p for kf in kfs]).reshape(-1, 3),
        t=np.array([[kf.cfc.t_start, kf.cfc.t_end] for kf in kfs]).reshape(-1, 2),
        sizes=np.array([len(kf.cfc) for kf in kfs], dtype=np.int64),
        xyz=np.vstack([c.xyz for c in clouds]),
        dt=np.concatenate([c.dt for c in clouds]),
        kind=np.concatenate([c.kind for c in clouds]),
        source=np.concatenate([c.source for c in clouds]),
    )


def load_keyframes(path, store: KeyframeStore | None = None) -> KeyframeStore:
    """Rebuild a store from :func:`save_keyframes` output without re-running admission."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}:0: cannot read keyframe archive ({exc})") from None
    store = store or KeyframeStore()
    bounds = np.concatenate([[0], np.cumsum(data["sizes"])])
    for i in range(len(data["id"])):
        sl = slice(bounds[i], bounds[i + 1])
        cfc = FeatureCloud(float(data["t"][i, 0]), float(data["t"][i, 1]), data["xyz"][sl], data["dt"][sl],
                           data["kind"][sl], data["source"][sl], BODY)
        store.keyframes.append(Keyframe(int(data["id"][i]), data["q"][i], data["p"][i], cfc))
    store._next_id = int(data["id"].max()) + 1 if len(data["id"]) else 0
    store._tree = None
    return store


# ---------------------------------------------------------------- manifest


@dataclass
class Manifest:
    root: Path
    lidars: dict[int, Path]
    primary: int
    imu: Path
    ground_truth: Path | None = None
    config: Path | None = None

    def scan_files(self) -> list[Path]:
        files = []
        for lid in sorted(self.lidars):
            files += sorted(p for p in self.lidars[lid].iterdir() if p.is_file())
        return files


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        values = parse_key_values(path)
    except OSError as exc:
        raise DataError(f"{path}:0: {exc.strerror or exc}") from None
    root = path.parent / values.pop("root", (".", 0))[0]
    lidars, lines = {}, {}
    for key in [k for k in values if k.startswith("lidar.")]:
        raw, line = values.pop(key)
        try:
            lid = int(key.split(".", 1)[1])
        except ValueError:
            _fail(path, line, f"bad lidar key {key!r}")
        lidars[lid] = root / raw
        lines[lid] = line
    if not lidars:
        _fail(path, 1, "no lidar.N entries")
    for lid, d in lidars.items():
        if not d.is_dir():
            _fail(path, lines[lid], f"scan directory {d} does not exist")

    def required(key):
        if key not in values:
            _fail(path, 1, f"missing key {key!r}")
        return values.pop(key)

    primary_raw, line = required("primary")
    try:
        primary = int(primary_raw)
    except ValueError:
        _fail(path, line, f"primary must be a lidar id, got {primary_raw!r}")
    if primary not in lidars:
        _fail(path, line, f"primary lidar {primary} has no lidar.{primary} entry")

    def existing(key, optional=False):
        if optional and key not in values:
            return None
        raw, line = required(key)
        p = root / raw
        if not p.is_file():
            _fail(path, line, f"{key} file {p} does not exist")
        return p

    imu = existing("imu")
    gt = existing("ground_truth", optional=True)
    cfg = existing("config", optional=True)
    for key, (_, line) in values.items():
        _fail(path, line, f"unknown manifest key {key!r}")
    return Manifest(root, lidars, primary, imu, gt, cfg)


def load_scans(manifest: Manifest) -> list[RawScan]:
    scans = []
    for lid in sorted(manifest.lidars):
        for f in sorted(p for p in manifest.lidars[lid].iterdir() if p.is_file()):
            scan = read_scan(f)
            if scan.lidar_id != lid:
                _fail(f, 1, f"lidar id {scan.lidar_id} does not match directory for lidar {lid}")
            scans.append(scan)
    return sorted(scans, key=lambda s: (s.t_start, s.lidar_id))


def write_dataset(out, scans: list[RawScan], imu: ImuStream, ground_truth=None, primary: int = 1,
                  config_text: str | None = None, binary: bool = False) -> Path:
    """Write a dataset directory with a manifest; returns the manifest path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted({s.lidar_id for s in scans})
    suffix = ".bin" if binary else ".txt"
    for lid in ids:
        (out / f"lidar_{lid}").mkdir(exist_ok=True)
    for s in scans:
        write_scan(out / f"lidar_{s.lidar_id}" / f"{s.t_start:015.6f}{suffix}", s, binary)
    write_imu(out / "imu.csv", imu)
    lines = ["root = ."] + [f"lidar.{lid} = lidar_{lid}" for lid in ids]
    lines += [f"primary = {primary}", "imu = imu.csv"]
    if ground_truth is not None:
        write_trajectory(out / "ground_truth.txt", *ground_truth)
        lines.append("ground_truth = ground_truth.txt")
    if config_text is not None:
        (out / "config.txt").write_text(config_text)
        lines.append("config = config.txt")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
