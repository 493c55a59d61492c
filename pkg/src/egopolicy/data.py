"""Clip-bundle persistence: binary payloads, text manifests, subsampling.

On-disk layout is one structured-text manifest plus one binary payload per
clip. Payloads are little-endian throughout: a 16-byte file header, then
tagged sections holding UTF-8 strings or arrays. Every array carries its
own 16-byte header (magic, version, dtype, rank, dims). Bulk arrays are
binary32; camera tracks and end-effector poses are binary64 blocks because
their unit-quaternion invariant (norm within 1e-9 of 1) is not
representable in single precision. Each payload is covered by a CRC-32C
recorded in the manifest, and round trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import geom
from .filtering import FilterReport
from .retarget import EEPose, HandKeypoints21, Side

FORMAT_VERSION = 1
_FILE_MAGIC = b"EGOCLIP1"
_ARR_MAGIC = b"ARR1"
_MANIFEST_MAGIC = "egopolicy-manifest"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

SOURCE_HUMAN = "human"
SOURCE_ROBOT = "robot"


class ChecksumMismatch(Exception):
    """Payload bytes do not match the checksum recorded in the manifest."""


class VersionMismatch(Exception):
    """File was written by an unknown format version."""


class TruncatedFile(Exception):
    """Payload ends before its declared content."""


class EmptyAnnotation(Exception):
    """Language embedding requested for an empty string."""


# ---------------------------------------------------------------------------
# CRC-32C (Castagnoli), slicing-by-8

_CRC_POLY = 0x82F63B78
_CRC_TABLES: list[list[int]] = [[0] * 256 for _ in range(8)]
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ (_CRC_POLY if _c & 1 else 0)
    _CRC_TABLES[0][_i] = _c
for _k in range(1, 8):
    for _i in range(256):
        _prev = _CRC_TABLES[_k - 1][_i]
        _CRC_TABLES[_k][_i] = _CRC_TABLES[0][_prev & 0xFF] ^ (_prev >> 8)


def crc32c(data: bytes, crc: int = 0) -> int:
    c = crc ^ 0xFFFFFFFF
    t0, t1, t2, t3, t4, t5, t6, t7 = _CRC_TABLES
    mv = memoryview(data)
    n = len(mv)
    i = 0
    while n - i >= 8:
        c ^= int.from_bytes(mv[i : i + 4], "little")
        c = (
            t7[c & 0xFF]
            ^ t6[(c >> 8) & 0xFF]
            ^ t5[(c >> 16) & 0xFF]
            ^ t4[(c >> 24) & 0xFF]
            ^ t3[mv[i + 4]]
            ^ t2[mv[i + 5]]
            ^ t1[mv[i + 6]]
            ^ t0[mv[i + 7]]
        )
        i += 8
    t = _CRC_TABLES[0]
    while i < n:
        c = t[(c ^ mv[i]) & 0xFF] ^ (c >> 8)
        i += 1
    return c ^ 0xFFFFFFFF


def atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# array blocks


def _pack_array(a: np.ndarray) -> bytes:
    dtype = np.dtype(a.dtype).newbyteorder("<")
    code = _DTYPE_CODES[np.dtype(dtype)]
    if a.ndim > 4:
        raise ValueError(f"rank {a.ndim} arrays are not supported")
    dims = list(a.shape) + [0] * (4 - a.ndim)
    if any(d > 0xFFFF for d in dims):
        raise ValueError(f"dimension too large for header: {a.shape}")
    header = _ARR_MAGIC + struct.pack("<HBB4H", FORMAT_VERSION, code, a.ndim, *dims)
    return header + np.ascontiguousarray(a, dtype=dtype).tobytes()


def _unpack_array(buf: memoryview, off: int) -> tuple[np.ndarray, int]:
    if off + 16 > len(buf):
        raise TruncatedFile("array header runs past end of payload")
    if bytes(buf[off : off + 4]) != _ARR_MAGIC:
        raise ValueError("bad array magic")
    version, code, rank, *dims = struct.unpack("<HBB4H", buf[off + 4 : off + 16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"array block version {version}, expected {FORMAT_VERSION}")
    if code not in _DTYPES or rank > 4:
        raise ValueError(f"bad array header (dtype {code}, rank {rank})")
    shape = tuple(dims[:rank])
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    end = off + 16 + nbytes
    if end > len(buf):
        raise TruncatedFile("array data runs past end of payload")
    a = np.frombuffer(buf[off + 16 : end], dtype=dtype).reshape(shape).copy()
    return a, end


# ---------------------------------------------------------------------------
# bundles

_CAM_COLS = 13  # fx fy cx cy width height qw qx qy qz tx ty tz


def pack_camera_track(cams: list[geom.CameraModel]) -> np.ndarray:
    rows = []
    for c in cams:
        rows.append(
            [c.fx, c.fy, c.cx, c.cy, float(c.width), float(c.height), *c.pose.q, *c.pose.t]
        )
    return np.asarray(rows, dtype=np.float64).reshape(len(cams), _CAM_COLS)


def unpack_camera_track(track: np.ndarray) -> list[geom.CameraModel]:
    out = []
    for r in np.asarray(track, dtype=np.float64):
        pose = geom.RigidTransform(r[6:10], r[10:13])
        out.append(geom.CameraModel(r[0], r[1], r[2], r[3], int(r[4]), int(r[5]), pose))
    return out


@dataclass
class ClipBundle:
    """One clip: per-frame features, hands, cameras, and training targets.

    Arrays are columnar over the T frames. Hand/EE/label/action blocks are
    optional; the pipeline stages fill them in as the clip moves from raw
    capture to training-ready data.
    """

    clip_id: str
    source: str
    task: str
    annotation: str
    embedding: np.ndarray  # (d,) f32
    features: np.ndarray  # (T, F) f32
    presence: np.ndarray  # (T, 2) bool, per-hand detection flags
    camera_track: np.ndarray  # (T, 13) f64
    plane: np.ndarray | None = None  # (4,) f64, world plane n.x = d
    hands_points3d: np.ndarray | None = None  # (T, 2, 21, 3) f32
    hands_points2d: np.ndarray | None = None  # (T, 2, 21, 2) f32
    hands_confidence: np.ndarray | None = None  # (T, 2) f32
    ee_poses: np.ndarray | None = None  # (T, 2, 8) f64: pos, quat, grip
    ee_valid: np.ndarray | None = None  # (T, 2) bool
    label_waypoints: np.ndarray | None = None  # (T, 2, H+1, 2) f32
    label_valid: np.ndarray | None = None  # (T, 2) bool
    actions: np.ndarray | None = None  # (T, A, action_dim) f32
    sentinel: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=bool))
    keep: np.ndarray | None = None  # (T,) bool, filter survivors

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float32)
        self.features = np.asarray(self.features, dtype=np.float32)
        self.presence = np.asarray(self.presence, dtype=bool)
        self.camera_track = np.asarray(self.camera_track, dtype=np.float64)
        self.sentinel = np.asarray(self.sentinel, dtype=bool)
        for name in ("hands_points3d", "hands_points2d", "hands_confidence",
                     "label_waypoints", "actions"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float32))
        for name in ("plane", "ee_poses"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))
        for name in ("ee_valid", "label_valid"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=bool))
        if self.keep is None:
            self.keep = np.ones(self.n_frames, dtype=bool)
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.source not in (SOURCE_HUMAN, SOURCE_ROBOT):
            raise ValueError(f"unknown source {self.source!r}")
        if self.camera_track.shape != (self.n_frames, _CAM_COLS):
            raise ValueError("camera track shape mismatch")
        if self.source == SOURCE_ROBOT and self.actions is None:
            raise ValueError("robot bundles must carry action chunks")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[0]

    def cameras(self) -> list[geom.CameraModel]:
        return unpack_camera_track(self.camera_track)

    def hand_at(self, t: int, side_index: int) -> HandKeypoints21 | None:
        if self.hands_points3d is None or not self.presence[t, side_index]:
            return None
        return HandKeypoints21(
            np.asarray(self.hands_points3d[t, side_index], dtype=float),
            np.asarray(self.hands_points2d[t, side_index], dtype=float),
            float(self.hands_confidence[t, side_index]),
            Side.LEFT if side_index == 0 else Side.RIGHT,
        )

    def ee_pair_at(self, t: int):
        if self.ee_poses is None:
            return (None, None)
        pair = []
        for s, side in enumerate((Side.LEFT, Side.RIGHT)):
            if not self.ee_valid[t, s]:
                pair.append(None)
                continue
            row = self.ee_poses[t, s]
            pair.append(EEPose(row[:3], row[3:7], float(row[7]), side))
        return tuple(pair)

    def __eq__(self, other) -> bool:  # bitwise equality, used by round-trip tests
        if not isinstance(other, ClipBundle):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None:
                    if (a is None) != (b is None):
                        return False
                elif a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    return False
            elif a != b:
                return False
        return True


def pack_ee_tracks(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Pose-pair list to (T, 2, 8) float64 plus a validity mask."""
    n = len(pairs)
    poses = np.zeros((n, 2, 8), dtype=np.float64)
    valid = np.zeros((n, 2), dtype=bool)
    for t, pair in enumerate(pairs):
        for s, pose in enumerate(pair):
            if pose is None:
                continue
            poses[t, s, :3] = pose.position
            poses[t, s, 3:7] = pose.orientation
            poses[t, s, 7] = pose.grip
            valid[t, s] = True
    return poses, valid


def pack_labels(label_pairs, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(label_pairs)
    wps = np.zeros((n, 2, horizon + 1, 2), dtype=np.float32)
    valid = np.zeros((n, 2), dtype=bool)
    for t, pair in enumerate(label_pairs):
        for s, lbl in enumerate(pair):
            wps[t, s] = lbl.waypoints.astype(np.float32)
            valid[t, s] = lbl.valid
    return wps, valid


_SECTION_ORDER = [
    ("cid ", "clip_id"),
    ("src ", "source"),
    ("task", "task"),
    ("ann ", "annotation"),
    ("emb ", "embedding"),
    ("feat", "features"),
    ("pres", "presence"),
    ("cam ", "camera_track"),
    ("plan", "plane"),
    ("kp3 ", "hands_points3d"),
    ("kp2 ", "hands_points2d"),
    ("conf", "hands_confidence"),
    ("eep ", "ee_poses"),
    ("eev ", "ee_valid"),
    ("lwp ", "label_waypoints"),
    ("lvl ", "label_valid"),
    ("act ", "actions"),
    ("sent", "sentinel"),
    ("keep", "keep"),
]
_FIELD_BY_TAG = {tag: name for tag, name in _SECTION_ORDER}
_BOOL_FIELDS = {"presence", "ee_valid", "label_valid", "sentinel", "keep"}


def serialize_bundle(bundle: ClipBundle) -> bytes:
    sections = []
    for tag, name in _SECTION_ORDER:
        value = getattr(bundle, name)
        if value is None:
            continue
        if isinstance(value, str):
            raw = value.encode("utf-8")
            body = struct.pack("<I", len(raw)) + raw
            kind = 0
        else:
            a = np.asarray(value)
            if a.dtype == bool:
                a = a.astype(np.uint8)
            body = _pack_array(a)
            kind = 1
        sections.append(tag.encode("ascii") + struct.pack("<B3x", kind) + body)
    header = _FILE_MAGIC + struct.pack(
        "<HBBHxx", FORMAT_VERSION, 0 if bundle.source == SOURCE_HUMAN else 1, 0, len(sections)
    )
    return header + b"".join(sections)


def deserialize_bundle(data: bytes) -> ClipBundle:
    buf = memoryview(data)
    if len(buf) < 16:
        raise TruncatedFile("payload shorter than its header")
    if bytes(buf[:8]) != _FILE_MAGIC:
        raise ValueError("not a clip payload")
    version, _source_code, _, n_sections = struct.unpack("<HBBHxx", buf[8:16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"payload version {version}, expected {FORMAT_VERSION}")

    values: dict[str, object] = {}
    off = 16
    for _ in range(n_sections):
        if off + 8 > len(buf):
            raise TruncatedFile("section header runs past end of payload")
        tag = bytes(buf[off : off + 4]).decode("ascii")
        (kind,) = struct.unpack("<B3x", buf[off + 4 : off + 8])
        off += 8
        if kind == 0:
            if off + 4 > len(buf):
                raise TruncatedFile("string length runs past end of payload")
            (length,) = struct.unpack("<I", buf[off : off + 4])
            if off + 4 + length > len(buf):
                raise TruncatedFile("string data runs past end of payload")
            value: object = bytes(buf[off + 4 : off + 4 + length]).decode("utf-8")
            off += 4 + length
        else:
            value, off = _unpack_array(buf, off)
        name = _FIELD_BY_TAG.get(tag)
        if name is None:
            continue  # unknown sections are skipped for forward compatibility
        if name in _BOOL_FIELDS:
            value = np.asarray(value, dtype=bool)
        values[name] = value
    return ClipBundle(**values)  # type: ignore[arg-type]


@dataclass
class ManifestEntry:
    clip_id: str
    filename: str
    offset: int
    size: int
    crc: int
    source: str
    n_frames: int


@dataclass
class DatasetManifest:
    horizon: int = 16
    feature_dim: int = 128
    embed_dim: int = 64
    chunk_len: int = 8
    action_dim: int = 6
    filter_report: FilterReport = field(default_factory=FilterReport)
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate clip ids in manifest")

    def add(self, entry: ManifestEntry) -> None:
        if any(e.clip_id == entry.clip_id for e in self.entries):
            raise ValueError(f"duplicate clip id {entry.clip_id}")
        self.entries.append(entry)

    def dumps(self) -> str:
        rep = self.filter_report.to_record()
        lines = [
            f"{_MANIFEST_MAGIC} {FORMAT_VERSION}",
            f"horizon {self.horizon}",
            f"feature_dim {self.feature_dim}",
            f"embed_dim {self.embed_dim}",
            f"chunk_len {self.chunk_len}",
            f"action_dim {self.action_dim}",
            "filter "
            + " ".join(
                str(rep[k]) for k in ("total", "kept", "camera_motion", "invalid_action", "both_hands_missing")
            ),
            f"clips {len(self.entries)}",
        ]
        for e in self.entries:
            lines.append(
                f"clip {e.clip_id} {e.filename} {e.offset} {e.size} {e.crc:08x} {e.source} {e.n_frames}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise TruncatedFile("empty manifest")
        magic, _, ver = lines[0].partition(" ")
        if magic != _MANIFEST_MAGIC:
            raise ValueError("not a dataset manifest")
        if ver.strip() != str(FORMAT_VERSION):
            raise VersionMismatch(f"manifest version {ver.strip()}, expected {FORMAT_VERSION}")
        kv: dict[str, str] = {}
        entries = []
        fr = FilterReport()
        n_declared = None
        for ln in lines[1:]:
            key, _, rest = ln.partition(" ")
            if key == "clip":
                parts = rest.split()
                if len(parts) != 7:
                    raise ValueError(f"malformed clip line: {ln!r}")
                entries.append(
                    ManifestEntry(
                        parts[0], parts[1], int(parts[2]), int(parts[3]), int(parts[4], 16),
                        parts[5], int(parts[6]),
                    )
                )
            elif key == "filter":
                vals = [int(v) for v in rest.split()]
                fr = FilterReport(*vals)
            elif key == "clips":
                n_declared = int(rest)
            else:
                kv[key] = rest
        if n_declared is not None and n_declared != len(entries):
            raise TruncatedFile(f"manifest declares {n_declared} clips, found {len(entries)}")
        return cls(
            int(kv.get("horizon", 16)),
            int(kv.get("feature_dim", 128)),
            int(kv.get("embed_dim", 64)),
            int(kv.get("chunk_len", 8)),
            int(kv.get("action_dim", 6)),
            fr,
            entries,
        )

    def save(self, path: str) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as f:
            return cls.loads(f.read())


def write_bundle(bundle: ClipBundle, path: str) -> ManifestEntry:
    """Serialize one bundle to ``path`` and return its manifest entry."""
    payload = serialize_bundle(bundle)
    atomic_write_bytes(path, payload)
    return ManifestEntry(
        bundle.clip_id,
        os.path.basename(path),
        0,
        len(payload),
        crc32c(payload),
        bundle.source,
        bundle.n_frames,
    )


def read_bundle(path: str, entry: ManifestEntry) -> ClipBundle:
    """Read and verify one bundle; checksum and size come from the manifest."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < entry.size:
        raise TruncatedFile(f"{path}: {len(data)} bytes, manifest says {entry.size}")
    if crc32c(data) != entry.crc:
        raise ChecksumMismatch(f"{path}: payload checksum mismatch")
    bundle = deserialize_bundle(data)
    if bundle.clip_id != entry.clip_id:
        raise ValueError(f"{path}: clip id {bundle.clip_id!r} != manifest {entry.clip_id!r}")
    return bundle


def load_bundles(manifest_path: str) -> tuple[DatasetManifest, list[ClipBundle]]:
    manifest = DatasetManifest.load(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    bundles = [read_bundle(os.path.join(base, e.filename), e) for e in manifest.entries]
    return manifest, bundles


def save_dataset(bundles: list[ClipBundle], out_dir: str, manifest_name: str = "manifest.txt",
                 **manifest_kwargs) -> DatasetManifest:
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(**manifest_kwargs)
    for b in bundles:
        entry = write_bundle(b, os.path.join(out_dir, f"{b.clip_id}.clip"))
        manifest.add(entry)
    manifest.save(os.path.join(out_dir, manifest_name))
    return manifest


# ---------------------------------------------------------------------------
# language embedding and subsampling


def embed_language(annotation: str, d: int = 64) -> np.ndarray:
    """Deterministic unit-norm embedding of an annotation string.

    A stand-in for a text encoder: the string is hashed to a seed, a
    standard-normal vector is drawn from that seed and normalized. Identical
    strings give bit-identical vectors on every platform.
    """
    if not annotation:
        raise EmptyAnnotation("annotation must be a nonempty string")
    digest = hashlib.sha256(annotation.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    v = np.random.Generator(np.random.PCG64(seed)).standard_normal(d)
    return v / np.linalg.norm(v)


def select_clip_ids(clip_ids: list[str], fraction: float, seed: int) -> list[str]:
    """Deterministic clip-level selection, nested across fractions.

    Clips are ordered by a per-(seed, clip) hash and the first
    round(fraction * N) are taken, so the selection at a smaller fraction is
    always a subset of the selection at a larger one under the same seed.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    count = int(math.floor(fraction * len(clip_ids) + 0.5))
    keyed = sorted(
        clip_ids, key=lambda cid: hashlib.sha256(f"{seed}:{cid}".encode("utf-8")).hexdigest()
    )
    chosen = set(keyed[:count])
    return [cid for cid in clip_ids if cid in chosen]


def subsample(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Clip-level uniform subsampling of a manifest; see select_clip_ids."""
    chosen = set(select_clip_ids([e.clip_id for e in manifest.entries], fraction, seed))
    picked = [e for e in manifest.entries if e.clip_id in chosen]
    return DatasetManifest(
        manifest.horizon,
        manifest.feature_dim,
        manifest.embed_dim,
        manifest.chunk_len,
        manifest.action_dim,
        manifest.filter_report,
        picked,
    )
