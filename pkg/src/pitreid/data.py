"""Synthetic video re-id datasets, the on-disk manifest, and PK batching.

Layout of a dataset directory::

    manifest.txt
    frames/<video_id>/<frame_idx>.ppm     (or .pgm for one channel)

Frames are binary Netpbm files (P6 colour, P5 grey) with maxval 65535,
samples stored big-endian; values map linearly onto [0, 1]. 8-bit files are
also accepted on read.

``manifest.txt`` starts with the line ``# pitreid manifest v1`` followed by
one record per line, whitespace separated::

    <video_id> <pedestrian_id> <camera_id> <split> <frame>,<frame>,...

Frame paths are relative to the dataset directory; split is one of
``train``, ``query``, ``gallery``.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .video import select_keyframes

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# pitreid manifest v1"
SPLITS = ("train", "query", "gallery")
PNM_MAXVAL = 65535


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_ids: int = 8
    videos_per_id: int = 4
    frames_per_video: int = 8
    num_cameras: int = 2
    image_height: int = 40
    image_width: int = 28
    channels: int = 3
    noise: float = 0.05
    num_test_ids: int = 0
    block_rows: int = 4
    block_cols: int = 2
    camera_bias: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 2:
            raise DatasetError("num_ids must be >= 2")
        if self.num_cameras < 2 or self.videos_per_id < 2:
            raise DatasetError("every identity needs videos under at least two cameras")
        if self.frames_per_video < 1:
            raise DatasetError("frames_per_video must be >= 1")
        if self.channels not in (1, 3):
            raise DatasetError("channels must be 1 or 3")
        if self.num_test_ids < 0 or self.num_ids - self.num_test_ids < 2:
            raise DatasetError("need at least two training identities")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    pedestrian_id: int
    camera_id: int
    split: str
    frames: tuple

    def line(self):
        return f"{self.video_id} {self.pedestrian_id} {self.camera_id} {self.split} {','.join(self.frames)}"


@dataclass
class VideoSample:
    frames: np.ndarray  # [n_frames, C, H, W]
    pedestrian_id: int
    camera_id: int
    video_id: str


@dataclass
class VideoBatch:
    frames: np.ndarray  # [B, K, C, H, W]
    labels: np.ndarray  # dense training labels [B]
    cameras: np.ndarray  # [B]
    video_ids: list = field(default_factory=list)


# frame files -----------------------------------------------------------------

def write_frame(path, image):
    """Write a [C, H, W] float image in [0, 1] as binary 16-bit PGM (C=1) or PPM (C=3)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DatasetError(f"frame must be [1|3, H, W], got {arr.shape}")
    q = np.clip(np.rint(arr * PNM_MAXVAL), 0, PNM_MAXVAL).astype(">u2")
    magic = b"P5" if arr.shape[0] == 1 else b"P6"
    head = magic + b"\n%d %d\n%d\n" % (arr.shape[2], arr.shape[1], PNM_MAXVAL)
    with open(path, "wb") as fh:
        fh.write(head + q.transpose(1, 2, 0).tobytes())


def read_frame(path):
    """Read a binary PGM/PPM (8- or 16-bit) back to a [C, H, W] float image."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read frame {path}: {exc}") from exc
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and (blob[pos:pos + 1].isspace() or blob[pos:pos + 1] == b"#"):
            if blob[pos:pos + 1] == b"#":
                pos = blob.find(b"\n", pos)
                pos = len(blob) if pos < 0 else pos
            pos += 1
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DatasetError(f"{path}: truncated PNM header")
        fields.append(blob[pos:end])
        pos = end
    pos += 1
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: not a binary PGM/PPM file")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PNM header") from None
    channels = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * channels
    if len(blob) - pos < count * np.dtype(dtype).itemsize:
        raise DatasetError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return data.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float64) / maxval


# manifest --------------------------------------------------------------------

def format_manifest(records):
    return "\n".join([MANIFEST_HEADER] + [r.line() for r in records]) + "\n"


def parse_manifest(text, source="<manifest>"):
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise DatasetError(f"{source}: missing header {MANIFEST_HEADER!r}")
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DatasetError(f"{source}:{lineno}: expected 5 columns, got {len(parts)}")
        vid, pid, cam, split, frames = parts
        if split not in SPLITS:
            raise DatasetError(f"{source}:{lineno}: unknown split {split!r}")
        if vid in seen:
            raise DatasetError(f"{source}:{lineno}: duplicate video id {vid!r}")
        seen.add(vid)
        try:
            records.append(VideoRecord(vid, int(pid), int(cam), split, tuple(frames.split(","))))
        except ValueError:
            raise DatasetError(f"{source}:{lineno}: non-integer id or camera") from None
    if not records:
        raise DatasetError(f"{source}: manifest has no records")
    return records


# generation --------------------------------------------------------------------

def _appearance(rng, spec):
    """Block-colour layout of one identity, [C, H, W]."""
    colours = rng.uniform(0.1, 0.9, size=(spec.channels, spec.block_rows, spec.block_cols))
    rows = np.minimum(np.arange(spec.image_height) * spec.block_rows // spec.image_height,
                      spec.block_rows - 1)
    cols = np.minimum(np.arange(spec.image_width) * spec.block_cols // spec.image_width,
                      spec.block_cols - 1)
    return colours[:, rows[:, None], cols[None, :]]


def synthesize(spec):
    """Generate samples in memory: list of (VideoRecord-without-paths fields, frames)."""
    rng = np.random.default_rng(spec.seed)
    bases = [_appearance(rng, spec) for _ in range(spec.num_ids)]
    biases = rng.uniform(-spec.camera_bias, spec.camera_bias, size=(spec.num_cameras, spec.channels))
    n_train = spec.num_ids - spec.num_test_ids
    out = []
    for pid in range(spec.num_ids):
        for v in range(spec.videos_per_id):
            cam = v % spec.num_cameras
            if pid < n_train:
                split = "train"
            else:
                split = "query" if v == 0 else "gallery"
            frames = bases[pid][None] + biases[cam][None, :, None, None]
            if spec.noise > 0:
                frames = frames + rng.normal(0.0, spec.noise, size=(spec.frames_per_video,) + frames.shape[1:])
            else:
                frames = np.repeat(frames, spec.frames_per_video, axis=0)
            out.append((f"v{pid:04d}_{v:03d}", pid, cam, split, np.clip(frames, 0.0, 1.0)))
    return out


def generate(spec, out_dir):
    """Write frames and ``manifest.txt`` under ``out_dir``; returns the records."""
    root = Path(out_dir)
    ext = "pgm" if spec.channels == 1 else "ppm"
    records = []
    try:
        for vid, pid, cam, split, frames in synthesize(spec):
            vdir = root / "frames" / vid
            vdir.mkdir(parents=True, exist_ok=True)
            paths = []
            for i, frame in enumerate(frames):
                rel = f"frames/{vid}/{i:04d}.{ext}"
                write_frame(root / rel, frame)
                paths.append(rel)
            records.append(VideoRecord(vid, pid, cam, split, tuple(paths)))
        (root / "manifest.txt").write_text(format_manifest(records), encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset under {root}: {exc}") from exc
    return records


# loading -----------------------------------------------------------------------

class DatasetAdapter:
    """What the training and evaluation code needs from a dataset.

    A loader for a real benchmark would subclass this and provide records
    plus frame decoding; nothing else in the package depends on the layout.
    """

    def records(self):
        raise NotImplementedError

    def read_frames(self, record):
        raise NotImplementedError


class ManifestDataset(DatasetAdapter):
    def __init__(self, root, records):
        self.root = Path(root)
        self._records = list(records)
        self._cache = {}

    @classmethod
    def load(cls, path):
        path = Path(path)
        manifest = path / "manifest.txt" if path.is_dir() else path
        try:
            text = manifest.read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read manifest {manifest}: {exc}") from exc
        records = parse_manifest(text, str(manifest))
        ds = cls(manifest.parent, records)
        for r in records:
            for rel in r.frames:
                if not (ds.root / rel).is_file():
                    raise DatasetError(f"missing frame file {ds.root / rel}")
        return ds

    def records(self, split=None):
        if split is None:
            return list(self._records)
        return [r for r in self._records if r.split == split]

    @property
    def splits(self):
        return sorted({r.split for r in self._records})

    def read_frames(self, record):
        if record.video_id not in self._cache:
            self._cache[record.video_id] = np.stack([read_frame(self.root / rel) for rel in record.frames])
        return self._cache[record.video_id]

    def sample(self, record):
        return VideoSample(self.read_frames(record), record.pedestrian_id, record.camera_id, record.video_id)

    def keyframes(self, records, k):
        """[n, K, C, H, W] keyframes for a list of records, in the given order."""
        return np.stack([select_keyframes(self.read_frames(r), k) for r in records])

    def save_manifest(self, path):
        Path(path).write_text(format_manifest(self._records), encoding="utf-8")


def dense_labels(pids):
    """Map arbitrary identity values to 0..n-1 in sorted order."""
    classes = np.unique(pids)
    return classes, np.searchsorted(classes, pids)


def pk_batches(labels, p, q, rng):
    """Index batches of ``p`` identities x ``q`` videos for one epoch.

    Identities are shuffled and consumed ``p`` at a time (a trailing
    incomplete group is dropped). An identity with fewer than ``q`` videos is
    sampled with replacement.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < p:
        raise DatasetError(f"need at least {p} identities for PK batches, have {len(ids)}")
    order = rng.permutation(ids)
    batches = []
    for start in range(0, len(order) - p + 1, p):
        batch = []
        for pid in order[start:start + p]:
            pool = np.flatnonzero(labels == pid)
            replace = len(pool) < q
            if replace:
                log.warning("identity %s has %d videos < %d; sampling with replacement", pid, len(pool), q)
            batch.extend(rng.choice(pool, size=q, replace=replace).tolist())
        batches.append(np.asarray(batch, dtype=np.intp))
    return batches
