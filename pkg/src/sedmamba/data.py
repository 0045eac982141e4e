"""Embedding files, annotation tracks, frame labels and synthetic datasets.

Embedding file layout (little-endian)::

    offset  size  field
    0       4     magic b"SEDE"
    4       4     version (u32, = 1)
    8       8     L, number of frames (u64)
    16      4     D, embedding width (u32)
    20      1     dtype code (u8, 0 = float32)
    21      3     reserved, zero
    24      4*L*D payload, row-major
    ...     4     CRC32 of the payload (u32)

Annotation files are CSV with the header
``video_id,error_type,start_frame,end_frame``; frame indices are at the
native video rate and both bounds are inclusive.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"SEDE"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB3x")
_DTYPES = {0: np.dtype("<f4")}

ERROR_TYPES = tuple(f"E{i}" for i in range(1, 25))
ANNOTATION_HEADER = ["video_id", "error_type", "start_frame", "end_frame"]


@dataclass
class EmbeddingSequence:
    video_id: str
    matrix: np.ndarray  # [L, D] float32
    native_rate: float = 60.0
    sample_rate: float = 5.0

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1 or self.matrix.shape[1] < 1:
            raise DataError(f"{self.video_id}: embedding matrix must be [L>=1, D>=1], got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError(f"{self.video_id}: embedding matrix contains non-finite values")

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


def save_embeddings(path, seq: EmbeddingSequence):
    payload = seq.matrix.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, seq.length, seq.width, 0))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_embeddings(path, video_id: str | None = None, native_rate: float = 60.0,
                    sample_rate: float = 5.0) -> EmbeddingSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"embedding file not found: {path}") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header, missing {_HEADER.size - len(raw)} bytes")
    magic, version, L, D, code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise DataError(f"{path}: unsupported dtype code {code}")
    if L == 0 or D == 0:
        raise DataError(f"{path}: empty sequence in header (L={L}, D={D})")
    dtype = _DTYPES[code]
    n_payload = L * D * dtype.itemsize
    expected = _HEADER.size + n_payload + 4
    if len(raw) < expected:
        raise DataError(f"{path}: truncated payload, missing {expected - len(raw)} bytes")
    if len(raw) > expected:
        raise DataError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    payload = raw[_HEADER.size:_HEADER.size + n_payload]
    (crc,) = struct.unpack_from("<I", raw, _HEADER.size + n_payload)
    if zlib.crc32(payload) != crc:
        raise DataError(f"{path}: checksum mismatch")
    matrix = np.frombuffer(payload, dtype=dtype).reshape(L, D)
    return EmbeddingSequence(video_id or path.stem, matrix.copy(), native_rate, sample_rate)


# ---------------------------------------------------------------------------
# annotations and labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationRecord:
    error_type: str
    start: int
    end: int

    def __post_init__(self):
        if self.error_type not in ERROR_TYPES:
            raise DataError(f"unknown error type {self.error_type!r}")
        if not 0 <= self.start <= self.end:
            raise DataError(f"invalid interval [{self.start}, {self.end}]")


@dataclass
class AnnotationTrack:
    video_id: str
    records: list[AnnotationRecord] = field(default_factory=list)


def load_annotations(path) -> dict[str, AnnotationTrack]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    tracks: dict[str, AnnotationTrack] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ANNOTATION_HEADER:
            raise DataError(f"{path}: header must be {','.join(ANNOTATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            vid, etype, start, end = (c.strip() for c in row)
            try:
                rec = AnnotationRecord(etype, int(start), int(end))
            except ValueError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
            tracks.setdefault(vid, AnnotationTrack(vid)).records.append(rec)
    return tracks


def save_annotations(path, tracks):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_HEADER)
        for track in tracks:
            for r in track.records:
                w.writerow([track.video_id, r.error_type, r.start, r.end])


def sampling_stride(native_rate: float, sample_rate: float) -> int:
    if sample_rate <= 0 or native_rate <= 0:
        raise ConfigError("frame rates must be positive")
    ratio = native_rate / sample_rate
    stride = round(ratio)
    if stride < 1 or not math.isclose(ratio, stride, rel_tol=0, abs_tol=1e-9):
        raise ConfigError(f"native rate {native_rate} is not an integer multiple of sample rate {sample_rate}")
    return stride


def derive_frame_labels(track: AnnotationTrack, native_rate: float, sample_rate: float, length: int) -> np.ndarray:
    """Binary labels for ``length`` sampled frames.

    Sampled frame ``i`` is native frame ``i * stride``; it is an error frame
    when any record's inclusive interval contains it.
    """
    stride = sampling_stride(native_rate, sample_rate)
    native = np.arange(length) * stride
    labels = np.zeros(length, dtype=np.int8)
    for r in track.records:
        labels[(native >= r.start) & (native <= r.end)] = 1
    return labels


@dataclass
class Segment:
    start: int  # sampled frames, inclusive
    end: int
    duration_class: str  # "short" or "long"

    @property
    def duration(self) -> int:
        return self.end - self.start + 1


@dataclass
class LabeledSequence:
    embeddings: EmbeddingSequence
    labels: np.ndarray
    segments: list[Segment] | None = None  # planted ground truth, synthetic data only

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != (self.embeddings.length,):
            raise DataError(f"{self.video_id}: {self.labels.size} labels for {self.embeddings.length} frames")

    @property
    def video_id(self) -> str:
        return self.embeddings.video_id


def load_split(path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    split = json.loads(path.read_text())
    if not isinstance(split, dict) or not {"train", "test"} <= set(split):
        raise DataError(f"{path}: split file needs 'train' and 'test' lists")
    return {k: list(v) for k, v in split.items()}


def load_annotated_videos(embeddings_dir, annotations_path, video_ids, native_rate=60.0,
                          sample_rate=5.0) -> list[LabeledSequence]:
    """Pair ``<video_id>.sede`` files with labels derived from the annotation CSV."""
    tracks = load_annotations(annotations_path)
    out = []
    for vid in video_ids:
        emb = load_embeddings(Path(embeddings_dir) / f"{vid}.sede", vid, native_rate, sample_rate)
        track = tracks.get(vid, AnnotationTrack(vid))
        out.append(LabeledSequence(emb, derive_frame_labels(track, native_rate, sample_rate, emb.length)))
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale stand-in for a real embedding dataset.

    Error segments carry a fixed direction added to a smooth AR(1) noise
    background. Short segments are weaker but oscillate quickly along a
    second direction; long segments are a sustained shift.
    """

    seed: int = 0
    num_sequences: int = 25
    length_min: int = 500
    length_max: int = 700
    width: int = 64
    segment_rate: float = 1 / 80  # planted segments per frame
    short_fraction: float = 0.5
    short_range: tuple[int, int] = (3, 14)
    long_range: tuple[int, int] = (15, 60)
    snr: float = 2.0
    short_amplitude: float = 1.5
    long_amplitude: float = 2.0
    oscillation_period: float = 4.0
    smoothness: float = 0.9
    sample_rate: float = 5.0
    native_rate: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "short_range", tuple(int(v) for v in self.short_range))
        object.__setattr__(self, "long_range", tuple(int(v) for v in self.long_range))
        boundary = 3 * self.sample_rate
        problems = []
        if self.num_sequences < 1:
            problems.append("num_sequences must be >= 1")
        if not 1 <= self.length_min <= self.length_max:
            problems.append("need 1 <= length_min <= length_max")
        if self.width < 1:
            problems.append("width must be >= 1")
        if self.segment_rate < 0:
            problems.append("segment_rate must be >= 0")
        if not 0 <= self.short_fraction <= 1:
            problems.append("short_fraction must lie in [0, 1]")
        lo, hi = self.short_range
        if not 1 <= lo <= hi < boundary:
            problems.append(f"short_range must satisfy 1 <= lo <= hi < {boundary:g}")
        lo, hi = self.long_range
        if not boundary <= lo <= hi:
            problems.append(f"long_range must satisfy {boundary:g} <= lo <= hi")
        if self.snr < 0 or self.short_amplitude < 0 or self.long_amplitude < 0:
            problems.append("snr and amplitudes must be >= 0")
        if not 0 <= self.smoothness < 1:
            problems.append("smoothness must lie in [0, 1)")
        if self.oscillation_period <= 0:
            problems.append("oscillation_period must be positive")
        if problems:
            raise ConfigError("invalid synthetic config: " + "; ".join(problems))
        sampling_stride(self.native_rate, self.sample_rate)

    @property
    def mean_duration(self) -> float:
        return (self.short_fraction * sum(self.short_range) / 2
                + (1 - self.short_fraction) * sum(self.long_range) / 2)

    def segments_for(self, length: int) -> int:
        return int(round(self.segment_rate * length))

    def expected_error_fraction(self) -> float:
        """Mean per-sequence error fraction implied by the duration mix."""
        lengths = np.arange(self.length_min, self.length_max + 1)
        return float(np.mean([self.segments_for(L) / L for L in lengths]) * self.mean_duration)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["short_range"] = list(self.short_range)
        d["long_range"] = list(self.long_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def _directions(cfg: SynthConfig):
    rng = np.random.default_rng([cfg.seed, 0x5ED])
    v = rng.normal(size=cfg.width)
    w = rng.normal(size=cfg.width)
    v /= np.linalg.norm(v)
    if cfg.width > 1:
        w -= (w @ v) * v
    w /= np.linalg.norm(w)
    return v, w


def _place_segments(rng, cfg: SynthConfig, length: int) -> list[Segment]:
    k = cfg.segments_for(length)
    classes = rng.random(k) < cfg.short_fraction
    durations = np.where(
        classes,
        rng.integers(cfg.short_range[0], cfg.short_range[1] + 1, size=k),
        rng.integers(cfg.long_range[0], cfg.long_range[1] + 1, size=k),
    )
    # keep a normal frame between neighbours so segments never merge
    while k and durations.sum() + (k - 1) > length:
        k -= 1
        classes, durations = classes[:k], durations[:k]
    if k == 0:
        return []
    slack = length - int(durations.sum()) - (k - 1)
    cuts = np.sort(rng.integers(0, slack + 1, size=k))
    order = rng.permutation(k)
    segs, pos, used = [], 0, 0
    for j, i in enumerate(order):
        start = pos + (cuts[j] - used)
        used = cuts[j]
        end = start + int(durations[i]) - 1
        segs.append(Segment(int(start), int(end), "short" if classes[i] else "long"))
        pos = end + 2
    return segs


def synth_sequence(cfg: SynthConfig, index: int) -> LabeledSequence:
    rng = np.random.default_rng([cfg.seed, index])
    length = int(rng.integers(cfg.length_min, cfg.length_max + 1))
    eps = rng.normal(size=(length, cfg.width))
    x = np.empty_like(eps)
    rho = cfg.smoothness
    x[0] = eps[0]
    scale = math.sqrt(1 - rho * rho)
    for t in range(1, length):
        x[t] = rho * x[t - 1] + scale * eps[t]

    v, w = _directions(cfg)
    segs = _place_segments(rng, cfg, length)
    labels = np.zeros(length, dtype=np.int8)
    for s in segs:
        sl = slice(s.start, s.end + 1)
        labels[sl] = 1
        if s.duration_class == "short":
            t = np.arange(s.duration)
            osc = np.sin(2 * np.pi * t / cfg.oscillation_period)
            x[sl] += cfg.snr * cfg.short_amplitude * (v[None, :] + osc[:, None] * w[None, :])
        else:
            x[sl] += cfg.snr * cfg.long_amplitude * v[None, :]
    emb = EmbeddingSequence(f"synth_{index:03d}", x, cfg.native_rate, cfg.sample_rate)
    return LabeledSequence(emb, labels, segs)


def synth_generate(cfg: SynthConfig) -> list[LabeledSequence]:
    return [synth_sequence(cfg, i) for i in range(cfg.num_sequences)]


MANIFEST_NAME = "manifest.json"


def build_manifest(cfg: SynthConfig, dataset: list[LabeledSequence]) -> dict:
    return {
        "format": "sedmamba-synth",
        "version": 1,
        "config": cfg.to_dict(),
        "native_rate": cfg.native_rate,
        "sample_rate": cfg.sample_rate,
        "sequences": [
            {
                "video_id": s.video_id,
                "file": f"{s.video_id}.sede",
                "length": s.embeddings.length,
                "width": s.embeddings.width,
                "seed": [cfg.seed, i],
                "segments": [asdict(seg) for seg in s.segments or []],
            }
            for i, s in enumerate(dataset)
        ],
    }


def dumps_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def write_synth_dataset(cfg: SynthConfig, out_dir, force: bool = False) -> dict:
    """Generate ``cfg`` and write one embedding file per sequence plus a manifest."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise DataError(f"{manifest_path} already exists; pass force to overwrite")
    dataset = synth_generate(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seq in dataset:
        save_embeddings(out_dir / f"{seq.video_id}.sede", seq.embeddings)
    manifest = build_manifest(cfg, dataset)
    manifest_path.write_text(dumps_manifest(manifest))
    return manifest


def load_manifest(path) -> list[LabeledSequence]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "sedmamba-synth":
        raise DataError(f"{path}: not a synthetic-dataset manifest")
    out = []
    for entry in manifest["sequences"]:
        emb = load_embeddings(path.parent / entry["file"], entry["video_id"],
                              manifest["native_rate"], manifest["sample_rate"])
        if emb.length != entry["length"]:
            raise DataError(f"{entry['file']}: length {emb.length} != manifest {entry['length']}")
        segs = [Segment(**s) for s in entry["segments"]]
        labels = np.zeros(emb.length, dtype=np.int8)
        for s in segs:
            labels[s.start:s.end + 1] = 1
        out.append(LabeledSequence(emb, labels, segs))
    return out
