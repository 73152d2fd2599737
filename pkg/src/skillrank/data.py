"""Feature clips, segment sampling, annotation files and the synthetic benchmark."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pairs import PairLabel, PairSet

CLIP_MAGIC = b"FCLP"
CLIP_VERSION = 1


class ClipFormatError(ValueError):
    pass


@dataclass
class FeatureClip:
    """Per-video feature maps, ``data[T, sum(stream_channels), H, W]`` in float32.

    Channels are laid out stream by stream, so a two-stream clip holds the
    appearance channels followed by the motion channels.
    """

    video_id: str
    stream_channels: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        self.stream_channels = tuple(int(c) for c in self.stream_channels)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"clip {self.video_id}: data must be [T>=1, C, H, W], got {self.data.shape}")
        if self.data.shape[1] != sum(self.stream_channels):
            raise ValueError(f"clip {self.video_id}: {self.data.shape[1]} channels but streams "
                             f"declare {self.stream_channels}")

    @property
    def timesteps(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def stream(self, i: int) -> np.ndarray:
        start = sum(self.stream_channels[:i])
        return self.data[:, start:start + self.stream_channels[i]]

    def frames(self, indices: Sequence[int]) -> np.ndarray:
        """Selected timesteps widened to float64, ``[N, C, H, W]``."""
        return self.data[np.asarray(indices, dtype=np.intp)].astype(np.float64)


# -- segment sampling --------------------------------------------------------

def segment_bounds(T: int, N: int) -> list[tuple[int, int]]:
    """Segment ``k`` covers frames ``[floor(k*T/N), floor((k+1)*T/N))``."""
    if T < 1 or N < 1:
        raise ValueError(f"need T >= 1 and N >= 1, got T={T}, N={N}")
    return [(k * T // N, (k + 1) * T // N) for k in range(N)]


def sample_segments(T: int, N: int, mode: str = "test", seed=None) -> list[int]:
    """One frame index per segment.

    ``test`` takes each segment's last frame; ``train`` draws uniformly inside
    the segment from ``seed`` (an int or a ``numpy`` Generator).  Empty
    segments, which occur when T < N, reuse the nearest preceding frame.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = None
    if mode == "train":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for start, end in segment_bounds(T, N):
        if end <= start:
            out.append(max(start - 1, 0))
        elif rng is None:
            out.append(end - 1)
        else:
            out.append(int(rng.integers(start, end)))
    return out


# -- clip files --------------------------------------------------------------

def write_clip(clip: FeatureClip, path) -> None:
    T, _, h, w = clip.data.shape
    header = struct.pack(f"<4sIII{len(clip.stream_channels)}III", CLIP_MAGIC, CLIP_VERSION, T,
                         len(clip.stream_channels), *clip.stream_channels, h, w)
    Path(path).write_bytes(header + clip.data.astype("<f4").tobytes())


def read_clip(path, video_id: Optional[str] = None) -> FeatureClip:
    path = Path(path)
    buf = path.read_bytes()

    def u32(offset: int, what: str) -> int:
        if offset + 4 > len(buf):
            raise ClipFormatError(f"{path}: truncated header, missing {what} at byte {offset}")
        return struct.unpack_from("<I", buf, offset)[0]

    if buf[:4] != CLIP_MAGIC:
        raise ClipFormatError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    version = u32(4, "version")
    if version != CLIP_VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version} at byte 4")
    T = u32(8, "timestep count")
    streams = u32(12, "stream count")
    if T < 1 or streams not in (1, 2):
        raise ClipFormatError(f"{path}: invalid T={T} or stream count {streams} at byte 8")
    channels = tuple(u32(16 + 4 * i, f"channels of stream {i}") for i in range(streams))
    off = 16 + 4 * streams
    h, w = u32(off, "height"), u32(off + 4, "width")
    off += 8
    count = T * sum(channels) * h * w
    expected = off + 4 * count
    if len(buf) != expected:
        raise ClipFormatError(f"{path}: payload length mismatch at byte {off}: expected "
                              f"{expected} bytes in total, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=off).reshape(T, sum(channels), h, w)
    return FeatureClip(video_id or path.stem, channels, data.astype(np.float32))


def load_clips(directory, ids: Optional[Sequence[str]] = None) -> dict[str, FeatureClip]:
    directory = Path(directory)
    if ids is None:
        paths = sorted(directory.glob("*.fclp"))
    else:
        paths = [directory / f"{i}.fclp" for i in ids]
    clips = {}
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"missing clip file {p}")
        clip = read_clip(p)
        clips[clip.video_id] = clip
    return clips


# -- pair annotations --------------------------------------------------------

def parse_pair_line(line: str, lineno: int) -> PairLabel:
    parts = [x.strip() for x in line.split(",")]
    if len(parts) != 3 or not parts[0] or not parts[1]:
        raise ValueError(f"line {lineno}: expected 'id_a,id_b,label', got {line!r}")
    try:
        label = int(parts[2])
        return PairLabel(parts[0], parts[1], label)
    except ValueError as e:
        raise ValueError(f"line {lineno}: {e}") from None


def load_pairs(path) -> PairSet:
    """Read ``id_a,id_b,label`` lines; label-0 lines are counted and dropped."""
    seen: dict[frozenset, tuple[PairLabel, int]] = {}
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        lab = parse_pair_line(line, lineno).canonical()
        if lab.key in seen:
            prev, prev_line = seen[lab.key]
            kind = "duplicate" if prev == lab else "contradictory"
            raise ValueError(f"line {lineno}: {kind} annotation for pair {lab.id_a},{lab.id_b} "
                             f"(first given on line {prev_line})")
        seen[lab.key] = (lab, lineno)
        labels.append(lab)
    return PairSet.from_labels(labels)


def write_pairs(labels: Sequence[PairLabel], path) -> None:
    Path(path).write_text("".join(f"{p.id_a},{p.id_b},{p.label}\n" for p in labels))


# -- synthetic benchmark -----------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-signal dataset parameters.

    Each video gets a skill ``s ~ U(0, 1)``.  A ``patch x patch`` square
    random-walks over the grid; on the first ``signal_channels`` channels of
    stream ``signal_stream`` its values are drawn from ``N(s * gain, noise)``.
    Everything else is ``N(0, background)``.
    """

    videos: int = 60
    t_min: int = 20
    t_max: int = 40
    height: int = 7
    width: int = 7
    stream_channels: tuple[int, ...] = (16, 16)
    patch: int = 2
    signal_channels: int = 2
    gain: float = 2.0
    noise: float = 0.5
    delta: float = 0.1
    seed: int = 0
    background: float = 1.0
    signal_stream: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stream_channels", tuple(int(c) for c in self.stream_channels))
        self.validate()

    def validate(self) -> None:
        if self.videos < 2 or self.t_min < 1 or self.t_max < self.t_min:
            raise ValueError("need at least 2 videos and 1 <= t_min <= t_max")
        if min(self.height, self.width) < 1 or not self.stream_channels:
            raise ValueError("grid and channel counts must be positive")
        if not 1 <= self.patch <= min(self.height, self.width):
            raise ValueError(f"patch size {self.patch} must lie in [1, min(H, W) = "
                             f"{min(self.height, self.width)}]")
        if self.delta <= 0:
            raise ValueError("skill-difference threshold delta must be positive")
        if not 0 <= self.signal_stream < len(self.stream_channels):
            raise ValueError(f"signal_stream {self.signal_stream} out of range")
        if not 0 <= self.signal_channels <= self.stream_channels[self.signal_stream]:
            raise ValueError("more signal channels than the signal stream has")
        if self.noise < 0 or self.background < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def signal_slice(self) -> slice:
        start = sum(self.stream_channels[:self.signal_stream])
        return slice(start, start + self.signal_channels)

    def video_id(self, i: int) -> str:
        return f"v{i:03d}"


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    clips: dict[str, FeatureClip]
    labels: list[PairLabel]
    skills: dict[str, float]
    origins: dict[str, np.ndarray] = field(repr=False)  # [T, 2] patch top-left per frame

    @property
    def pairs(self) -> PairSet:
        return PairSet.from_labels(self.labels)

    def mask(self, video_id: str) -> np.ndarray:
        """Boolean ``[T, H, W]`` patch mask."""
        spec = self.spec
        org = self.origins[video_id]
        m = np.zeros((len(org), spec.height, spec.width), dtype=bool)
        for t, (r, c) in enumerate(org):
            m[t, r:r + spec.patch, c:c + spec.patch] = True
        return m


def pair_label(s_a: float, s_b: float, delta: float) -> int:
    d = s_a - s_b
    return 0 if abs(d) <= delta else (1 if d > 0 else -1)


def generate_video(spec: SyntheticSpec, index: int) -> tuple[FeatureClip, float, np.ndarray]:
    # per-video stream: output does not depend on generation order
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    skill = float(rng.uniform(0.0, 1.0))
    T = int(rng.integers(spec.t_min, spec.t_max + 1))
    h, w, p = spec.height, spec.width, spec.patch
    data = rng.normal(0.0, spec.background, size=(T, sum(spec.stream_channels), h, w))
    origins = np.empty((T, 2), dtype=np.int64)
    pos = np.array([rng.integers(0, h - p + 1), rng.integers(0, w - p + 1)])
    limit = np.array([h - p, w - p])
    sig = spec.signal_slice
    for t in range(T):
        if t:
            pos = np.clip(pos + rng.integers(-1, 2, size=2), 0, limit)
        origins[t] = pos
        r, c = pos
        data[t, sig, r:r + p, c:c + p] = rng.normal(skill * spec.gain, spec.noise,
                                                    size=(spec.signal_channels, p, p))
    return FeatureClip(spec.video_id(index), spec.stream_channels, data), skill, origins


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    clips, skills, origins = {}, {}, {}
    for i in range(spec.videos):
        clip, s, org = generate_video(spec, i)
        clips[clip.video_id] = clip
        skills[clip.video_id] = s
        origins[clip.video_id] = org
    ids = list(clips)
    labels = [PairLabel(a, b, pair_label(skills[a], skills[b], spec.delta))
              for i, a in enumerate(ids) for b in ids[i + 1:]]
    return SyntheticDataset(spec, clips, labels, skills, origins)


def write_ground_truth(dataset: SyntheticDataset, path) -> None:
    with open(path, "w") as f:
        for vid, clip in dataset.clips.items():
            rec = {"id": vid, "skill": dataset.skills[vid],
                   "origins": dataset.origins[vid].tolist()}
            f.write(json.dumps(rec) + "\n")


def read_ground_truth(path) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    skills, origins = {}, {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            skills[rec["id"]] = rec["skill"]
            origins[rec["id"]] = np.asarray(rec["origins"], dtype=np.int64)
    return skills, origins


def write_dataset(dataset: SyntheticDataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    for vid, clip in dataset.clips.items():
        write_clip(clip, out / "clips" / f"{vid}.fclp")
    write_pairs(dataset.labels, out / "pairs.txt")
    write_ground_truth(dataset, out / "ground_truth.jsonl")


def spec_items(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["stream_channels"] = ",".join(map(str, spec.stream_channels))
    return d
