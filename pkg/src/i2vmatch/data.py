"""Synthetic identity sequences and the clip/batch samplers.

Each video is a sequence of frame vectors: identity prototype + camera
offset + a smooth linear drift across the video + per-frame noise, with
occasional occlusion zeroing a contiguous block of coordinates. One video
exists per (identity, camera) pair. Within the retrieval cohort (all
identities, or the held-out ones when ``num_eval_identities`` is set),
the first camera's videos are the designated query videos -- their first
frames serve as the query images -- and the remaining videos form the
gallery. All randomness flows through numpy's PCG64 generator, so a fixed
seed reproduces the dataset bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DATASET_FORMAT = "i2vmatch-dataset/1"


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator knobs.

    ``num_eval_identities`` carves the LAST identities out as a held-out
    retrieval cohort: training batches draw only from the remaining
    (train) identities, whose labels stay contiguous from 0. Left at None,
    the whole cast is used for both training and evaluation (closed
    world).
    """

    num_identities: int = 10
    cameras_per_identity: int = 2
    frames_per_video: tuple[int, int] = (40, 64)  # uniform inclusive range
    input_dim: int = 20
    prototype_scale: float = 1.0
    prototype_rank: int | None = None
    camera_offset_scale: float = 0.4
    drift_scale: float = 0.2
    frame_noise_scale: float = 0.3
    occlusion_prob: float = 0.5
    occlusion_mask_fraction: float = 0.5
    num_eval_identities: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")
        if self.cameras_per_identity < 2:
            raise ValueError("need at least 2 cameras per identity")
        lo, hi = self.frames_per_video
        if lo < 1 or hi < lo:
            raise ValueError(f"bad frames_per_video range {self.frames_per_video}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        for name in ("prototype_scale", "camera_offset_scale", "drift_scale",
                     "frame_noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if not 0.0 <= self.occlusion_mask_fraction <= 1.0:
            raise ValueError("occlusion_mask_fraction must be in [0, 1]")
        if self.prototype_rank is not None and not 1 <= self.prototype_rank <= self.input_dim:
            raise ValueError("prototype_rank must be in 1..input_dim")
        if self.num_eval_identities is not None:
            if not 2 <= self.num_eval_identities <= self.num_identities - 2:
                raise ValueError(
                    "num_eval_identities must leave at least 2 train and "
                    "2 eval identities")

    @property
    def num_train_identities(self) -> int:
        if self.num_eval_identities is None:
            return self.num_identities
        return self.num_identities - self.num_eval_identities


@dataclass
class VideoRecord:
    identity: int
    camera: int
    frames: np.ndarray  # (L, input_dim)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"video needs (L>=1, dim) frames, got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    videos: list[VideoRecord]

    def identities(self) -> list[int]:
        return sorted({v.identity for v in self.videos})

    @property
    def eval_identities(self) -> set[int]:
        idents = self.identities()
        k = self.config.num_eval_identities
        return set(idents if k is None else idents[-k:])

    @property
    def train_identities(self) -> set[int]:
        idents = self.identities()
        k = self.config.num_eval_identities
        return set(idents if k is None else idents[:-k])

    @property
    def train_videos(self) -> list[VideoRecord]:
        train = self.train_identities
        return [v for v in self.videos if v.identity in train]

    @property
    def query(self) -> list[VideoRecord]:
        """Designated query videos: the first camera of every eval identity."""
        first_cam = min(v.camera for v in self.videos)
        evals = self.eval_identities
        return [v for v in self.videos
                if v.camera == first_cam and v.identity in evals]

    @property
    def gallery(self) -> list[VideoRecord]:
        first_cam = min(v.camera for v in self.videos)
        evals = self.eval_identities
        return [v for v in self.videos
                if v.camera != first_cam and v.identity in evals]


@dataclass(frozen=True)
class ClipBatch:
    """P*K clips of T frames each; the flat frame view doubles as the
    image batch (clip-major order)."""

    clips: np.ndarray          # (N, T, input_dim)
    labels: np.ndarray         # (N,)
    provenance: tuple[tuple[int, int, int], ...]  # (identity, camera, start)

    @property
    def frames(self) -> np.ndarray:
        n, t, d = self.clips.shape
        return self.clips.reshape(n * t, d)

    @property
    def frame_labels(self) -> np.ndarray:
        return np.repeat(self.labels, self.clips.shape[1])


def generate_dataset(cfg: SyntheticConfig) -> SyntheticDataset:
    """Deterministically emit one video per (identity, camera) pair.

    With ``prototype_rank`` set, identity prototypes live on a shared
    low-dimensional linear manifold, so coordinates are correlated and an
    occluded block is in principle recoverable from the visible ones -- the
    structure an encoder must pick up to be robust.
    """
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    dim = cfg.input_dim
    if cfg.prototype_rank is None:
        prototypes = cfg.prototype_scale * rng.standard_normal((cfg.num_identities, dim))
    else:
        r = cfg.prototype_rank
        mixing = rng.standard_normal((r, dim)) / np.sqrt(r)
        latents = rng.standard_normal((cfg.num_identities, r))
        prototypes = cfg.prototype_scale * (latents @ mixing)
    videos: list[VideoRecord] = []
    lo, hi = cfg.frames_per_video
    for ident in range(cfg.num_identities):
        for cam in range(cfg.cameras_per_identity):
            offset = cfg.camera_offset_scale * rng.standard_normal(dim)
            length = int(rng.integers(lo, hi + 1))
            drift_a = cfg.drift_scale * rng.standard_normal(dim)
            drift_b = cfg.drift_scale * rng.standard_normal(dim)
            frames = np.empty((length, dim))
            for t in range(length):
                alpha = t / (length - 1) if length > 1 else 0.0
                frame = (prototypes[ident] + offset
                         + (1.0 - alpha) * drift_a + alpha * drift_b
                         + cfg.frame_noise_scale * rng.standard_normal(dim))
                # frame 0 is the enrollment view serving as the query image
                # and stays occlusion-free (it still carries noise)
                if t > 0 and cfg.occlusion_prob > 0 and rng.random() < cfg.occlusion_prob:
                    width = int(round(cfg.occlusion_mask_fraction * dim))
                    if width > 0:
                        start = int(rng.integers(0, dim - width + 1))
                        frame[start:start + width] = 0.0
                frames[t] = frame
            videos.append(VideoRecord(identity=ident, camera=cam, frames=frames))
    return SyntheticDataset(config=cfg, videos=videos)


def sample_clip(video: VideoRecord, t: int, stride: int,
                rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Pick T frames with the given stride from a uniform random start.

    Videos shorter than the required span of (T-1)*stride + 1 frames are
    repeated cyclically until they cover it. Returns the clip and the
    start index (in the possibly-repeated timeline).
    """
    if t < 1 or stride < 1:
        raise ValueError("t and stride must be >= 1")
    length = video.length
    span = (t - 1) * stride + 1
    frames = video.frames
    if length < span:
        reps = -(-span // length)  # ceil
        frames = np.tile(frames, (reps, 1))
        length = frames.shape[0]
    start = int(rng.integers(0, length - span + 1))
    idx = start + stride * np.arange(t)
    return frames[idx].copy(), start


def pk_batch_sampler(dataset: SyntheticDataset, p: int, k: int, t: int,
                     stride: int, rng: np.random.Generator):
    """Endless stream of batches: P train identities, K clips each, T frames.

    Identities with fewer than K videos are sampled with replacement. With
    K=1, the within-modality triplet terms have no positives (only the
    cross-modality pairing through an anchor's own clip survives), so the
    sampler warns once.
    """
    by_identity: dict[int, list[VideoRecord]] = {}
    for v in dataset.train_videos:
        by_identity.setdefault(v.identity, []).append(v)
    idents = sorted(by_identity)
    if len(idents) < p:
        raise ValueError(f"dataset has {len(idents)} train identities, need P={p}")
    if k == 1:
        warnings.warn("K=1 leaves within-modality triplet anchors without positives",
                      stacklevel=2)

    def stream():
        while True:
            chosen = rng.choice(idents, size=p, replace=False)
            clips, labels, prov = [], [], []
            for ident in chosen:
                vids = by_identity[int(ident)]
                replace = len(vids) < k
                picks = rng.choice(len(vids), size=k, replace=replace)
                for vi in picks:
                    video = vids[int(vi)]
                    clip, start = sample_clip(video, t, stride, rng)
                    clips.append(clip)
                    labels.append(video.identity)
                    prov.append((video.identity, video.camera, start))
            yield ClipBatch(clips=np.stack(clips), labels=np.asarray(labels),
                            provenance=tuple(prov))

    return stream()


# ---------------------------------------------------------------------------
# line-oriented text export
# ---------------------------------------------------------------------------

def _format_floats(values: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in values)


def save_dataset(dataset: SyntheticDataset, path) -> None:
    """One record per line: identity, camera, frame count, frame vectors
    (row-major). The header carries the format tag and input_dim."""
    lines = [f"{DATASET_FORMAT} dim={dataset.config.input_dim}"]
    for v in dataset.videos:
        body = _format_floats(v.frames.reshape(-1))
        lines.append(f"{v.identity} {v.camera} {v.length} {body}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path, config: SyntheticConfig | None = None) -> SyntheticDataset:
    """Parse a dataset file back into records.

    The file does not carry the generator config; pass the original
    ``config`` to restore a held-out eval cohort, otherwise every identity
    is treated as part of the retrieval cohort.
    """
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != DATASET_FORMAT:
            raise ValueError(f"not a {DATASET_FORMAT} file: {path}")
        dim = int(header[1].removeprefix("dim="))
        videos = []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ident, cam, length = int(parts[0]), int(parts[1]), int(parts[2])
            values = np.array([float(x) for x in parts[3:]])
            if values.size != length * dim:
                raise ValueError(
                    f"record for identity {ident} camera {cam} has {values.size} "
                    f"values, expected {length * dim}")
            videos.append(VideoRecord(ident, cam, values.reshape(length, dim)))
    if config is None:
        idents = {v.identity for v in videos}
        cams = {v.camera for v in videos}
        lengths = [v.length for v in videos]
        config = SyntheticConfig(num_identities=max(2, len(idents)),
                                 cameras_per_identity=max(2, len(cams)),
                                 frames_per_video=(min(lengths), max(lengths)),
                                 input_dim=dim)
    return SyntheticDataset(config=config, videos=videos)
