"""Retrieval-time pipeline and ranked-retrieval metrics.

Three protocols share one machinery: image-to-video (query = first frame
of each query video through the image network, gallery = full videos
through the video network), image-to-image (both sides are first frames),
and video-to-video (both sides are full videos). Gallery videos are split
into fixed-length clips, each clip is encoded and pooled, and the video's
feature is the mean over its clips. Rankings are by Euclidean distance
with stable index tie-breaking, scored with CMC top-k curves and mean
average precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, no_grad
from .data import SyntheticDataset, VideoRecord
from .encoders import EncoderParams, encode_image, encode_video

PROTOCOLS = ("I2V", "I2I", "V2V")
METRICS_FORMAT = "i2vmatch-metrics/1"


@dataclass
class GalleryIndex:
    """Pooled per-video features with their labels."""

    features: np.ndarray    # (G, D)
    identities: np.ndarray  # (G,)
    cameras: np.ndarray     # (G,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        if not np.all(np.isfinite(self.features)):
            raise ValueError("gallery features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class MetricsReport:
    protocol: str
    cmc: list[float]          # top-1 .. top-K_max
    map: float
    num_queries: int

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if any(b < a - 1e-12 for a, b in zip(self.cmc, self.cmc[1:])):
            raise ValueError("CMC must be non-decreasing in k")
        if not all(0.0 <= c <= 1.0 for c in self.cmc) or not 0.0 <= self.map <= 1.0:
            raise ValueError("metric values must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "format": METRICS_FORMAT,
            "protocol": self.protocol,
            "cmc": list(self.cmc),
            "map": self.map,
            "num_queries": self.num_queries,
        }

    def table(self) -> str:
        ranks = [1, 5, 10, 20]
        cells = [f"top-{r}: {self.cmc[r - 1]:.4f}" for r in ranks if r <= len(self.cmc)]
        cells.append(f"mAP: {self.map:.4f}")
        return f"{self.protocol:>4}  " + "  ".join(cells)


def split_into_clips(frames: np.ndarray, clip_len: int) -> list[np.ndarray]:
    """Consecutive clip_len-frame chunks; a short final chunk is repeated
    cyclically up to clip_len (same duplication rule as training clips)."""
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    length = frames.shape[0]
    if length == 0:
        raise ValueError("empty video")
    clips = []
    for start in range(0, length, clip_len):
        chunk = frames[start:start + clip_len]
        if chunk.shape[0] < clip_len:
            reps = -(-clip_len // chunk.shape[0])
            chunk = np.tile(chunk, (reps, 1))[:clip_len]
        clips.append(chunk)
    return clips


def _pooled_video_feature(video: VideoRecord, params: EncoderParams,
                          clip_len: int) -> np.ndarray:
    feats = []
    for clip in split_into_clips(video.frames, clip_len):
        _, vf = encode_video(clip, params)
        feats.append(vf.data[0])
    return np.mean(feats, axis=0)


def extract_gallery_features(videos: list[VideoRecord], params: EncoderParams,
                             clip_len: int = 32) -> GalleryIndex:
    """Encode each video as the mean of its per-clip pooled features."""
    feats, idents, cams = [], [], []
    with no_grad():
        for v in videos:
            feats.append(_pooled_video_feature(v, params, clip_len))
            idents.append(v.identity)
            cams.append(v.camera)
    return GalleryIndex(np.asarray(feats), np.asarray(idents), np.asarray(cams))


def rank_queries(query_feats: np.ndarray, gallery: GalleryIndex) -> np.ndarray:
    """Per query, gallery indices sorted by ascending Euclidean distance.

    Ties break by gallery index order (stable sort), so rankings are
    deterministic and reproducible.
    """
    q = np.asarray(query_feats, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != gallery.features.shape[1]:
        raise ShapeError(
            f"query features {q.shape} do not match gallery {gallery.features.shape}")
    sq = ((q * q).sum(axis=1)[:, None] + (gallery.features * gallery.features).sum(axis=1)[None, :]
          - 2.0 * q @ gallery.features.T)
    d = np.sqrt(np.maximum(sq, 0.0))
    return np.argsort(d, axis=1, kind="stable")


def _first_hit_ranks(rankings: np.ndarray, query_ids: np.ndarray,
                     gallery_ids: np.ndarray) -> np.ndarray:
    """1-based rank of each query's first correct gallery item."""
    ranks = np.empty(len(query_ids), dtype=np.int64)
    for qi, order in enumerate(rankings):
        hits = np.flatnonzero(gallery_ids[order] == query_ids[qi])
        if hits.size == 0:
            raise ValueError(f"query {qi} (identity {int(query_ids[qi])}) "
                             f"has no correct gallery item")
        ranks[qi] = hits[0] + 1
    return ranks


def cmc(rankings: np.ndarray, query_ids, gallery_ids, k_max: int = 20) -> list[float]:
    """top-k accuracy for k = 1..k_max: the fraction of queries whose first
    correct match appears at rank <= k."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    k_max = min(k_max, rankings.shape[1])
    first = _first_hit_ranks(rankings, query_ids, gallery_ids)
    return [float((first <= k).mean()) for k in range(1, k_max + 1)]


def mean_average_precision(rankings: np.ndarray, query_ids, gallery_ids) -> float:
    """Mean over queries of average precision: per query, the mean of
    precision-at-rank over the ranks holding relevant items."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    _first_hit_ranks(rankings, query_ids, gallery_ids)  # validates coverage
    aps = []
    for qi, order in enumerate(rankings):
        rel = gallery_ids[order] == query_ids[qi]
        hits = np.flatnonzero(rel)
        precisions = (np.arange(1, hits.size + 1)) / (hits + 1)
        aps.append(precisions.mean())
    return float(np.mean(aps))


def _first_frames(videos: list[VideoRecord]) -> np.ndarray:
    return np.stack([v.frames[0] for v in videos])


def _encode_first_frames(videos: list[VideoRecord], params: EncoderParams) -> np.ndarray:
    with no_grad():
        return encode_image(_first_frames(videos), params).data


def run_protocol(protocol: str, dataset: SyntheticDataset, params: EncoderParams,
                 clip_len: int = 32, k_max: int = 20) -> MetricsReport:
    """Evaluate one retrieval protocol on the dataset's query/gallery split."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    queries, gallery_videos = dataset.query, dataset.gallery
    query_ids = np.array([v.identity for v in queries])
    if protocol == "I2V":
        query_feats = _encode_first_frames(queries, params)
        gallery = extract_gallery_features(gallery_videos, params, clip_len)
    elif protocol == "I2I":
        query_feats = _encode_first_frames(queries, params)
        gallery = GalleryIndex(
            _encode_first_frames(gallery_videos, params),
            np.array([v.identity for v in gallery_videos]),
            np.array([v.camera for v in gallery_videos]),
        )
    else:  # V2V
        query_index = extract_gallery_features(queries, params, clip_len)
        query_feats = query_index.features
        gallery = extract_gallery_features(gallery_videos, params, clip_len)
    rankings = rank_queries(query_feats, gallery)
    return MetricsReport(
        protocol=protocol,
        cmc=cmc(rankings, query_ids, gallery.identities, k_max),
        map=mean_average_precision(rankings, query_ids, gallery.identities),
        num_queries=len(queries),
    )
