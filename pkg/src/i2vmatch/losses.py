"""Training objective: classification, four-way hard-mined triplets, and
the two cross-network transfer losses.

The transfer losses pull per-frame image features toward the video
encoder's frame features -- directly (mean squared error) and structurally
(matching the two cross-sample distance matrices). By default they do not
send gradient into the video branch: the video features act as a fixed
target within each step, since letting the transfer losses reshape the
video network would push its attention blocks toward zero and destroy the
temporal modelling the image branch is supposed to inherit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    frobenius_sq,
    gather,
    log_softmax_rows,
    matmul,
    mean_all,
    pairwise_euclidean,
    relu,
    scale,
    shift,
    sub,
)

TERM_NAMES = ("cls", "tri_i2v", "tri_v2i", "tri_i2i", "tri_v2v",
              "transfer_feat", "transfer_dist")


@dataclass(frozen=True)
class LossConfig:
    """Enable flags and knobs for every term of the objective.

    ``bp_to_video`` is off by default: the transfer losses then treat the
    video branch as a detached target and send it no gradient.
    """

    num_identities: int
    margin: float = 0.3
    use_cls: bool = True
    use_i2v: bool = True
    use_v2i: bool = True
    use_i2i: bool = True
    use_v2v: bool = True
    use_transfer_feat: bool = True
    use_transfer_dist: bool = True
    bp_to_video: bool = False

    def __post_init__(self):
        if self.num_identities < 1:
            raise ValueError("num_identities must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not any([self.use_cls, self.use_i2v, self.use_v2i, self.use_i2i,
                    self.use_v2v, self.use_transfer_feat, self.use_transfer_dist]):
            raise ValueError("at least one loss term must be enabled")

    def enabled_terms(self) -> tuple[str, ...]:
        flags = {
            "cls": self.use_cls,
            "tri_i2v": self.use_i2v,
            "tri_v2i": self.use_v2i,
            "tri_i2i": self.use_i2i,
            "tri_v2v": self.use_v2v,
            "transfer_feat": self.use_transfer_feat,
            "transfer_dist": self.use_transfer_dist,
        }
        return tuple(name for name in TERM_NAMES if flags[name])


@dataclass
class BatchFeatures:
    """Features of one training batch.

    Row (n, t) of ``image_feats`` and ``frame_feats`` encode the same
    physical frame, through the image and video networks respectively;
    ``video_feats`` holds the temporally pooled clip features.
    """

    image_feats: Tensor    # (N*T, D)
    frame_feats: Tensor    # (N*T, D)
    video_feats: Tensor    # (N, D)
    labels: np.ndarray     # (N,) identity per clip

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n_frames = self.image_feats.data.shape[0]
        if self.frame_feats.data.shape != self.image_feats.data.shape:
            raise ShapeError(
                f"image/frame feature shapes disagree: "
                f"{self.image_feats.data.shape} vs {self.frame_feats.data.shape}"
            )
        n = self.video_feats.data.shape[0]
        if n == 0 or n_frames % n != 0:
            raise ShapeError(
                f"{n_frames} frame rows do not divide into {n} clips")
        if self.labels.shape != (n,):
            raise ShapeError(f"labels shape {self.labels.shape} != ({n},)")

    @property
    def num_clips(self) -> int:
        return self.video_feats.data.shape[0]

    @property
    def frames_per_clip(self) -> int:
        return self.image_feats.data.shape[0] // self.num_clips

    @property
    def frame_labels(self) -> np.ndarray:
        return np.repeat(self.labels, self.frames_per_clip)


@dataclass
class ClassifierParams:
    """One linear identity classifier shared by both modalities."""

    w: Tensor  # (D, num_identities)

    @classmethod
    def init(cls, feature_dim: int, num_identities: int, seed: int = 0) -> "ClassifierParams":
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((feature_dim, num_identities)) / np.sqrt(feature_dim)
        return cls(w=Tensor(w, requires_grad=True))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"classifier.w": self.w}


def _target(feats: Tensor, bp_to_video: bool) -> Tensor:
    return feats if bp_to_video else feats.detach()


def feature_transfer_loss(bf: BatchFeatures, bp_to_video: bool = False) -> Tensor:
    """Mean over frames of the squared distance between each image feature
    and the matching video frame feature."""
    target = _target(bf.frame_feats, bp_to_video)
    diff = sub(bf.image_feats, target)
    return scale(frobenius_sq(diff), 1.0 / bf.image_feats.data.shape[0])


def distance_transfer_loss(bf: BatchFeatures, bp_to_video: bool = False) -> Tensor:
    """Squared Frobenius mismatch of the two cross-sample distance matrices,
    scaled by 1/(N*T). Depends only on pairwise distances, so it is blind
    to any joint isometry of either feature set."""
    n_frames = bf.image_feats.data.shape[0]
    if n_frames < 2:
        raise ShapeError("distance matching needs at least two frames in the batch")
    target = _target(bf.frame_feats, bp_to_video)
    d_img = pairwise_euclidean(bf.image_feats, bf.image_feats)
    d_vid = pairwise_euclidean(target, target)
    return scale(frobenius_sq(sub(d_img, d_vid)), 1.0 / n_frames)


def batch_hard_triplet(
    anchors: Tensor,
    candidates: Tensor,
    anchor_labels: np.ndarray,
    candidate_labels: np.ndarray,
    margin: float,
    exclude_self: bool = False,
) -> Tensor:
    """Mean hinge over anchors with the farthest positive and nearest
    negative mined inside the batch.

    ``exclude_self`` removes the diagonal pairing and must be set when
    anchors and candidates are the same feature set.
    """
    anchor_labels = np.asarray(anchor_labels)
    candidate_labels = np.asarray(candidate_labels)
    same = anchor_labels[:, None] == candidate_labels[None, :]
    positive = same.copy()
    negative = ~same
    if exclude_self:
        if anchors.data.shape[0] != candidates.data.shape[0]:
            raise ShapeError("exclude_self requires equally many anchors and candidates")
        np.fill_diagonal(positive, False)
    missing_pos = ~positive.any(axis=1)
    if missing_pos.any():
        ident = int(anchor_labels[int(np.argmax(missing_pos))])
        raise ValueError(f"anchor of identity {ident} has no positive candidate in batch")
    missing_neg = ~negative.any(axis=1)
    if missing_neg.any():
        ident = int(anchor_labels[int(np.argmax(missing_neg))])
        raise ValueError(f"anchor of identity {ident} has no negative candidate in batch")

    dists = pairwise_euclidean(anchors, candidates)
    d = dists.data
    # mining is a data-dependent selection; gradients flow through the
    # selected entries only (first index wins ties, deterministically)
    pos_idx = np.argmax(np.where(positive, d, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(negative, d, np.inf), axis=1)
    rows = np.arange(d.shape[0])
    hardest_pos = gather(dists, rows, pos_idx)
    hardest_neg = gather(dists, rows, neg_idx)
    hinge = relu(shift(sub(hardest_pos, hardest_neg), margin))
    return mean_all(hinge)


def integrated_triplet_loss(bf: BatchFeatures, cfg: LossConfig) -> Tensor:
    """Sum of the enabled cross- and within-modality triplet terms."""
    terms = triplet_terms(bf, cfg)
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    if total is None:
        return Tensor(0.0)
    return total


def triplet_terms(bf: BatchFeatures, cfg: LossConfig) -> dict[str, Tensor]:
    i, v = bf.image_feats, bf.video_feats
    fl, cl = bf.frame_labels, bf.labels
    m = cfg.margin
    terms: dict[str, Tensor] = {}
    if cfg.use_i2v:
        # an image anchor's own clip counts as a positive
        terms["tri_i2v"] = batch_hard_triplet(i, v, fl, cl, m)
    if cfg.use_v2i:
        terms["tri_v2i"] = batch_hard_triplet(v, i, cl, fl, m)
    if cfg.use_i2i:
        terms["tri_i2i"] = batch_hard_triplet(i, i, fl, fl, m, exclude_self=True)
    if cfg.use_v2v:
        terms["tri_v2v"] = batch_hard_triplet(v, v, cl, cl, m, exclude_self=True)
    return terms


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of row-wise logits against integer labels."""
    n = logits.data.shape[0]
    picked = gather(log_softmax_rows(logits), np.arange(n), labels)
    return scale(mean_all(picked), -1.0)


def classification_loss(bf: BatchFeatures, cls: ClassifierParams) -> Tensor:
    """Cross entropy of both modalities through the one shared classifier:
    mean over the N*T image features plus mean over the N video features."""
    num_classes = cls.w.data.shape[1]
    fl, cl = bf.frame_labels, bf.labels
    if fl.min() < 0 or fl.max() >= num_classes:
        bad = int(fl[(fl < 0) | (fl >= num_classes)][0])
        raise ValueError(f"label {bad} out of range for {num_classes} identities")
    image_term = cross_entropy_mean(matmul(bf.image_feats, cls.w), fl)
    video_term = cross_entropy_mean(matmul(bf.video_feats, cls.w), cl)
    return image_term + video_term


def loss_terms(bf: BatchFeatures, cls: ClassifierParams, cfg: LossConfig) -> dict[str, Tensor]:
    """Every enabled objective term, keyed by name (all unit-weighted)."""
    terms: dict[str, Tensor] = {}
    if cfg.use_cls:
        terms["cls"] = classification_loss(bf, cls)
    terms.update(triplet_terms(bf, cfg))
    if cfg.use_transfer_feat:
        terms["transfer_feat"] = feature_transfer_loss(bf, cfg.bp_to_video)
    if cfg.use_transfer_dist:
        terms["transfer_dist"] = distance_transfer_loss(bf, cfg.bp_to_video)
    return terms


def total_loss(bf: BatchFeatures, cls: ClassifierParams, cfg: LossConfig) -> Tensor:
    """Unit-weighted sum of all enabled terms."""
    total = None
    for t in loss_terms(bf, cls, cfg).values():
        total = t if total is None else total + t
    assert total is not None  # LossConfig guarantees at least one term
    return total
