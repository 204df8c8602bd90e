"""The two representation networks.

Both encoders share one trunk design: a small stack of affine+relu layers
mapping per-frame input vectors to D-dimensional features. The video
encoder additionally runs non-local attention blocks mid-trunk, mixing
information across all positions of a clip, and pools spatially then
temporally. Image and video trunks have identical shapes but independent
storage; they are initialized from the same random draw so the two
networks start feature-identical (the attention blocks open as exact
identities because their output projection starts at zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    add,
    concat_rows,
    matmul,
    mean_row_groups,
    mean_rows,
    relu,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class TrunkConfig:
    """Shape of the shared trunk design.

    ``input_dim`` is the per-position input size. With the spatial grid
    enabled, a frame vector carries H*W positions of ``input_dim`` values
    each (length H*W*input_dim); attention then runs over T*H*W positions
    and spatial average pooling reduces each frame back to one D-vector.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = (24, 24)
    output_dim: int = 16
    use_spatial_grid: bool = False
    grid_hw: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden layer widths must be positive")
        if self.use_spatial_grid and (self.grid_hw[0] < 1 or self.grid_hw[1] < 1):
            raise ValueError("grid extents must be positive")

    @property
    def positions_per_frame(self) -> int:
        return self.grid_hw[0] * self.grid_hw[1] if self.use_spatial_grid else 1

    @property
    def frame_vector_len(self) -> int:
        return self.positions_per_frame * self.input_dim

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class AffineLayer:
    w: Tensor
    b: Tensor


@dataclass
class NonLocalParams:
    """One residual attention block over the positions axis.

    ``w_z`` starts at zero, so the block is an exact identity at
    initialization and the residual path dominates early training.
    ``insert_after`` is the 0-based trunk layer index after whose
    activation the block runs.
    """

    w_theta: Tensor
    w_phi: Tensor
    w_g: Tensor
    w_z: Tensor
    insert_after: int = 0

    @property
    def channels(self) -> int:
        return self.w_theta.data.shape[0]


@dataclass
class EncoderParams:
    """All trainable arrays of the image and video networks."""

    config: TrunkConfig
    image_layers: list[AffineLayer]
    video_layers: list[AffineLayer]
    blocks: list[NonLocalParams]
    seed: int = 0

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.image_layers):
            out[f"image.{i}.w"] = layer.w
            out[f"image.{i}.b"] = layer.b
        for i, layer in enumerate(self.video_layers):
            out[f"video.{i}.w"] = layer.w
            out[f"video.{i}.b"] = layer.b
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.theta"] = blk.w_theta
            out[f"block{i}.phi"] = blk.w_phi
            out[f"block{i}.g"] = blk.w_g
            out[f"block{i}.z"] = blk.w_z
        return out

    def image_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("image.")}

    def video_parameters(self) -> dict[str, Tensor]:
        """Video-branch parameters: video trunk plus attention blocks."""
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("image.")}


def init_encoder_params(
    config: TrunkConfig,
    num_blocks: int = 2,
    seed: int = 0,
    block_insert_after: int = 0,
) -> EncoderParams:
    """Draw fresh parameters; image and video trunks get the same draw.

    The identical initialization (plus zeroed attention outputs) makes the
    two networks feature-identical at step 0, so the transfer losses start
    at zero and grow only as the branches diverge.
    """
    if not 0 <= num_blocks <= 4:
        raise ValueError(f"num_blocks must be in 0..4, got {num_blocks}")
    if block_insert_after >= len(config.hidden_dims):
        raise ValueError(
            f"blocks must attach after a hidden layer (0..{len(config.hidden_dims) - 1})"
        )
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in config.layer_dims:
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros((1, fan_out))))
    image_layers = [
        AffineLayer(Tensor(w.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True))
        for w, b in layers
    ]
    video_layers = [
        AffineLayer(Tensor(w.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True))
        for w, b in layers
    ]
    channels = config.hidden_dims[block_insert_after]
    inner = max(1, channels // 2)
    blocks = []
    for _ in range(num_blocks):
        blocks.append(
            NonLocalParams(
                w_theta=Tensor(rng.standard_normal((channels, inner)) / np.sqrt(channels),
                               requires_grad=True),
                w_phi=Tensor(rng.standard_normal((channels, inner)) / np.sqrt(channels),
                             requires_grad=True),
                w_g=Tensor(rng.standard_normal((channels, inner)) / np.sqrt(channels),
                           requires_grad=True),
                w_z=Tensor(np.zeros((inner, channels)), requires_grad=True),
                insert_after=block_insert_after,
            )
        )
    return EncoderParams(config, image_layers, video_layers, blocks, seed=seed)


def nonlocal_forward(x: Tensor, params: NonLocalParams) -> Tensor:
    """Residual attention: each position's output is a softmax-weighted sum
    of projected features at all positions, added back onto the input."""
    if x.data.ndim != 2 or x.data.shape[1] != params.channels:
        raise ShapeError(
            f"non-local block expects (positions, {params.channels}), got {x.data.shape}"
        )
    theta = matmul(x, params.w_theta)
    phi = matmul(x, params.w_phi)
    g = matmul(x, params.w_g)
    att = softmax_rows(matmul(theta, transpose(phi)))
    z = matmul(matmul(att, g), params.w_z)
    return add(z, x)


def _trunk_forward(x: Tensor, layers: list[AffineLayer],
                   blocks: list[NonLocalParams] | None = None) -> Tensor:
    h = x
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        h = add(matmul(h, layer.w), layer.b)
        if i < last:
            h = relu(h)
            if blocks:
                for blk in blocks:
                    if blk.insert_after == i:
                        h = nonlocal_forward(h, blk)
    return h


def _check_frames(frames: np.ndarray, config: TrunkConfig, op: str) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != config.frame_vector_len:
        raise ShapeError(
            f"{op} expects (frames, {config.frame_vector_len}), got {frames.shape}"
        )
    return frames


def encode_image(frames: np.ndarray, params: EncoderParams) -> Tensor:
    """Encode frames independently: row nt of the output depends only on
    frame nt. Returns an (n_frames, D) feature matrix."""
    config = params.config
    frames = _check_frames(frames, config, "encode_image")
    ppf = config.positions_per_frame
    x = Tensor(frames.reshape(frames.shape[0] * ppf, config.input_dim))
    feats = _trunk_forward(x, params.image_layers)
    if ppf > 1:
        feats = mean_row_groups(feats, ppf)  # spatial average pooling
    return feats


def encode_video(clip: np.ndarray, params: EncoderParams) -> tuple[Tensor, Tensor]:
    """Encode one clip of T frames through the video trunk with attention.

    Returns ``(frame_feats, video_feat)``: per-frame features (T, D) after
    cross-position mixing and spatial pooling, and their temporal average
    (1, D).
    """
    config = params.config
    clip = _check_frames(clip, config, "encode_video")
    if clip.shape[0] < 1:
        raise ShapeError("encode_video needs at least one frame")
    ppf = config.positions_per_frame
    x = Tensor(clip.reshape(clip.shape[0] * ppf, config.input_dim))
    feats = _trunk_forward(x, params.video_layers, params.blocks)
    if ppf > 1:
        feats = mean_row_groups(feats, ppf)  # spatial average pooling
    video_feat = mean_rows(feats)  # temporal average pooling
    return feats, video_feat


def encode_clip_batch(
    clips: np.ndarray, params: EncoderParams
) -> tuple[Tensor, Tensor, Tensor]:
    """Run an (N, T, frame_len) batch through both networks.

    Returns ``(image_feats, frame_feats, video_feats)`` with the image and
    frame rows in matching clip-major order.
    """
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 3:
        raise ShapeError(f"expected (clips, frames, frame_len), got {clips.shape}")
    n, t, flen = clips.shape
    image_feats = encode_image(clips.reshape(n * t, flen), params)
    frame_parts, video_parts = [], []
    for c in range(n):
        ff, vf = encode_video(clips[c], params)
        frame_parts.append(ff)
        video_parts.append(vf)
    return image_feats, concat_rows(frame_parts), concat_rows(video_parts)


def copy_params(params: EncoderParams) -> EncoderParams:
    """Deep copy with fresh Tensors (used to freeze a branch)."""
    def clone_layer(layer: AffineLayer) -> AffineLayer:
        return AffineLayer(Tensor(layer.w.data.copy(), requires_grad=True),
                           Tensor(layer.b.data.copy(), requires_grad=True))

    return EncoderParams(
        config=params.config,
        image_layers=[clone_layer(l) for l in params.image_layers],
        video_layers=[clone_layer(l) for l in params.video_layers],
        blocks=[
            NonLocalParams(
                w_theta=Tensor(b.w_theta.data.copy(), requires_grad=True),
                w_phi=Tensor(b.w_phi.data.copy(), requires_grad=True),
                w_g=Tensor(b.w_g.data.copy(), requires_grad=True),
                w_z=Tensor(b.w_z.data.copy(), requires_grad=True),
                insert_after=b.insert_after,
            )
            for b in params.blocks
        ],
        seed=params.seed,
    )
