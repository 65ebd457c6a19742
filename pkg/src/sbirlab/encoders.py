"""Photo/sketch encoders: a small residual CNN and a small patch transformer.

Both return an :class:`EncoderOutput` holding an (unnormalised) embedding and
class logits. Parameters are plain ``dict[str, Tensor]`` so the training loop,
the optimiser and the checkpoint writer can treat every model alike.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


class EmbeddingPool(str, enum.Enum):
    GLOBAL_1X1 = "global1x1"
    SPATIAL_2X2 = "spatial2x2"


@dataclass(frozen=True)
class CnnEncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    input_size: tuple[int, int] = (32, 32)
    num_classes: int = 10
    embedding_pool: EmbeddingPool = EmbeddingPool.GLOBAL_1X1
    in_channels: int = 1
    stem_pool: bool = True
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        object.__setattr__(self, "embedding_pool", EmbeddingPool(self.embedding_pool))
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ValueError("need at least one stage with positive channel count")
        if self.blocks_per_stage < 0 or self.num_classes < 1 or self.in_channels < 1:
            raise ValueError("invalid CNN encoder configuration")
        fh, fw = self.feature_size
        if min(fh, fw) < 1:
            raise ValueError(f"input {self.input_size} too small for {len(self.stage_channels)} stages")
        if self.embedding_pool is EmbeddingPool.SPATIAL_2X2 and min(fh, fw) < 2:
            raise ValueError("2×2 embedding pooling needs a final feature map of at least 2×2")

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        for _ in range(len(self.stage_channels) - 1 + int(self.stem_pool)):
            h, w = h // 2, w // 2
        return h, w

    @property
    def embedding_dim(self) -> int:
        c = self.stage_channels[-1]
        return c if self.embedding_pool is EmbeddingPool.GLOBAL_1X1 else 4 * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["input_size"] = list(self.input_size)
        d["embedding_pool"] = self.embedding_pool.value
        return {"kind": "cnn", **d}


@dataclass(frozen=True)
class VitEncoderConfig:
    patch_size: int = 8
    model_dim: int = 32
    num_heads: int = 4
    depth: int = 2
    num_classes: int = 10
    input_size: tuple[int, int] = (32, 32)
    in_channels: int = 1
    mlp_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        h, w = self.input_size
        if self.patch_size < 1 or h % self.patch_size or w % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide input {self.input_size}")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.depth < 0 or self.num_classes < 1 or self.mlp_dim < 1:
            raise ValueError("invalid ViT encoder configuration")

    @property
    def num_patches(self) -> int:
        h, w = self.input_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def embedding_dim(self) -> int:
        return self.model_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return {"kind": "vit", **d}


EncoderConfig = Union[CnnEncoderConfig, VitEncoderConfig]


def config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    kind = d.pop("kind", "cnn")
    if kind == "cnn":
        return CnnEncoderConfig(**d)
    if kind == "vit":
        return VitEncoderConfig(**d)
    raise ValueError(f"unknown encoder kind {kind!r}")


@dataclass
class EncoderOutput:
    embedding: Tensor
    logits: Tensor
    attention: list[np.ndarray] = field(default_factory=list)


# -- parameter construction ----------------------------------------------------


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; the order fixes the RNG draw sequence."""
    shapes: dict[str, tuple[int, ...]] = {}
    if isinstance(config, CnnEncoderConfig):
        chans = config.stage_channels
        def conv(name, c_out, c_in):
            shapes[name + ".w"] = (c_out, c_in, 3, 3)
            shapes[name + ".b"] = (c_out,)
            if config.normalize:
                shapes[name + ".g"] = (c_out,)

        conv("stem", chans[0], config.in_channels)
        prev = chans[0]
        for s, c in enumerate(chans):
            if s > 0:
                conv(f"stage{s}.down", c, prev)
            for b in range(config.blocks_per_stage):
                for k in (1, 2):
                    conv(f"stage{s}.block{b}.conv{k}", c, c)
            prev = c
        shapes["fc.w"] = (config.num_classes, chans[-1])
        shapes["fc.b"] = (config.num_classes,)
        return shapes

    d, p = config.model_dim, config.patch_size
    shapes["patch.w"] = (d, config.in_channels * p * p)
    shapes["patch.b"] = (d,)
    shapes["cls"] = (1, 1, d)
    shapes["pos"] = (config.num_tokens, d)
    for i in range(config.depth):
        pre = f"layer{i}."
        shapes[pre + "ln1.g"] = (d,)
        shapes[pre + "ln1.b"] = (d,)
        shapes[pre + "qkv.w"] = (3 * d, d)
        shapes[pre + "qkv.b"] = (3 * d,)
        shapes[pre + "proj.w"] = (d, d)
        shapes[pre + "proj.b"] = (d,)
        shapes[pre + "ln2.g"] = (d,)
        shapes[pre + "ln2.b"] = (d,)
        shapes[pre + "mlp1.w"] = (config.mlp_dim, d)
        shapes[pre + "mlp1.b"] = (config.mlp_dim,)
        shapes[pre + "mlp2.w"] = (d, config.mlp_dim)
        shapes[pre + "mlp2.b"] = (d,)
    shapes["ln.g"] = (d,)
    shapes["ln.b"] = (d,)
    shapes["head.w"] = (config.num_classes, d)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def init_params(config: EncoderConfig, seed: int) -> Params:
    """He-style fan-in init for conv/linear weights, zeros for biases.

    Deterministic in ``seed``; the ViT class token and position table use a
    small normal init, layer-norm gains start at one.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name in ("cls", "pos"):
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".g"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def validate_params(params: Params, config: EncoderConfig) -> None:
    expected = param_shapes(config)
    if list(params) != list(expected):
        raise ValueError("parameter names do not match the encoder configuration")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# -- forward passes ------------------------------------------------------------


def _check_images(images: Tensor, channels: int, size: tuple[int, int]) -> tuple[Tensor, bool]:
    images = ad.as_tensor(images)
    squeeze = images.ndim == 3
    if squeeze:
        images = ad.reshape(images, (1,) + images.shape)
    if images.ndim != 4 or images.shape[1:] != (channels, *size):
        raise ValueError(f"expected images of shape (N, {channels}, {size[0]}, {size[1]}), "
                         f"got {images.shape}")
    return images, squeeze


def _squeeze(out: EncoderOutput) -> EncoderOutput:
    return EncoderOutput(ad.reshape(out.embedding, out.embedding.shape[1:]),
                         ad.reshape(out.logits, out.logits.shape[1:]),
                         [a[0] for a in out.attention])


def cnn_features(params: Params, config: CnnEncoderConfig, x: Tensor) -> Tensor:
    """Convolutional body: stem, then per stage an optional downsample and residual blocks.

    Downsampling is 2×2 average pooling followed by a 3×3 conv, which keeps the
    body exactly mirror-equivariant on even feature sizes.
    """
    def conv(x, name):
        if not config.normalize:
            return ad.conv2d(x, params[name + ".w"], params[name + ".b"], padding=1)
        return _group_norm(ad.conv2d(x, params[name + ".w"], padding=1),
                           params[name + ".g"], params[name + ".b"])

    x = ad.relu(conv(x, "stem"))
    if config.stem_pool:
        x = ad.adaptive_avg_pool2d(x, x.shape[2] // 2, x.shape[3] // 2)
    for s in range(len(config.stage_channels)):
        if s > 0:
            h, w = x.shape[2] // 2, x.shape[3] // 2
            x = ad.adaptive_avg_pool2d(x, h, w)
            x = ad.relu(conv(x, f"stage{s}.down"))
        for b in range(config.blocks_per_stage):
            pre = f"stage{s}.block{b}."
            y = ad.relu(conv(x, pre + "conv1"))
            y = conv(y, pre + "conv2")
            x = ad.relu(ad.add(x, y))
    return x


def _group_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Single-group normalisation: each sample's whole (C, H, W) map is
    standardised, then scaled and shifted per channel. Batch-independent and
    blind to spatial order, so mirror equivariance is untouched."""
    n, c, h, w = x.shape
    x = ad.reshape(ad.layer_norm(ad.reshape(x, (n, c * h * w))), (n, c, h, w))
    return ad.add(ad.mul(x, ad.reshape(gain, (c, 1, 1))), ad.reshape(bias, (c, 1, 1)))


def cnn_forward(params: Params, config: CnnEncoderConfig, images) -> EncoderOutput:
    """Logits always come from the 1×1-pooled features; the embedding pools the
    same final feature maps to 1×1 or 2×2 and is left unnormalised."""
    x, squeeze = _check_images(images, config.in_channels, config.input_size)
    feats = cnn_features(params, config, x)
    pooled = ad.flatten(ad.adaptive_avg_pool2d(feats, 1, 1))
    logits = ad.linear(pooled, params["fc.w"], params["fc.b"])
    if config.embedding_pool is EmbeddingPool.GLOBAL_1X1:
        emb = pooled
    else:
        emb = ad.flatten(ad.adaptive_avg_pool2d(feats, 2, 2))
    out = EncoderOutput(emb, logits)
    return _squeeze(out) if squeeze else out


def patchify(images: Tensor, patch: int) -> Tensor:
    """(N, C, H, W) -> (N, num_patches, C*patch*patch), patches in row-major order."""
    n, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = ad.reshape(images, (n, c, gh, patch, gw, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (n, gh * gw, c * patch * patch))


def _affine_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


def _attention(x: Tensor, params: Params, pre: str, heads: int) -> tuple[Tensor, np.ndarray]:
    n, t, d = x.shape
    dh = d // heads
    qkv = ad.linear(x, params[pre + "qkv.w"], params[pre + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (n, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(probs, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    return ad.linear(ctx, params[pre + "proj.w"], params[pre + "proj.b"]), probs.data


def vit_forward(params: Params, config: VitEncoderConfig, images) -> EncoderOutput:
    """Patch embedding + class token + learned positions, then pre-norm blocks.

    The final layer-normed class-token state is the embedding and also feeds
    the classifier; per-layer attention probabilities are returned alongside.
    """
    x, squeeze = _check_images(images, config.in_channels, config.input_size)
    n = x.shape[0]
    tokens = ad.linear(patchify(x, config.patch_size), params["patch.w"], params["patch.b"])
    cls = ad.broadcast_to(params["cls"], (n, 1, config.model_dim))
    h = ad.add(ad.concat([cls, tokens], axis=1), params["pos"])
    maps = []
    for i in range(config.depth):
        pre = f"layer{i}."
        attn, probs = _attention(_affine_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"]),
                                 params, pre, config.num_heads)
        maps.append(probs)
        h = ad.add(h, attn)
        m = _affine_norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        m = ad.relu(ad.linear(m, params[pre + "mlp1.w"], params[pre + "mlp1.b"]))
        h = ad.add(h, ad.linear(m, params[pre + "mlp2.w"], params[pre + "mlp2.b"]))
    cls_state = _affine_norm(h[:, 0, :], params["ln.g"], params["ln.b"])
    # no projection after the norm: a free linear map let sketch embeddings collapse
    logits = ad.linear(cls_state, params["head.w"], params["head.b"])
    out = EncoderOutput(cls_state, logits, maps)
    return _squeeze(out) if squeeze else out


def forward(params: Params, config: EncoderConfig, images) -> EncoderOutput:
    if isinstance(config, CnnEncoderConfig):
        return cnn_forward(params, config, images)
    return vit_forward(params, config, images)


def embed(params: Params, config: EncoderConfig, images: np.ndarray,
          batch_size: int = 256) -> np.ndarray:
    """Inference-only embeddings for an (N, C, H, W) array, computed in chunks."""
    images = np.asarray(images, dtype=np.float64)
    chunks = [forward(params, config, images[i:i + batch_size]).embedding.data
              for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, config.embedding_dim))
    return np.concatenate(chunks, axis=0)


def mirror_embedding(embedding: np.ndarray, config: CnnEncoderConfig) -> np.ndarray:
    """Column-swap permutation a horizontal mirror induces on a 2×2-pooled embedding."""
    if config.embedding_pool is EmbeddingPool.GLOBAL_1X1:
        return np.array(embedding, copy=True)
    e = np.asarray(embedding)
    grid = e.reshape(e.shape[:-1] + (config.stage_channels[-1], 2, 2))
    return grid[..., ::-1].reshape(e.shape)
