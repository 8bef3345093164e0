"""Three-stage classifier: inverted-residual CNN feature extractor,
transformer feature-emphasizing block, and MLP head with softmax output.

The extractor follows the MobileNetV2 recipe: a strided 3x3 stem, then
stages of inverted-residual blocks (expand 1x1 -> depthwise 3x3 ->
linear project 1x1, skip connection only at stride 1 with matching
channels), then a final 1x1 projection to the embedding width.  At width
1.0 on 224x224x3 input the extractor emits a 7x7x1280 map.

The 7x7 grid becomes a 49-token sequence; a learnable zero-initialized
positional embedding is added, then post-norm transformer blocks
(multi-head attention, add, layer norm, ReLU FFN, add, layer norm, with
dropout after each sublayer) refine the tokens, which are mean-pooled
into one embedding per sample.  The head is fc -> ReLU -> dropout ->
fc -> ReLU -> fc -> softmax.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor
from .errors import UsageError
from .rng import Rng

__all__ = [
    "MOBILENET_STAGES", "ModelConfig", "Model", "InvalidConfigError",
    "build_model", "extract_features", "transformer_tokens",
    "emphasize_features", "classify", "model_logits", "model_forward",
    "scaled_dot_attention", "parameter_count", "cast_model",
    "export_embeddings",
]

# (expansion t, output channels c, repeats n, first-block stride s)
MOBILENET_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


class InvalidConfigError(UsageError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; the defaults are the full-scale network."""
    n_classes: int
    input_size: int = 224
    stem_filters: int = 32
    stage_spec: tuple = MOBILENET_STAGES
    width_multiplier: float = 1.0
    embed_dim: int = 1280
    n_heads: int = 8
    ffn_dim: int = 2048
    n_transformer_blocks: int = 4
    mlp_dims: tuple = (512, 256)
    dropout_p: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "stage_spec",
                           tuple(tuple(s) for s in self.stage_spec))
        object.__setattr__(self, "mlp_dims", tuple(self.mlp_dims))
        positive = (self.n_classes, self.input_size, self.stem_filters,
                    self.embed_dim, self.n_heads, self.ffn_dim,
                    self.n_transformer_blocks, *self.mlp_dims)
        if any(int(v) != v or v <= 0 for v in positive):
            raise InvalidConfigError("all dimensions must be positive integers")
        if self.n_classes < 2:
            raise InvalidConfigError("need at least 2 classes")
        if self.embed_dim % self.n_heads != 0:
            raise InvalidConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.width_multiplier <= 0:
            raise InvalidConfigError("width_multiplier must be positive")
        if self.input_size < 32:
            raise InvalidConfigError("input_size must be at least 32")

    @property
    def feature_grid(self) -> int:
        """Spatial side of the extractor output (7 for 224 input)."""
        side = -(-self.input_size // 2)  # stem stride 2
        for _, _, _, stride in self.stage_spec:
            side = -(-side // stride)
        return side

    @property
    def n_tokens(self) -> int:
        return self.feature_grid ** 2

    @staticmethod
    def toy(n_classes: int) -> "ModelConfig":
        """Desk-scale preset: small width and one transformer block."""
        return ModelConfig(n_classes=n_classes, input_size=64,
                           width_multiplier=0.25, embed_dim=160, n_heads=4,
                           ffn_dim=320, n_transformer_blocks=1,
                           mlp_dims=(64, 32))

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes, "input_size": self.input_size,
            "stem_filters": self.stem_filters,
            "stage_spec": [list(s) for s in self.stage_spec],
            "width_multiplier": self.width_multiplier,
            "embed_dim": self.embed_dim, "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "n_transformer_blocks": self.n_transformer_blocks,
            "mlp_dims": list(self.mlp_dims), "dropout_p": self.dropout_p,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(ModelConfig)}
        for key in doc:
            if key not in known:
                raise InvalidConfigError(f"unknown model config key: {key}")
        return ModelConfig(**doc)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    mode: str = "infer"


@dataclass(frozen=True)
class _BlockSpec:
    name: str
    cin: int
    cmid: int
    cout: int
    stride: int
    expand: bool
    residual: bool


def _round_channels(c: int, width: float, divisor: int = 8) -> int:
    # MobileNet channel rounding: nearest multiple of 8, never below 8,
    # never more than 10% under the requested width
    v = max(divisor, int(c * width + divisor / 2) // divisor * divisor)
    if v < 0.9 * c * width:
        v += divisor
    return v


def _block_plan(config: ModelConfig) -> tuple[list[_BlockSpec], int, int]:
    """Expand stage_spec into per-block specs; returns (blocks, c_stem, c_last)."""
    c_stem = _round_channels(config.stem_filters, config.width_multiplier)
    blocks = []
    cin = c_stem
    idx = 0
    for t, c, n, s in config.stage_spec:
        cout = _round_channels(c, config.width_multiplier)
        for i in range(n):
            stride = s if i == 0 else 1
            blocks.append(_BlockSpec(
                name=f"block{idx:02d}", cin=cin, cmid=cin * t, cout=cout,
                stride=stride, expand=(t != 1),
                residual=(stride == 1 and cin == cout)))
            cin = cout
            idx += 1
    return blocks, c_stem, cin


def build_model(config: ModelConfig, rng: Rng | int = 0) -> Model:
    """Initialize all parameters: He-uniform weights keyed by parameter
    name, zero biases and positional embedding, ones/zeros norm scales."""
    if isinstance(rng, int):
        rng = Rng(rng)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def he(name: str, shape: tuple, fan_in: int):
        gen = rng.child("init", name).generator()
        limit = math.sqrt(6.0 / fan_in)
        data = gen.uniform(-limit, limit, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)

    def const(name: str, shape: tuple, value: float):
        data = np.full(shape, value, dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)

    def norm(prefix: str, c: int):
        const(f"{prefix}.gamma", (c,), 1.0)
        const(f"{prefix}.beta", (c,), 0.0)
        buffers[f"{prefix}.mean"] = np.zeros(c, dtype=np.float32)
        buffers[f"{prefix}.var"] = np.ones(c, dtype=np.float32)

    blocks, c_stem, c_last = _block_plan(config)
    he("stem.conv.w", (3, 3, 3, c_stem), 27)
    norm("stem.bn", c_stem)
    for b in blocks:
        if b.expand:
            he(f"{b.name}.expand.w", (b.cin, b.cmid), b.cin)
            norm(f"{b.name}.expand_bn", b.cmid)
        he(f"{b.name}.dw.w", (3, 3, b.cmid), 9)
        norm(f"{b.name}.dw_bn", b.cmid)
        he(f"{b.name}.project.w", (b.cmid, b.cout), b.cmid)
        norm(f"{b.name}.project_bn", b.cout)
    he("head.conv.w", (c_last, config.embed_dim), c_last)
    norm("head.bn", config.embed_dim)

    const("pos.embed", (config.n_tokens, config.embed_dim), 0.0)
    e, f = config.embed_dim, config.ffn_dim
    for j in range(config.n_transformer_blocks):
        for proj in ("wq", "wk", "wv", "wo"):
            he(f"tf{j}.attn.{proj}", (e, e), e)
        for bias in ("bq", "bk", "bv", "bo"):
            const(f"tf{j}.attn.{bias}", (e,), 0.0)
        const(f"tf{j}.ln1.gamma", (e,), 1.0)
        const(f"tf{j}.ln1.beta", (e,), 0.0)
        he(f"tf{j}.ffn.w1", (e, f), e)
        const(f"tf{j}.ffn.b1", (f,), 0.0)
        he(f"tf{j}.ffn.w2", (f, e), f)
        const(f"tf{j}.ffn.b2", (e,), 0.0)
        const(f"tf{j}.ln2.gamma", (e,), 1.0)
        const(f"tf{j}.ln2.beta", (e,), 0.0)

    din = config.embed_dim
    for i, dout in enumerate(config.mlp_dims):
        he(f"mlp.fc{i}.w", (din, dout), din)
        const(f"mlp.fc{i}.b", (dout,), 0.0)
        din = dout
    he("mlp.out.w", (din, config.n_classes), din)
    const("mlp.out.b", (config.n_classes,), 0.0)

    return Model(config=config, params=params, buffers=buffers)


def parameter_count(model: Model) -> int:
    return sum(int(t.size) for t in model.params.values())


def cast_model(model: Model, dtype) -> Model:
    """Copy with parameters and buffers in another float dtype (useful for
    float64 gradient checks)."""
    params = {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k)
              for k, t in model.params.items()}
    buffers = {k: v.astype(dtype) for k, v in model.buffers.items()}
    return Model(config=model.config, params=params, buffers=buffers,
                 mode=model.mode)


def _training(model: Model, training: bool | None) -> bool:
    return model.mode == "train" if training is None else bool(training)


def _bn(model: Model, x: Tensor, prefix: str, training: bool) -> Tensor:
    return ad.batch_norm(x, model.params[f"{prefix}.gamma"],
                         model.params[f"{prefix}.beta"],
                         model.buffers[f"{prefix}.mean"],
                         model.buffers[f"{prefix}.var"], training)


def extract_features(model: Model, images, training: bool | None = None) -> Tensor:
    """Images (N, S, S, 3) in [0, 1] -> feature map (N, g, g, embed_dim)."""
    training = _training(model, training)
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    s = model.config.input_size
    if x.data.ndim != 4 or x.shape[1:] != (s, s, 3):
        raise ShapeMismatchError(
            f"expected images (N, {s}, {s}, 3), got {x.shape}")
    x = ad.relu6(_bn(model, ad.conv2d(x, model.params["stem.conv.w"], stride=2),
                     "stem.bn", training))
    blocks, _, _ = _block_plan(model.config)
    for b in blocks:
        y = x
        if b.expand:
            y = ad.relu6(_bn(model, ad.pointwise_conv2d(y, model.params[f"{b.name}.expand.w"]),
                             f"{b.name}.expand_bn", training))
        y = ad.relu6(_bn(model, ad.depthwise_conv2d(y, model.params[f"{b.name}.dw.w"],
                                                    stride=b.stride),
                         f"{b.name}.dw_bn", training))
        y = _bn(model, ad.pointwise_conv2d(y, model.params[f"{b.name}.project.w"]),
                f"{b.name}.project_bn", training)
        x = ad.add(y, x) if b.residual else y
    x = ad.relu6(_bn(model, ad.pointwise_conv2d(x, model.params["head.conv.w"]),
                     "head.bn", training))
    return x


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         attn_sink: list | None = None) -> Tensor:
    """softmax(QK^T / sqrt(d_k)) V over the last two axes."""
    nd = q.data.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = ad.matmul(q, ad.transpose(k, swap)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = ad.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(np.array(weights.data, copy=True))
    return ad.matmul(weights, v)


def _multi_head_attention(model: Model, x: Tensor, block: int,
                          attn_sink: list | None) -> Tensor:
    cfg = model.config
    n, t, e = x.shape
    h, dk = cfg.n_heads, cfg.embed_dim // cfg.n_heads
    p = model.params

    def split_heads(z: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(z, (n, t, h, dk)), (0, 2, 1, 3))

    q = split_heads(x @ p[f"tf{block}.attn.wq"] + p[f"tf{block}.attn.bq"])
    k = split_heads(x @ p[f"tf{block}.attn.wk"] + p[f"tf{block}.attn.bk"])
    v = split_heads(x @ p[f"tf{block}.attn.wv"] + p[f"tf{block}.attn.bv"])
    ctx = scaled_dot_attention(q, k, v, attn_sink)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, t, e))
    return ctx @ p[f"tf{block}.attn.wo"] + p[f"tf{block}.attn.bo"]


def transformer_tokens(model: Model, features: Tensor,
                       training: bool | None = None, rng: Rng | None = None,
                       attn_sink: list | None = None) -> Tensor:
    """Token sequence (N, n_tokens, embed_dim) after all transformer blocks."""
    cfg = model.config
    training = _training(model, training)
    rng = rng or Rng(0)
    g, e = cfg.feature_grid, cfg.embed_dim
    if features.data.ndim != 4 or features.shape[1:] != (g, g, e):
        raise ShapeMismatchError(
            f"expected feature map (N, {g}, {g}, {e}), got {features.shape}")
    n = features.shape[0]
    x = ad.reshape(features, (n, cfg.n_tokens, e))
    x = x + model.params["pos.embed"]
    p = model.params
    for j in range(cfg.n_transformer_blocks):
        a = _multi_head_attention(model, x, j, attn_sink)
        a = ad.dropout(a, cfg.dropout_p, rng.child("drop", "attn", j), training)
        x = ad.layer_norm(x + a, p[f"tf{j}.ln1.gamma"], p[f"tf{j}.ln1.beta"])
        f = ad.relu(x @ p[f"tf{j}.ffn.w1"] + p[f"tf{j}.ffn.b1"])
        f = f @ p[f"tf{j}.ffn.w2"] + p[f"tf{j}.ffn.b2"]
        f = ad.dropout(f, cfg.dropout_p, rng.child("drop", "ffn", j), training)
        x = ad.layer_norm(x + f, p[f"tf{j}.ln2.gamma"], p[f"tf{j}.ln2.beta"])
    return x


def emphasize_features(model: Model, features: Tensor,
                       training: bool | None = None, rng: Rng | None = None,
                       attn_sink: list | None = None) -> Tensor:
    """Feature map -> mean-pooled embedding batch (N, embed_dim)."""
    tokens = transformer_tokens(model, features, training, rng, attn_sink)
    return ad.mean_axis(tokens, axis=1)


def _mlp_logits(model: Model, embeddings: Tensor, training: bool,
                rng: Rng) -> Tensor:
    cfg = model.config
    p = model.params
    x = embeddings
    for i in range(len(cfg.mlp_dims)):
        x = ad.relu(x @ p[f"mlp.fc{i}.w"] + p[f"mlp.fc{i}.b"])
        if i < len(cfg.mlp_dims) - 1:  # dropout sits between the hidden layers
            x = ad.dropout(x, cfg.dropout_p, rng.child("drop", "mlp", i), training)
    return x @ p["mlp.out.w"] + p["mlp.out.b"]


def classify(model: Model, embeddings: Tensor, training: bool | None = None,
             rng: Rng | None = None) -> Tensor:
    """Embedding batch -> class probabilities (rows sum to 1)."""
    training = _training(model, training)
    return ad.softmax(_mlp_logits(model, embeddings, training, rng or Rng(0)),
                      axis=-1)


def model_logits(model: Model, images, training: bool | None = None,
                 rng: Rng | None = None) -> Tensor:
    """Pre-softmax class scores; the training loss consumes these."""
    training = _training(model, training)
    rng = rng or Rng(0)
    feats = extract_features(model, images, training)
    emb = emphasize_features(model, feats, training, rng)
    return _mlp_logits(model, emb, training, rng)


def model_forward(model: Model, images, training: bool | None = None,
                  rng: Rng | None = None) -> Tensor:
    """Images -> class probabilities, composing all three stages."""
    return ad.softmax(model_logits(model, images, training, rng), axis=-1)


def export_embeddings(model: Model, samples, path=None,
                      batch_size: int = 32) -> list[list]:
    """Rows of (sample id, label, embedding vector) for projection tools.

    ``samples`` is a sequence of (id, label, image) triples in the order
    the rows should appear; ``path`` optionally writes them as CSV with
    an id,label,e0..eK header.
    """
    samples = list(samples)
    rows: list[list] = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        images = np.stack([np.asarray(img, dtype=np.float32) for _, _, img in chunk])
        feats = extract_features(model, images, training=False)
        emb = emphasize_features(model, feats, training=False).data
        for (sid, label, _), vec in zip(chunk, emb):
            rows.append([str(sid), int(label), *[float(x) for x in vec]])
    if path is not None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            dim = model.config.embed_dim
            writer.writerow(["id", "label", *[f"e{i}" for i in range(dim)]])
            writer.writerows(rows)
    return rows
