"""A small pre-norm vision transformer that exposes per-layer patch features."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor

MLP_RATIO = 4
INIT_STD = 0.02
CHECKPOINT_FORMAT = "mfdistill-vit/1"


@dataclass
class VitConfig:
    image_size: Tuple[int, int] = (16, 16)
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 2
    num_layers: int = 3
    num_classes: int = 8
    use_class_token: bool = True
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.validate()

    def validate(self):
        h, w = self.image_size
        p = self.patch_size
        if min(h, w, self.channels, p, self.embed_dim, self.num_heads, self.num_layers) < 1:
            raise ConfigError(f"non-positive extent in {self}")
        if h % p or w % p:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {p}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.use_class_token)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class ForwardResult:
    logits: Tensor
    taps: Dict[int, Tensor] = field(default_factory=dict)


def validate_taps(taps: Iterable[int], num_layers: int) -> Tuple[int, ...]:
    taps = tuple(int(t) for t in taps)
    if len(set(taps)) != len(taps):
        raise ConfigError(f"duplicate tap indices in {taps}")
    for t in taps:
        if not 1 <= t <= num_layers:
            raise ConfigError(f"tap index {t} outside [1, {num_layers}]")
    return taps


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(cfg: VitConfig) -> Dict[str, np.ndarray]:
    """Truncated-normal projections and embeddings, zero biases, unit LN scales."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in init_params_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif name.endswith(("ln1.weight", "ln2.weight")) or name == "norm.weight":
            params[name] = np.ones(shape)
        else:
            params[name] = _trunc_normal(rng, shape)
    return params


# -- building blocks ---------------------------------------------------------

def patchify(images, patch_size: int) -> Tensor:
    """(B, H, W, C) images -> (B, N, P*P*C) patches.

    Patches are enumerated row-major over the patch grid; inside a patch the
    pixels are row-major, then channel.
    """
    images = T.as_tensor(images)
    if images.ndim != 4:
        raise ShapeError(f"patchify expects (B, H, W, C), got {images.shape}")
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def embed(patches: Tensor, weight: Tensor, bias: Tensor, positional: Tensor,
          class_token: Optional[Tensor] = None) -> Tensor:
    """Project patches to D dims, prepend the optional class token, add positions."""
    patches = T.as_tensor(patches)
    b, n, k = patches.shape
    if weight.shape[0] != k:
        raise ShapeError(f"projection expects {weight.shape[0]} inputs, patches have {k}")
    x = patches @ weight + bias
    d = weight.shape[1]
    if class_token is not None:
        cls = class_token.reshape(1, 1, d) + np.zeros((b, 1, d))
        x = T.concat([cls, x], axis=1)
    if positional.shape != x.shape[1:]:
        raise ShapeError(f"positional shape {positional.shape} does not match tokens {x.shape[1:]}")
    return x + positional


def attention(x: Tensor, params: Dict[str, Tensor], prefix: str, num_heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // num_heads
    qkv = x @ params[prefix + "qkv.weight"] + params[prefix + "qkv.bias"]
    qkv = qkv.reshape(b, n, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    out = T.softmax(scores, axis=-1) @ v
    out = out.transpose(0, 2, 1, 3).reshape(b, n, d)
    return out @ params[prefix + "proj.weight"] + params[prefix + "proj.bias"]


def mlp(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(x @ params[prefix + "fc1.weight"] + params[prefix + "fc1.bias"])
    return h @ params[prefix + "fc2.weight"] + params[prefix + "fc2.bias"]


def encoder_layer(x: Tensor, params: Dict[str, Tensor], index: int, num_heads: int) -> Tensor:
    """One pre-norm layer: ``x + MSA(LN(x))`` then ``x + MLP(LN(x))``."""
    pre = f"blocks.{index}."
    try:
        h = T.layer_norm(x, params[pre + "ln1.weight"], params[pre + "ln1.bias"])
        x = x + attention(h, params, pre + "attn.", num_heads)
        h = T.layer_norm(x, params[pre + "ln2.weight"], params[pre + "ln2.bias"])
        return x + mlp(h, params, pre + "mlp.")
    except NumericError as exc:
        raise NumericError(f"layer {index}: {exc}") from exc


# -- model -------------------------------------------------------------------

class VisionTransformer:
    def __init__(self, config: VitConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        raw = init_params(config) if params is None else params
        expected = init_params_shapes(config)
        if set(raw) != set(expected):
            missing = sorted(set(expected) - set(raw))
            extra = sorted(set(raw) - set(expected))
            raise ConfigError(f"parameter names mismatch config (missing={missing}, unexpected={extra})")
        self.params: Dict[str, Tensor] = {}
        for name in expected:
            arr = np.array(raw[name], dtype=np.float64)
            if arr.shape != expected[name]:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, config implies {expected[name]}")
            self.params[name] = Tensor(arr, requires_grad=True)

    @property
    def depth(self) -> int:
        return self.config.num_layers

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> "VisionTransformer":
        return VisionTransformer(self.config, self.state_dict())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def __call__(self, images, taps: Iterable[int] = ()) -> ForwardResult:
        return forward_with_taps(self, images, taps)


def init_params_shapes(cfg: VitConfig) -> Dict[str, tuple]:
    d, p, c, hidden = cfg.embed_dim, cfg.patch_size, cfg.channels, MLP_RATIO * cfg.embed_dim
    shapes = {"patch_embed.weight": (p * p * c, d), "patch_embed.bias": (d,)}
    if cfg.use_class_token:
        shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (cfg.num_tokens, d)
    for i in range(1, cfg.num_layers + 1):
        pre = f"blocks.{i}."
        shapes.update({
            pre + "ln1.weight": (d,), pre + "ln1.bias": (d,),
            pre + "attn.qkv.weight": (d, 3 * d), pre + "attn.qkv.bias": (3 * d,),
            pre + "attn.proj.weight": (d, d), pre + "attn.proj.bias": (d,),
            pre + "ln2.weight": (d,), pre + "ln2.bias": (d,),
            pre + "mlp.fc1.weight": (d, hidden), pre + "mlp.fc1.bias": (hidden,),
            pre + "mlp.fc2.weight": (hidden, d), pre + "mlp.fc2.bias": (d,),
        })
    shapes.update({"norm.weight": (d,), "norm.bias": (d,),
                   "head.weight": (d, cfg.num_classes), "head.bias": (cfg.num_classes,)})
    return shapes


def forward_with_taps(model: VisionTransformer, images, taps: Iterable[int] = ()) -> ForwardResult:
    """Run the model, capturing post-layer patch features at ``taps``.

    Tapped features exclude the class token, so every tap is (B, N, D).
    """
    cfg = model.config
    taps = validate_taps(taps, cfg.num_layers)
    p = model.params
    images = T.as_tensor(images)
    if images.ndim != 4 or images.shape[1:3] != tuple(cfg.image_size) or images.shape[3] != cfg.channels:
        raise ShapeError(f"images {images.shape} do not match config {cfg.image_size}x{cfg.channels}")
    x = embed(patchify(images, cfg.patch_size), p["patch_embed.weight"], p["patch_embed.bias"],
              p["pos_embed"], p.get("cls_token"))
    skip = int(cfg.use_class_token)
    wanted = set(taps)
    captured = {}
    for i in range(1, cfg.num_layers + 1):
        x = encoder_layer(x, p, i, cfg.num_heads)
        if i in wanted:
            captured[i] = x[:, skip:, :] if skip else x
    x = T.layer_norm(x, p["norm.weight"], p["norm.bias"])
    pooled = x[:, 0, :] if skip else x.mean(axis=1)
    logits = pooled @ p["head.weight"] + p["head.bias"]
    return ForwardResult(logits=logits, taps={i: captured[i] for i in taps})


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: VisionTransformer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({"format": CHECKPOINT_FORMAT, "config": model.config.to_dict()}, sort_keys=True)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)
    return path


def load_checkpoint(path, expected_config: Optional[VitConfig] = None) -> VisionTransformer:
    """Load a checkpoint; raise ``ConfigError`` if it disagrees with ``expected_config``."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ConfigError(f"{path}: not a model checkpoint")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    cfg = VitConfig(**meta["config"])
    if expected_config is not None and cfg.to_dict() != expected_config.to_dict():
        diff = {k: (v, expected_config.to_dict()[k]) for k, v in cfg.to_dict().items()
                if expected_config.to_dict()[k] != v}
        raise ConfigError(f"{path}: checkpoint config differs from expected: {diff}")
    return VisionTransformer(cfg, params)
