"""Text and image encoders projecting into a shared embedding space.

Text goes through one-hot characters, a temporal conv stack, and an LSTM
per branch; the global branch mean-pools the hidden states and the local
and relation branches attention-pool them. Images arrive as precomputed
feature vectors; region pairs form relation candidates.
"""

from __future__ import annotations

import string
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

# 26 letters, 10 digits, 32 distinct punctuation marks, space and newline
DEFAULT_ALPHABET = (
    string.ascii_lowercase
    + string.digits
    + "-,;.!?:'\"/\\|_@#$%^&*~`+=<>()[]{}"
    + " \n"
)

TEXT_BRANCHES = ("global", "local", "relation")


@dataclass(frozen=True)
class EncoderConfig:
    alphabet: str = DEFAULT_ALPHABET
    seq_len: int = 60
    conv_layers: tuple[tuple[int, int], ...] = ((8, 3), (8, 3), (16, 3))
    pool_after: tuple[bool, ...] = (False, False, False)
    pool_width: int = 3
    pool_stride: int = 3
    hidden_dim: int = 32
    attn_dim: int = 32
    common_dim: int = 32
    feature_dim: int = 32
    project_tanh: bool = False
    share_text_trunk: bool = False

    def __post_init__(self):
        if len(self.pool_after) != len(self.conv_layers):
            raise ValueError("pool_after needs one flag per conv layer")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet symbols must be distinct")

    @property
    def num_frames(self) -> int:
        return frame_count(self.seq_len, self.conv_layers, self.pool_after, self.pool_width, self.pool_stride)


PAPER_ENCODER = EncoderConfig(
    seq_len=201,
    conv_layers=((384, 4), (512, 4), (2048, 4)),
    pool_after=(True, True, False),
    hidden_dim=2048,
    attn_dim=2048,
    common_dim=1024,
    feature_dim=4096,
)


def frame_count(length, conv_layers, pool_after, pool_width=3, pool_stride=3) -> int:
    """Number of frames the conv stack emits for an input of ``length``; 0 if too short."""
    for (_, width), pool in zip(conv_layers, pool_after):
        length = length - width + 1
        if length < 1:
            return 0
        if pool:
            if length < pool_width:
                return 0
            length = (length - pool_width) // pool_stride + 1
    return length


def min_length(conv_layers, pool_after, pool_width=3, pool_stride=3) -> int:
    """Shortest input that yields at least one frame (total receptive field)."""
    need = 1
    for (_, width), pool in reversed(list(zip(conv_layers, pool_after))):
        if pool:
            need = (need - 1) * pool_stride + pool_width
        need = need + width - 1
    return need


# -- instances ----------------------------------------------------------------


@dataclass
class TextInstance:
    raw: str
    onehot: np.ndarray


@dataclass
class ImageInstance:
    global_feat: np.ndarray
    regions: np.ndarray  # (n, dim)

    def __post_init__(self):
        self.global_feat = np.asarray(self.global_feat, dtype=np.float64)
        self.regions = np.atleast_2d(np.asarray(self.regions, dtype=np.float64))
        if self.regions.shape[0] < 1:
            raise ValueError("an image needs at least one region")

    @property
    def num_regions(self) -> int:
        return self.regions.shape[0]


@dataclass
class EmbeddingBundle:
    """Common-space vectors for one instance.

    Text bundles carry one local and one relation row; image bundles carry
    one row per region and one per ordered region pair. ``relations`` is
    ``None`` when the relation channel is disabled for the instance.
    """

    global_vec: Tensor
    locals: Tensor | None
    relations: Tensor | None
    attn_local_weights: np.ndarray | None = None
    attn_relation_weights: np.ndarray | None = None

    @property
    def relation_enabled(self) -> bool:
        return self.relations is not None and self.relations.shape[0] > 0

    def to_json(self) -> dict:
        out = {
            "global": self.global_vec.data.tolist(),
            "locals": None if self.locals is None else self.locals.data.tolist(),
            "relations": None if self.relations is None else self.relations.data.tolist(),
        }
        if self.attn_local_weights is not None:
            out["attn_local_weights"] = self.attn_local_weights.tolist()
        if self.attn_relation_weights is not None:
            out["attn_relation_weights"] = self.attn_relation_weights.tolist()
        return out


def encode_chars(raw: str, alphabet: str = DEFAULT_ALPHABET, length: int = 60) -> np.ndarray:
    """One-hot encode ``raw`` into an (alphabet size, length) matrix.

    Input is lowercased, truncated to ``length`` and zero-padded; symbols
    outside the alphabet leave their column empty.
    """
    if not alphabet:
        raise ValueError("alphabet is empty")
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    lookup = {ch: i for i, ch in enumerate(alphabet)}
    out = np.zeros((len(alphabet), length))
    for pos, ch in enumerate(raw.lower()[:length]):
        row = lookup.get(ch)
        if row is not None:
            out[row, pos] = 1.0
    return out


def make_text(raw: str, cfg: EncoderConfig) -> TextInstance:
    return TextInstance(raw, encode_chars(raw, cfg.alphabet, cfg.seq_len))


# -- parameters ---------------------------------------------------------------


def _glorot(rng, shape, fan_in, fan_out, name) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _const(shape, name, value=0.0) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)


# Padding columns are all-zero, so a zero conv bias puts every padded
# pre-activation exactly on the ReLU kink; a small offset keeps it off.
CONV_BIAS_INIT = 0.01


def text_trunks(cfg: EncoderConfig) -> tuple[str, ...]:
    return ("shared",) if cfg.share_text_trunk else TEXT_BRANCHES


def trunk_for(branch: str, cfg: EncoderConfig) -> str:
    return "shared" if cfg.share_text_trunk else branch


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, drawn in a fixed order; zero biases except conv."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def put(t: Tensor):
        params[t.name] = t

    for trunk in text_trunks(cfg):
        in_ch = len(cfg.alphabet)
        for i, (out_ch, width) in enumerate(cfg.conv_layers):
            p = f"text.{trunk}.conv{i}"
            put(_glorot(rng, (out_ch, in_ch, width), in_ch * width, out_ch * width, f"{p}.weight"))
            put(_const((out_ch,), f"{p}.bias", CONV_BIAS_INIT))
            in_ch = out_ch
        h = cfg.hidden_dim
        for gate in "ifou":
            put(_glorot(rng, (in_ch, h), in_ch, h, f"text.{trunk}.lstm.W_{gate}"))
            put(_glorot(rng, (h, h), h, h, f"text.{trunk}.lstm.U_{gate}"))
            put(_const((h,), f"text.{trunk}.lstm.b_{gate}"))
    for branch in ("local", "relation"):
        put(_glorot(rng, (cfg.hidden_dim, cfg.attn_dim), cfg.hidden_dim, cfg.attn_dim, f"attn.{branch}.W_a"))
        put(_glorot(rng, (cfg.attn_dim,), cfg.attn_dim, 1, f"attn.{branch}.w_a"))
    heads = {
        "text_global": cfg.hidden_dim,
        "text_local": cfg.hidden_dim,
        "text_relation": cfg.hidden_dim,
        "image_global": cfg.feature_dim,
        "image_local": cfg.feature_dim,
        "image_relation": 2 * cfg.feature_dim,
    }
    for head, fan_in in heads.items():
        put(_glorot(rng, (fan_in, cfg.common_dim), fan_in, cfg.common_dim, f"head.{head}.weight"))
        put(_const((cfg.common_dim,), f"head.{head}.bias"))
    return params


def branch_of(name: str, cfg: EncoderConfig) -> str:
    """Which alignment channel a parameter serves: global, local, relation or shared."""
    parts = name.split(".")
    if parts[0] == "text":
        return "shared" if parts[1] == "shared" else parts[1]
    if parts[0] == "attn":
        return parts[1]
    return parts[1].split("_", 1)[1]


# -- building blocks ------------------------------------------------------------


def char_cnn_forward(onehot, params: Mapping[str, Tensor], trunk: str, cfg: EncoderConfig) -> Tensor:
    """Conv stack over (batch, alphabet, length) one-hot input.

    Each layer is a valid convolution followed by ReLU, then a temporal
    max-pool where ``cfg.pool_after`` says so. Returns (batch, frames, channels).
    """
    x = ad.as_tensor(onehot)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    need = min_length(cfg.conv_layers, cfg.pool_after, cfg.pool_width, cfg.pool_stride)
    if x.shape[2] < need:
        raise ShapeError(f"char_cnn_forward: sequence length {x.shape[2]} below required minimum {need}")
    for i, pool in enumerate(cfg.pool_after):
        w = params[f"text.{trunk}.conv{i}.weight"]
        b = params[f"text.{trunk}.conv{i}.bias"]
        x = ad.relu(ad.conv1d(x, w, b))
        if pool:
            x = ad.max_pool1d(x, cfg.pool_width, cfg.pool_stride)
    return ad.swapaxes(x, 1, 2)


def lstm_forward(frames, params: Mapping[str, Tensor], trunk: str, h0=None, c0=None, fused: bool = True) -> Tensor:
    """Run the LSTM over (batch, frames, features); returns (batch, frames, hidden).

    Gates ``i, f, o = sigmoid(W x_t + U h_{t-1} + b)``, cell
    ``c_t = c_{t-1} * f + tanh(W_u x_t + U_u h_{t-1} + b_u) * i`` and output
    ``h_t = o * tanh(c_t)``. ``fused=False`` composes the same recurrence
    from elementary ops (slow; kept as a cross-check).
    """
    p = {k: params[f"text.{trunk}.lstm.{k}"] for k in ("W_i", "W_f", "W_o", "W_u", "U_i", "U_f", "U_o", "U_u", "b_i", "b_f", "b_o", "b_u")}
    frames = ad.as_tensor(frames)
    if frames.ndim == 2:
        frames = ad.reshape(frames, (1,) + frames.shape)
    batch, steps, dim = frames.shape
    hidden = p["U_i"].shape[0]
    if dim != p["W_i"].shape[0]:
        raise ShapeError(f"lstm_forward: frame dim {dim} does not match W shape {p['W_i'].shape}")
    h = ad.as_tensor(np.zeros((batch, hidden)) if h0 is None else h0)
    c = ad.as_tensor(np.zeros((batch, hidden)) if c0 is None else c0)
    if h.shape != (batch, hidden) or c.shape != (batch, hidden):
        raise ShapeError(f"lstm_forward: initial state {h.shape}/{c.shape} does not match ({batch}, {hidden})")
    if fused:
        return ad.lstm_sequence(
            frames, [p[f"W_{g}"] for g in "ifou"], [p[f"U_{g}"] for g in "ifou"], [p[f"b_{g}"] for g in "ifou"], h, c
        )
    xw = {g: ad.matmul(frames, p[f"W_{g}"]) + p[f"b_{g}"] for g in "ifou"}
    outputs = []
    for t in range(steps):
        pre = {g: xw[g][:, t, :] + ad.matmul(h, p[f"U_{g}"]) for g in "ifou"}
        i, f, o = ad.sigmoid(pre["i"]), ad.sigmoid(pre["f"]), ad.sigmoid(pre["o"])
        c = c * f + ad.tanh(pre["u"]) * i
        h = o * ad.tanh(c)
        outputs.append(h)
    return ad.stack(outputs, axis=1)


def mean_pool(H: Tensor) -> Tensor:
    """Average over the frame axis of (batch, frames, hidden) or (frames, hidden)."""
    if H.shape[-2] < 1:
        raise ShapeError("mean_pool: empty hidden sequence")
    return ad.mean(H, axis=-2)


def attention_pool(H: Tensor, W_a: Tensor, w_a: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax-weighted pooling of hidden states.

    Scores are ``w_a . tanh(W_a h_k)`` per frame; the pooled vector is
    ``(1/m) sum_k a_k h_k``, matching the averaged form used for both the
    local and relation text channels.
    """
    if H.shape[-2] < 1:
        raise ShapeError("attention_pool: empty hidden sequence")
    if H.shape[-1] != W_a.shape[0] or W_a.shape[1] != w_a.shape[0]:
        raise ShapeError(f"attention_pool: H {H.shape}, W_a {W_a.shape}, w_a {w_a.shape} incompatible")
    M = ad.tanh(ad.matmul(H, W_a))
    weights = ad.softmax(ad.matmul(M, w_a), axis=-1)
    m = H.shape[-2]
    pooled = ad.sum(H * ad.reshape(weights, weights.shape + (1,)), axis=-2) * (1.0 / m)
    return pooled, weights


def build_relations(regions) -> np.ndarray:
    """Concatenate every ordered pair of distinct regions, first index major.

    Returns an (n(n-1), 2 dim) array; fewer than two regions gives an empty
    array and a warning, which disables the relation channel for the image.
    """
    regions = np.atleast_2d(np.asarray(regions, dtype=np.float64))
    n, dim = regions.shape
    if n < 2:
        warnings.warn(f"{n} region(s): relation channel disabled", RuntimeWarning, stacklevel=2)
        return np.zeros((0, 2 * dim))
    j, k = np.nonzero(~np.eye(n, dtype=bool))
    return np.concatenate([regions[j], regions[k]], axis=1)


def project(v, params: Mapping[str, Tensor], head: str, use_tanh: bool = False) -> Tensor:
    W = params[f"head.{head}.weight"]
    b = params[f"head.{head}.bias"]
    v = ad.as_tensor(v)
    if v.shape[-1] != W.shape[0]:
        raise ShapeError(f"project[{head}]: input dim {v.shape[-1]} does not match head {W.shape}")
    out = ad.matmul(v, W) + b
    return ad.tanh(out) if use_tanh else out


# -- full encoders ------------------------------------------------------------------


def _text_hidden(onehot: np.ndarray, params, trunk, cfg) -> Tensor:
    return lstm_forward(char_cnn_forward(onehot, params, trunk, cfg), params, trunk)


def encode_texts(
    texts: Sequence[TextInstance | str],
    params: Mapping[str, Tensor],
    cfg: EncoderConfig,
    branches: Sequence[str] = TEXT_BRANCHES,
) -> list[EmbeddingBundle]:
    """Encode a batch of texts; branches not listed are left as ``None``."""
    onehot = np.stack([
        t.onehot if isinstance(t, TextInstance) else encode_chars(t, cfg.alphabet, cfg.seq_len) for t in texts
    ])
    hidden: dict[str, Tensor] = {}

    def H(branch):
        trunk = trunk_for(branch, cfg)
        if trunk not in hidden:
            hidden[trunk] = _text_hidden(onehot, params, trunk, cfg)
        return hidden[trunk]

    g = loc = rel = None
    a_loc = a_rel = None
    if "global" in branches:
        g = project(mean_pool(H("global")), params, "text_global", cfg.project_tanh)
    if "local" in branches:
        pooled, a_loc = attention_pool(H("local"), params["attn.local.W_a"], params["attn.local.w_a"])
        loc = project(pooled, params, "text_local", cfg.project_tanh)
    if "relation" in branches:
        pooled, a_rel = attention_pool(H("relation"), params["attn.relation.W_a"], params["attn.relation.w_a"])
        rel = project(pooled, params, "text_relation", cfg.project_tanh)

    bundles = []
    for b in range(len(texts)):
        bundles.append(EmbeddingBundle(
            global_vec=g[b] if g is not None else None,
            locals=loc[b : b + 1] if loc is not None else None,
            relations=rel[b : b + 1] if rel is not None else None,
            attn_local_weights=a_loc.data[b].copy() if a_loc is not None else None,
            attn_relation_weights=a_rel.data[b].copy() if a_rel is not None else None,
        ))
    return bundles


def encode_text(t: TextInstance | str, params, cfg: EncoderConfig, branches=TEXT_BRANCHES) -> EmbeddingBundle:
    return encode_texts([t], params, cfg, branches)[0]


def encode_image(
    img: ImageInstance,
    params: Mapping[str, Tensor],
    cfg: EncoderConfig,
    branches: Sequence[str] = TEXT_BRANCHES,
) -> EmbeddingBundle:
    if img.global_feat.shape != (cfg.feature_dim,) or img.regions.shape[1] != cfg.feature_dim:
        raise ShapeError(
            f"encode_image: features {img.global_feat.shape}/{img.regions.shape} do not match feature_dim {cfg.feature_dim}"
        )
    g = project(img.global_feat, params, "image_global", cfg.project_tanh) if "global" in branches else None
    loc = project(img.regions, params, "image_local", cfg.project_tanh) if "local" in branches else None
    rel = None
    if "relation" in branches and img.num_regions >= 2:
        rel = project(build_relations(img.regions), params, "image_relation", cfg.project_tanh)
    return EmbeddingBundle(global_vec=g, locals=loc, relations=rel)


def encode_images(images: Sequence[ImageInstance], params, cfg: EncoderConfig, branches=TEXT_BRANCHES) -> list[EmbeddingBundle]:
    return [encode_image(img, params, cfg, branches) for img in images]
