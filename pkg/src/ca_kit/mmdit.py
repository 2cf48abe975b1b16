"""A small dual-stream multi-modal DiT with full activation tracing.

Image patches and prompt tokens live in separate residual streams with their
own projections, modulation and MLP, but share one joint softmax attention
over the concatenated ``[image; prompt]`` token axis. Every intermediate the
saliency code needs (per-modality q/k/v and attention outputs before the
output projection) is captured in a ``LayerTrace``.

Row-vector convention throughout: ``y = x @ W + b`` with ``W`` of shape
``(d_in, d_out)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .numerics import Rng, as_matrix, check_finite, gelu, layer_norm, matmul, row_softmax, silu

WEIGHT_MAGIC = b"CAW1"

# Modulation head output blocks, in order.
MOD_BLOCKS = ("shift_attn", "scale_attn", "gate_attn", "shift_mlp", "scale_mlp", "gate_mlp")

DEFAULT_TOKENS = (
    "a", "an", "the", "photo", "picture", "image", "of", "on", "in", "with",
    "and", "near", "under", "above", "sitting", "standing", "running", "flying",
    "background", "grass", "sky", "tree", "water", "road", "ground", "wall",
    "floor", "cloud", "mountain", "sand", "snow", "field", "building",
    "cat", "dog", "bird", "horse", "sheep", "cow", "person", "car", "bus",
    "bicycle", "motorbike", "boat", "train", "aeroplane", "bottle", "chair",
    "table", "sofa", "plant", "monitor", "ball", "house", "flower", "fish",
    "red", "green", "blue", "white", "black", "small", "large",
)


class UnknownTokenError(LookupError):
    def __init__(self, token):
        self.token = token
        super().__init__(f"unknown token {token!r}")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 6
    img_h: int = 16
    img_w: int = 16
    prompt_len: int = 8
    mlp_ratio: int = 4
    vocab_size: int = len(DEFAULT_TOKENS)
    timesteps: int = 1000

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ValueError(f"{f.name} must be an integer, got {value!r}")
            if value < 1:
                raise ValueError(f"{f.name} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.d_model < 2:
            raise ValueError("d_model must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_image_tokens(self) -> int:
        return self.img_h * self.img_w

    @property
    def mlp_hidden(self) -> int:
        return self.d_model * self.mlp_ratio

    def to_dict(self) -> dict:
        return {k: int(v) for k, v in asdict(self).items()}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def default_tokens(vocab_size: int) -> list[str]:
    tokens = list(DEFAULT_TOKENS[:vocab_size])
    tokens += [f"<tok{i}>" for i in range(len(tokens), vocab_size)]
    return tokens


class EmbeddingTable:
    """Token string to embedding row lookup; stands in for a text encoder."""

    def __init__(self, matrix, tokens):
        matrix = as_matrix(matrix, "embedding table")
        tokens = list(tokens)
        if len(tokens) != matrix.shape[0]:
            raise ValueError(f"{len(tokens)} tokens for {matrix.shape[0]} embedding rows")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in embedding table")
        self.matrix = matrix
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __contains__(self, token):
        return token in self.index

    def __len__(self):
        return len(self.tokens)

    def row(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UnknownTokenError(token) from None

    def lookup(self, tokens) -> np.ndarray:
        rows = [self.row(tok) for tok in tokens]
        return self.matrix[rows].copy()


@dataclass
class StreamWeights:
    """One modality's parameters inside one MMAttn layer."""

    q_w: np.ndarray
    q_b: np.ndarray
    k_w: np.ndarray
    k_b: np.ndarray
    v_w: np.ndarray
    v_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    mod_w: np.ndarray
    mod_b: np.ndarray

    @staticmethod
    def shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, hidden = config.d_model, config.mlp_hidden
        n_mod = len(MOD_BLOCKS) * d
        return {
            "q_w": (d, d), "q_b": (d,),
            "k_w": (d, d), "k_b": (d,),
            "v_w": (d, d), "v_b": (d,),
            "proj_w": (d, d), "proj_b": (d,),
            "mlp_w1": (d, hidden), "mlp_b1": (hidden,),
            "mlp_w2": (hidden, d), "mlp_b2": (d,),
            "mod_w": (d, n_mod), "mod_b": (n_mod,),
        }

    def modulation(self, cond) -> dict[str, np.ndarray]:
        """Map the conditioning vector to (shift, scale, gate) blocks, each ``(1, d)``."""
        cond = np.asarray(cond, dtype=np.float64).reshape(1, -1)
        out = matmul(silu(cond), self.mod_w) + self.mod_b
        return dict(zip(MOD_BLOCKS, np.split(out, len(MOD_BLOCKS), axis=1)))

    def qkv(self, h):
        return (
            matmul(h, self.q_w) + self.q_b,
            matmul(h, self.k_w) + self.k_b,
            matmul(h, self.v_w) + self.v_b,
        )

    def mlp(self, h):
        return matmul(gelu(matmul(h, self.mlp_w1) + self.mlp_b1), self.mlp_w2) + self.mlp_b2


@dataclass
class LayerWeights:
    index: int
    n_heads: int
    img: StreamWeights
    txt: StreamWeights


@dataclass
class MMDiTWeights:
    config: ModelConfig
    layers: list[LayerWeights]
    embedding: EmbeddingTable
    pos_embed: np.ndarray

    def named_tensors(self):
        """Yield ``(name, array)`` in the canonical file order."""
        yield "embedding", self.embedding.matrix
        yield "pos_embed", self.pos_embed
        for layer in self.layers:
            for stream in ("img", "txt"):
                sw = getattr(layer, stream)
                for f in fields(StreamWeights):
                    yield f"layer{layer.index}.{stream}.{f.name}", getattr(sw, f.name)

    def expected_shapes(self):
        return expected_tensor_shapes(self.config)

    def save(self, path):
        Path(path).write_bytes(dump_weights(self))

    @classmethod
    def load(cls, path):
        return load_weights(Path(path).read_bytes())


def expected_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "embedding": (config.vocab_size, config.d_model),
        "pos_embed": (config.n_image_tokens, config.d_model),
    }
    per_stream = StreamWeights.shapes(config)
    for i in range(config.n_layers):
        for stream in ("img", "txt"):
            for name, shape in per_stream.items():
                shapes[f"layer{i}.{stream}.{name}"] = shape
    return shapes


def init_weights(config: ModelConfig, seed: int) -> MMDiTWeights:
    """Fill every matrix from its own named Gaussian stream, std ``1/sqrt(d_model)``.

    Bias vectors start at zero.
    """
    rng = Rng(seed)
    std = 1.0 / math.sqrt(config.d_model)

    def draw(name, shape):
        if len(shape) == 1:
            return np.zeros(shape)
        return std * rng.normal(name, shape)

    layers = []
    per_stream = StreamWeights.shapes(config)
    for i in range(config.n_layers):
        streams = {
            stream: StreamWeights(**{
                name: draw(f"layer{i}.{stream}.{name}", shape)
                for name, shape in per_stream.items()
            })
            for stream in ("img", "txt")
        }
        layers.append(LayerWeights(index=i, n_heads=config.n_heads, **streams))
    table = EmbeddingTable(
        draw("embedding", (config.vocab_size, config.d_model)), default_tokens(config.vocab_size)
    )
    pos = draw("pos_embed", (config.n_image_tokens, config.d_model))
    return MMDiTWeights(config=config, layers=layers, embedding=table, pos_embed=pos)


# ---------------------------------------------------------------------------
# CAW1 weight file
#
#   b"CAW1"
#   u32 header_len, header_len bytes of canonical JSON {"config": ..., "tokens": [...]}
#   u32 tensor_count
#   per tensor: u16 name_len, name (utf-8), u8 ndim, ndim x u32 dims,
#               prod(dims) little-endian float64 values, row-major
# ---------------------------------------------------------------------------


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def dump_weights(weights: MMDiTWeights) -> bytes:
    header = _canonical({"config": weights.config.to_dict(), "tokens": weights.embedding.tokens})
    tensors = list(weights.named_tensors())
    parts = [WEIGHT_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_weights(data: bytes) -> MMDiTWeights:
    if data[:4] != WEIGHT_MAGIC:
        raise ValueError("not a CAW1 weight file")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated CAW1 weight file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (header_len,) = struct.unpack("<I", take(4))
    header = json.loads(take(header_len))
    config = ModelConfig(**header["config"])
    expected = expected_tensor_shapes(config)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if name not in expected:
            raise ValueError(f"unexpected tensor {name!r}")
        if tuple(shape) != expected[name]:
            raise ValueError(f"tensor {name!r} has shape {shape}, config implies {expected[name]}")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise ValueError("trailing bytes after CAW1 tensors")
    missing = set(expected) - set(tensors)
    if missing:
        raise ValueError(f"missing tensors: {sorted(missing)[:5]}")

    layers = []
    for i in range(config.n_layers):
        streams = {
            stream: StreamWeights(**{
                f.name: tensors[f"layer{i}.{stream}.{f.name}"] for f in fields(StreamWeights)
            })
            for stream in ("img", "txt")
        }
        layers.append(LayerWeights(index=i, n_heads=config.n_heads, **streams))
    table = EmbeddingTable(tensors["embedding"], header["tokens"])
    return MMDiTWeights(config=config, layers=layers, embedding=table, pos_embed=tensors["pos_embed"])


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def timestep_embedding(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of a raw timestep, shape ``(dim,)``."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = float(t) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


def noise_image(x0, t: float, T: int, rng: Rng, name: str = "noise") -> np.ndarray:
    """Rectified-flow interpolation ``(1 - t/T) x0 + (t/T) eps``."""
    x0 = check_finite(as_matrix(x0, "x0"), "x0")
    if not 0 <= t <= T:
        raise ValueError(f"timestep {t} outside [0, {T}]")
    if t == 0:
        return x0.copy()
    eps = rng.normal(name, x0.shape)
    if t == T:
        return eps
    s = t / T
    return (1.0 - s) * x0 + s * eps


def modulate(h, shift, scale):
    return (1.0 + scale) * h + shift


def split_heads(m: np.ndarray, n_heads: int) -> np.ndarray:
    """``(rows, d)`` -> ``(n_heads, rows, head_dim)``."""
    rows, d = m.shape
    return m.reshape(rows, n_heads, d // n_heads).transpose(1, 0, 2)


def merge_heads(h: np.ndarray) -> np.ndarray:
    n_heads, rows, hd = h.shape
    return h.transpose(1, 0, 2).reshape(rows, n_heads * hd)


def multi_head_attention(q, k, v, n_heads: int):
    """Softmax attention of ``q`` rows over ``k``/``v`` rows, per head.

    Returns ``(out, probs)``; ``out`` is ``(len(q), d)`` with heads
    concatenated, ``probs`` is ``(n_heads, len(q), len(k))``.
    """
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[1] % n_heads:
        raise ValueError(f"width {q.shape[1]} not divisible by {n_heads} heads")
    hd = q.shape[1] // n_heads
    scale = 1.0 / math.sqrt(hd)
    qh, kh, vh = (split_heads(m, n_heads) for m in (q, k, v))
    outs, probs = [], []
    for h in range(n_heads):
        p = row_softmax(matmul(qh[h], kh[h].T), scale)
        probs.append(p)
        outs.append(matmul(p, vh[h]))
    return merge_heads(np.stack(outs)), np.stack(probs)


@dataclass
class LayerTrace:
    """Everything one MMAttn layer computed.

    ``o_x``/``o_p`` are attention outputs after head concatenation and before
    the output projection. ``attn`` holds joint attention probabilities,
    shape ``(n_heads, n + l, n + l)``, image rows/columns first.
    """

    layer: int
    n_heads: int
    x_in: np.ndarray
    p_in: np.ndarray
    cond: np.ndarray
    q_x: np.ndarray
    k_x: np.ndarray
    v_x: np.ndarray
    o_x: np.ndarray
    q_p: np.ndarray
    k_p: np.ndarray
    v_p: np.ndarray
    o_p: np.ndarray
    attn: np.ndarray
    x_next: np.ndarray
    p_next: np.ndarray
    timestep: float | None = None

    def heads(self, name: str) -> np.ndarray:
        """Per-head view of a captured matrix, ``(n_heads, rows, head_dim)``."""
        return split_heads(getattr(self, name), self.n_heads)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)}


def stream_update(h, o, sw: StreamWeights, mod):
    """Gated residual update shared by all streams.

    ``h <- h + gate_attn * (o P)`` then
    ``h <- h + gate_mlp * MLP((1 + scale_mlp) lnorm(h) + shift_mlp)``.
    """
    h = h + mod["gate_attn"] * (matmul(o, sw.proj_w) + sw.proj_b)
    inner = modulate(layer_norm(h), mod["shift_mlp"], mod["scale_mlp"])
    return h + mod["gate_mlp"] * sw.mlp(inner)


def mm_attention_layer(x, p, layer: LayerWeights, cond, timestep=None):
    """One dual-stream MMAttn layer. Returns ``(x_next, p_next, trace)``."""
    x = as_matrix(x, "x")
    p = as_matrix(p, "p")
    d = layer.img.q_w.shape[0]
    if x.shape[1] != d or p.shape[1] != d:
        raise ValueError(f"token width mismatch: x{x.shape}, p{p.shape}, d_model={d}")
    n = x.shape[0]
    mod_x = layer.img.modulation(cond)
    mod_p = layer.txt.modulation(cond)

    q_x, k_x, v_x = layer.img.qkv(modulate(layer_norm(x), mod_x["shift_attn"], mod_x["scale_attn"]))
    q_p, k_p, v_p = layer.txt.qkv(modulate(layer_norm(p), mod_p["shift_attn"], mod_p["scale_attn"]))

    o, attn = multi_head_attention(
        np.concatenate([q_x, q_p]),
        np.concatenate([k_x, k_p]),
        np.concatenate([v_x, v_p]),
        layer.n_heads,
    )
    o_x, o_p = o[:n], o[n:]

    x_next = stream_update(x, o_x, layer.img, mod_x)
    p_next = stream_update(p, o_p, layer.txt, mod_p)
    trace = LayerTrace(
        layer=layer.index, n_heads=layer.n_heads, x_in=x, p_in=p,
        cond=np.asarray(cond, dtype=np.float64),
        q_x=q_x, k_x=k_x, v_x=v_x, o_x=o_x,
        q_p=q_p, k_p=k_p, v_p=v_p, o_p=o_p,
        attn=attn, x_next=x_next, p_next=p_next, timestep=timestep,
    )
    return x_next, p_next, trace


def prepare_inputs(tokens, x0, t, weights: MMDiTWeights, rng: Rng | None = None):
    """Embed the prompt, noise the image tokens and add positions.

    Returns ``(x, p, cond)`` ready for the first layer.
    """
    config = weights.config
    tokens = list(tokens)
    if not 1 <= len(tokens) <= config.prompt_len:
        raise ValueError(f"prompt has {len(tokens)} tokens, expected 1..{config.prompt_len}")
    p = weights.embedding.lookup(tokens)
    x0 = as_matrix(x0, "x0")
    if x0.shape != (config.n_image_tokens, config.d_model):
        raise ValueError(
            f"x0 has shape {x0.shape}, expected ({config.n_image_tokens}, {config.d_model})"
        )
    x = noise_image(x0, t, config.timesteps, rng if rng is not None else Rng(0))
    x = x + weights.pos_embed
    return x, p, timestep_embedding(t, config.d_model)


def forward_with_trace(tokens, x0, t, weights: MMDiTWeights, config: ModelConfig | None = None,
                       rng: Rng | None = None) -> list[LayerTrace]:
    if config is not None and config != weights.config:
        raise ValueError("config does not match the weights")
    x, p, cond = prepare_inputs(tokens, x0, t, weights, rng)
    traces = []
    for layer in weights.layers:
        x, p, trace = mm_attention_layer(x, p, layer, cond, timestep=t)
        traces.append(trace)
    return traces
