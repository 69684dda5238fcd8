# msat_music/services/neural_core.py
"""Decoders, decomposition, cross-scale fusion and output heads.

Parameters live in MsatParams as named float64 arrays. A forward pass turns
them into Tensors (`leaves()`), trainable only for unfrozen groups, so the
gradients of frozen groups are never recorded.

Groups:
- decoder.note / decoder.bar / decoder.track
- decompose  (d_model -> 6 * token_width)
- fusion     (omega [6, 3] for global, w [6, 3, N] for local)
- heads      (one token_width -> vocab projection per field)
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, stack
from .representation import SCALE_BAR, SCALES, ScaledSequence, realign
from .vocabulary import FIELD_SIZES, FIELDS

logger = logging.getLogger(__name__)

FUSION_NONE = "none"
FUSION_GLOBAL = "global"
FUSION_LOCAL = "local"
FUSION_MODES = (FUSION_NONE, FUSION_GLOBAL, FUSION_LOCAL)

GROUP_DECOMPOSE = "decompose"
GROUP_FUSION = "fusion"
GROUP_HEADS = "heads"

MASK_VALUE = -1e30
LN_EPS = 1e-5


class CodeOutOfRange(ValueError):
    pass


class NonFiniteActivation(RuntimeError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


def decoder_group(scale: str) -> str:
    return f"decoder.{scale}"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    token_width: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 1024

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if min(self.d_model, self.token_width, self.n_layers, self.n_heads, self.d_ff, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class MsatParams:
    config: ModelConfig
    arrays: Dict[str, np.ndarray]
    fusion: str = FUSION_NONE
    scales: Tuple[str, ...] = (SCALE_BAR,)
    target_scale: str = SCALE_BAR
    frozen: set = field(default_factory=set)
    meta: Dict[str, object] = field(default_factory=dict)

    @staticmethod
    def group_of(name: str) -> str:
        parts = name.split(".")
        return ".".join(parts[:2]) if parts[0] == "decoder" else parts[0]

    def groups(self) -> List[str]:
        out: List[str] = []
        for name in self.arrays:
            g = self.group_of(name)
            if g not in out:
                out.append(g)
        return out

    def names_in(self, group: str) -> List[str]:
        return [n for n in self.arrays if self.group_of(n) == group]

    def is_frozen(self, name: str) -> bool:
        return self.group_of(name) in self.frozen

    def leaves(self, trainable: bool = True) -> Dict[str, Tensor]:
        return {
            name: Tensor(arr, requires_grad=trainable and not self.is_frozen(name), name=name)
            for name, arr in self.arrays.items()
        }

    def gradients(self, leaves: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        out = {}
        for name, arr in self.arrays.items():
            g = leaves[name].grad
            out[name] = np.zeros_like(arr) if g is None else g
        return out

    def copy(self) -> "MsatParams":
        return MsatParams(
            config=self.config,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            fusion=self.fusion,
            scales=tuple(self.scales),
            target_scale=self.target_scale,
            frozen=set(self.frozen),
            meta=dict(self.meta),
        )

    def checksum(self, group: Optional[str] = None) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays.items():
            if group is None or self.group_of(name) == group:
                h.update(name.encode("utf-8"))
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------- initialization ----------
def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_decoder(rng: np.random.Generator, cfg: ModelConfig, scale: str) -> Dict[str, np.ndarray]:
    d, ff = cfg.d_model, cfg.d_ff
    pre = f"{decoder_group(scale)}."
    arrays: Dict[str, np.ndarray] = {}
    for f, size in zip(FIELDS, FIELD_SIZES):
        arrays[f"{pre}embed.{f}"] = _normal(rng, (size, d), d ** -0.5)
    for l in range(cfg.n_layers):
        b = f"{pre}block{l}."
        arrays[b + "ln1.gain"] = np.ones(d)
        arrays[b + "ln1.bias"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            arrays[b + f"attn.w{proj}"] = _normal(rng, (d, d), 0.02)
            arrays[b + f"attn.b{proj}"] = np.zeros(d)
        arrays[b + "ln2.gain"] = np.ones(d)
        arrays[b + "ln2.bias"] = np.zeros(d)
        arrays[b + "ff.w1"] = _normal(rng, (d, ff), 0.02)
        arrays[b + "ff.b1"] = np.zeros(ff)
        arrays[b + "ff.w2"] = _normal(rng, (ff, d), 0.02)
        arrays[b + "ff.b2"] = np.zeros(d)
    arrays[pre + "ln_f.gain"] = np.ones(d)
    arrays[pre + "ln_f.bias"] = np.zeros(d)
    return arrays


def init_decompose(rng: np.random.Generator, cfg: ModelConfig) -> Dict[str, np.ndarray]:
    return {
        "decompose.weight": _normal(rng, (cfg.d_model, 6 * cfg.token_width), 0.02),
        "decompose.bias": np.zeros(6 * cfg.token_width),
    }


def init_heads(rng: np.random.Generator, cfg: ModelConfig) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for f, size in zip(FIELDS, FIELD_SIZES):
        arrays[f"heads.{f}.weight"] = _normal(rng, (cfg.token_width, size), 0.02)
        arrays[f"heads.{f}.bias"] = np.zeros(size)
    return arrays


def init_fusion(cfg: ModelConfig, mode: str) -> Dict[str, np.ndarray]:
    if mode == FUSION_GLOBAL:
        return {"fusion.omega": np.zeros((6, 3))}
    if mode == FUSION_LOCAL:
        return {"fusion.w": np.zeros((6, 3, cfg.token_width))}
    raise ValueError(f"unknown fusion mode {mode!r}")


def init_single_scale(cfg: ModelConfig, scale: str, seed: int) -> MsatParams:
    rng = np.random.default_rng(seed)
    arrays = init_decoder(rng, cfg, scale)
    arrays.update(init_decompose(rng, cfg))
    arrays.update(init_heads(rng, cfg))
    return MsatParams(config=cfg, arrays=arrays, fusion=FUSION_NONE, scales=(scale,), target_scale=scale)


def init_msat(cfg: ModelConfig, fusion: str, seed: int) -> MsatParams:
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for scale in SCALES:
        arrays.update(init_decoder(rng, cfg, scale))
    arrays.update(init_decompose(rng, cfg))
    arrays.update(init_fusion(cfg, fusion))
    arrays.update(init_heads(rng, cfg))
    return MsatParams(
        config=cfg,
        arrays=arrays,
        fusion=fusion,
        scales=SCALES,
        target_scale=SCALE_BAR,
        frozen={decoder_group("note"), decoder_group("track")},
    )


# ---------- building blocks ----------
def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def _codes(seq: ScaledSequence | np.ndarray | Sequence) -> np.ndarray:
    if isinstance(seq, ScaledSequence):
        return seq.codes()
    codes = np.asarray(seq, dtype=np.int64)
    return codes.reshape(-1, 6)


def embed(seq, p: Mapping[str, Tensor], scale: str) -> Tensor:
    """Sum of the six field embeddings plus the sinusoidal position code."""
    codes = _codes(seq)
    pre = f"{decoder_group(scale)}.embed."
    out: Optional[Tensor] = None
    for f, (name, size) in enumerate(zip(FIELDS, FIELD_SIZES)):
        col = codes[:, f]
        if col.size and (col.min() < 0 or col.max() >= size):
            raise CodeOutOfRange(f"{name} code outside [0, {size})")
        rows = p[pre + name][col]
        out = rows if out is None else out + rows
    d = p[pre + FIELDS[0]].shape[1]
    return out + positional_encoding(len(codes), d)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + LN_EPS) ** -0.5 * gain + bias


def gelu(x: Tensor) -> Tensor:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def self_attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    t, d = x.shape
    dh = d // n_heads

    def heads_of(proj: str) -> Tensor:
        y = x @ p[prefix + f"w{proj}"] + p[prefix + f"b{proj}"]
        return y.reshape(t, n_heads, dh).transpose(1, 0, 2)

    q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh)) + causal_mask(t)
    ctx = scores.softmax(axis=-1) @ v
    ctx = ctx.transpose(1, 0, 2).reshape(t, d)
    return ctx @ p[prefix + "wo"] + p[prefix + "bo"]


def ensure_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteActivation(f"non-finite activation in {what}")
    return t


def decoder_forward(x: Tensor, p: Mapping[str, Tensor], scale: str, cfg: ModelConfig) -> Tensor:
    """Pre-norm masked self-attention blocks with a final layer norm."""
    pre = f"{decoder_group(scale)}."
    ensure_finite(x, f"{pre}input")
    for l in range(cfg.n_layers):
        b = f"{pre}block{l}."
        x = x + self_attention(layer_norm(x, p[b + "ln1.gain"], p[b + "ln1.bias"]), p, b + "attn.", cfg.n_heads)
        h = layer_norm(x, p[b + "ln2.gain"], p[b + "ln2.bias"])
        x = x + gelu(h @ p[b + "ff.w1"] + p[b + "ff.b1"]) @ p[b + "ff.w2"] + p[b + "ff.b2"]
        ensure_finite(x, f"{b}output")
    return layer_norm(x, p[pre + "ln_f.gain"], p[pre + "ln_f.bias"])


def decompose(h: Tensor, p: Mapping[str, Tensor]) -> List[Tensor]:
    """One affine map d -> 6N, split into six token-embedding slices."""
    z = h @ p["decompose.weight"] + p["decompose.bias"]
    n = z.shape[-1] // 6
    return [z[..., f * n:(f + 1) * n] for f in range(6)]


def fuse_global(h_note: Tensor, h_bar: Tensor, h_track: Tensor, field_index: int,
                omega: Tensor) -> Tuple[Tensor, Tensor]:
    alpha = omega[field_index].softmax(axis=-1)
    fused = alpha[0] * h_note + alpha[1] * h_bar + alpha[2] * h_track
    return fused, alpha


def fuse_local(h_note: Tensor, h_bar: Tensor, h_track: Tensor, field_index: int,
               w: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-position scores: row i of W dotted with the i-th scale's embedding."""
    views = (h_note, h_bar, h_track)
    scores = stack([(h * w[field_index, i]).sum(axis=-1) for i, h in enumerate(views)], axis=-1)
    alpha = scores.softmax(axis=-1)
    fused = alpha[..., 0:1] * h_note + alpha[..., 1:2] * h_bar + alpha[..., 2:3] * h_track
    return fused, alpha


def heads(tokens: Sequence[Tensor], p: Mapping[str, Tensor]) -> List[Tensor]:
    return [tok @ p[f"heads.{f}.weight"] + p[f"heads.{f}.bias"] for f, tok in zip(FIELDS, tokens)]


# ---------- model level ----------
@dataclass
class ForwardResult:
    logits: List[Tensor]
    alphas: Optional[List[Tensor]] = None


def scale_hidden(params: MsatParams, p: Mapping[str, Tensor], scale: str, seq) -> Tensor:
    return decoder_forward(embed(seq, p, scale), p, scale, params.config)


def fused_logits(params: MsatParams, p: Mapping[str, Tensor], hidden: Mapping[str, Tensor]) -> ForwardResult:
    """Logits from per-scale hidden states that already share one event order.

    Single-scale models use only their own scale's hidden state.
    """
    if params.fusion == FUSION_NONE:
        return ForwardResult(heads(decompose(hidden[params.target_scale], p), p))
    by_scale = {s: decompose(hidden[s], p) for s in SCALES}
    fused: List[Tensor] = []
    alphas: List[Tensor] = []
    for f in range(6):
        views = (by_scale["note"][f], by_scale["bar"][f], by_scale["track"][f])
        if params.fusion == FUSION_GLOBAL:
            out, alpha = fuse_global(*views, f, p["fusion.omega"])
        else:
            out, alpha = fuse_local(*views, f, p["fusion.w"])
        fused.append(out)
        alphas.append(alpha)
    return ForwardResult(heads(fused, p), alphas)


def forward(params: MsatParams, p: Mapping[str, Tensor], sequences: Mapping[str, ScaledSequence]) -> ForwardResult:
    """Run every decoder the model holds on its own ordering of one song.

    Context scales are realigned to the target scale's order before fusion,
    so logits row j belongs to event j of `sequences[target_scale]`.
    """
    target = sequences[params.target_scale]
    hidden: Dict[str, Tensor] = {}
    for scale in params.scales:
        seq = sequences[scale]
        h = scale_hidden(params, p, scale, seq)
        if scale != params.target_scale:
            h = realign(h, seq.alignment, target.alignment)
        hidden[scale] = h
    return fused_logits(params, p, hidden)


def global_alpha(params: MsatParams) -> np.ndarray:
    omega = params.arrays["fusion.omega"]
    z = np.exp(omega - omega.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def check_compatible(configs: Iterable[ModelConfig]) -> ModelConfig:
    configs = list(configs)
    first = configs[0]
    for c in configs[1:]:
        if c != first:
            raise IncompatibleCheckpoint(f"model configs differ: {first} vs {c}")
    return first
