"""Miniature pre-norm transformer text encoder with Key/Value hook points."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .text import TokenSeq

_NEG = -1e30


@dataclass
class EncoderConfig:
    vocab_size: int = 64
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 64
    feedforward_dim: int = 128
    max_len: int = 32
    modulated_layers: tuple[int, ...] = (1, 2, 3, 4)
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.modulated_layers = tuple(sorted(set(int(i) for i in self.modulated_layers)))
        if self.model_dim % max(self.num_heads, 1):
            raise ContractError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        bad = [i for i in self.modulated_layers if not 1 <= i <= self.num_layers]
        if bad:
            raise ContractError(f"modulated layers {bad} outside 1..{self.num_layers}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modulated_layers"] = list(self.modulated_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: (tuple(v) if k == "modulated_layers" else v) for k, v in d.items()})


LAYER_PARAMS = ("ln1_w", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_w", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class EncoderWeights:
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[dict[str, Tensor]]
    final_w: Tensor
    final_b: Tensor
    frozen: bool = True

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator, pos_std: float = 0.5) -> "EncoderWeights":
        D, F = cfg.model_dim, cfg.feedforward_dim

        def g(*shape, std=1.0):
            return Tensor(rng.normal(0.0, std, size=shape))

        layers = []
        for _ in range(cfg.num_layers):
            layers.append(
                {
                    "ln1_w": Tensor(np.ones(D)),
                    "ln1_b": Tensor(np.zeros(D)),
                    "wq": g(D, D, std=D**-0.5),
                    "bq": Tensor(np.zeros(D)),
                    "wk": g(D, D, std=D**-0.5),
                    "bk": Tensor(np.zeros(D)),
                    "wv": g(D, D, std=D**-0.5),
                    "bv": Tensor(np.zeros(D)),
                    "wo": g(D, D, std=D**-0.5),
                    "bo": Tensor(np.zeros(D)),
                    "ln2_w": Tensor(np.ones(D)),
                    "ln2_b": Tensor(np.zeros(D)),
                    "w1": g(F, D, std=D**-0.5),
                    "b1": Tensor(np.zeros(F)),
                    "w2": g(D, F, std=F**-0.5),
                    "b2": Tensor(np.zeros(D)),
                }
            )
        return cls(
            tok_emb=g(cfg.vocab_size, D),
            pos_emb=g(cfg.max_len, D, std=pos_std),
            layers=layers,
            final_w=Tensor(np.ones(D)),
            final_b=Tensor(np.zeros(D)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"encoder.tok_emb": self.tok_emb, "encoder.pos_emb": self.pos_emb,
               "encoder.final_w": self.final_w, "encoder.final_b": self.final_b}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"encoder.layers.{i}.{k}"] = v
        return out

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], cfg: EncoderConfig) -> "EncoderWeights":
        try:
            layers = [
                {k: Tensor(arrays[f"encoder.layers.{i}.{k}"]) for k in LAYER_PARAMS} for i in range(cfg.num_layers)
            ]
            w = cls(
                tok_emb=Tensor(arrays["encoder.tok_emb"]),
                pos_emb=Tensor(arrays["encoder.pos_emb"]),
                layers=layers,
                final_w=Tensor(arrays["encoder.final_w"]),
                final_b=Tensor(arrays["encoder.final_b"]),
            )
        except KeyError as exc:
            raise ContractError(f"encoder checkpoint lacks parameter {exc}") from exc
        if w.tok_emb.shape != (cfg.vocab_size, cfg.model_dim) or w.pos_emb.shape != (cfg.max_len, cfg.model_dim):
            raise ContractError(
                f"encoder checkpoint shapes {w.tok_emb.shape}/{w.pos_emb.shape} do not match config "
                f"({cfg.vocab_size}, {cfg.model_dim})/({cfg.max_len}, {cfg.model_dim})"
            )
        return w


def embed(weights: EncoderWeights, tokens: TokenSeq, offset: int = 0) -> Tensor:
    """Token plus positional embedding; row i uses position ``offset + i``."""
    ids = np.asarray(tokens.ids, dtype=np.int64)
    vocab_size, D = weights.tok_emb.shape
    if ids.size and ids.max() >= vocab_size:
        raise ContractError(f"token id {int(ids.max())} outside vocabulary of size {vocab_size}")
    if offset + len(ids) > weights.pos_emb.shape[0]:
        raise ContractError(f"sequence of {offset + len(ids)} rows exceeds max_len {weights.pos_emb.shape[0]}")
    if ids.size == 0:
        return Tensor(np.zeros((0, D)))
    rows = weights.tok_emb.data[ids] + weights.pos_emb.data[offset : offset + len(ids)]
    return Tensor(rows)


@dataclass
class EncodeResult:
    hidden: Tensor
    pooled: Tensor
    per_layer_kv: list[dict[str, np.ndarray]] | None = None


@dataclass
class BatchEncodeResult:
    hidden: Tensor  # [B, T, D]
    pooled: Tensor  # [B, D]
    per_layer_kv: list[dict[str, np.ndarray]] | None = field(default=None)


def _modulate(t: Tensor, attr_mask: np.ndarray, scale: Tensor) -> Tensor:
    # rows outside the mask are multiplied by exactly 1.0
    factor = 1.0 + ad.mul(attr_mask[:, :, None].astype(np.float64), ad.reshape(scale, (scale.shape[0], 1, scale.shape[1])) - 1.0)
    return t * factor


def encode_batch(
    weights: EncoderWeights,
    cfg: EncoderConfig,
    x: Tensor,
    caption_mask: np.ndarray,
    key_mask: np.ndarray | None = None,
    attr_mask: np.ndarray | None = None,
    s_k: Tensor | None = None,
    s_v: Tensor | None = None,
    collect_kv: bool = False,
) -> BatchEncodeResult:
    """Run the encoder stack on a padded batch ``x`` of shape [B, T, D].

    ``key_mask`` marks real (non-padding) rows; ``caption_mask`` marks the rows
    averaged into the pooled embedding; ``attr_mask`` marks rows whose Keys and
    Values are scaled by ``s_k``/``s_v`` (each [B, D]) at the modulated layers.
    """
    B, T, D = x.shape
    H = cfg.num_heads
    dh = D // H
    if T > cfg.max_len:
        raise ContractError(f"{T} input rows exceed max_len {cfg.max_len}")
    modulate = s_k is not None or s_v is not None
    if modulate:
        if attr_mask is None:
            raise ContractError("scales given without attribute positions")
        for s in (s_k, s_v):
            if s is None or s.shape != (B, D):
                raise ContractError(f"scale vectors must have shape {(B, D)}, got {None if s is None else s.shape}")
    kv_log = [] if collect_kv else None
    pad = None if key_mask is None or key_mask.all() else ~key_mask[:, None, None, :]

    h = x
    for li, p in enumerate(weights.layers, start=1):
        a = ad.layer_norm(h, p["ln1_w"], p["ln1_b"], cfg.ln_eps)
        q = ad.linear(a, p["wq"], p["bq"])
        k = ad.linear(a, p["wk"], p["bk"])
        v = ad.linear(a, p["wv"], p["bv"])
        k_pre, v_pre = k, v
        if modulate and li in cfg.modulated_layers:
            k = _modulate(k, attr_mask, s_k)
            v = _modulate(v, attr_mask, s_v)
        if kv_log is not None:
            kv_log.append({"k_pre": k_pre.data.copy(), "v_pre": v_pre.data.copy(), "k": k.data.copy(), "v": v.data.copy()})
        qh = ad.transpose(ad.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        kh = ad.transpose(ad.reshape(k, (B, T, H, dh)), (0, 2, 3, 1))
        vh = ad.transpose(ad.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
        scores = ad.matmul(qh, kh) * (1.0 / np.sqrt(dh))
        if pad is not None:
            scores = ad.masked_fill(scores, pad, _NEG)
        att = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, vh), (0, 2, 1, 3)), (B, T, D))
        h = h + ad.linear(ctx, p["wo"], p["bo"])
        f = ad.layer_norm(h, p["ln2_w"], p["ln2_b"], cfg.ln_eps)
        h = h + ad.linear(ad.gelu(ad.linear(f, p["w1"], p["b1"])), p["w2"], p["b2"])
    if weights.layers:
        h = ad.layer_norm(h, weights.final_w, weights.final_b, cfg.ln_eps)

    cm = caption_mask.astype(np.float64)
    counts = np.maximum(cm.sum(axis=1, keepdims=True), 1.0)
    pooled = ad.tsum(h * cm[:, :, None], axis=1) / counts
    return BatchEncodeResult(h, pooled, kv_log)


def encode(
    weights: EncoderWeights,
    cfg: EncoderConfig,
    x: Tensor,
    attr_positions=(),
    scales=None,
    num_prefix: int = 0,
    collect_kv: bool = False,
) -> EncodeResult:
    """Encode one sequence of (prefix + caption) rows.

    ``attr_positions`` are 0-based row indices into ``x``; ``scales`` is a
    ``ScalePair`` (or ``None`` for the plain encoder).  The pooled embedding
    is the mean over the caption rows ``num_prefix:``; with ``num_layers = 0``
    the hidden states are the inputs themselves.
    """
    n, D = x.shape
    rows = np.zeros((1, n), dtype=bool)
    rows[0, num_prefix:] = True
    attr = np.zeros((1, n), dtype=bool)
    for i in attr_positions:
        if not 0 <= i < n:
            raise ContractError(f"attribute position {i} outside 0..{n - 1}")
        attr[0, i] = True
    s_k = s_v = None
    if scales is not None:
        if scales.s_k.shape != (D,) or scales.s_v.shape != (D,):
            raise ContractError(f"scale vectors must have shape ({D},), got {scales.s_k.shape}/{scales.s_v.shape}")
        s_k = ad.reshape(scales.s_k, (1, D))
        s_v = ad.reshape(scales.s_v, (1, D))
    res = encode_batch(
        weights, cfg, ad.reshape(x, (1, n, D)), rows, None, attr if scales is not None else None, s_k, s_v, collect_kv
    )
    return EncodeResult(ad.reshape(res.hidden, (n, D)), ad.reshape(res.pooled, (D,)), res.per_layer_kv)
