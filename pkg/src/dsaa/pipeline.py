"""Caption -> (attribute prefixes, modulated encoder) -> pooled text embedding.

``TextPipeline`` ties the text pipeline, the frozen encoder and the DSAA
adapters together.  Without adapters, or for a caption with no matched
attributes, it runs the plain encoder on the plain embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import DsaaParams, apa_prefix, condition_vector, modulation_scales
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderWeights, embed, encode_batch
from .text import AttributeSpanSet, ExtractionConfig, TokenSeq, Vocabulary, extract_attributes, match_spans, tokenize


@dataclass
class PipelineFlags:
    use_apa: bool = True
    use_modulator: bool = True
    modulate_prefixes: bool = False


@dataclass(frozen=True)
class Prepared:
    text: str
    tokens: TokenSeq
    spans: AttributeSpanSet
    fallback: bool = False


@dataclass
class Encoded:
    pooled: Tensor  # [B, D]
    attr_pooled: Tensor | None  # [B, D], mean final state over attribute tokens
    has_attr: np.ndarray  # [B] bool
    per_layer_kv: list | None = None
    rows: list[tuple[int, int]] = field(default_factory=list)  # (num_prefix, caption_len) per caption


class TextPipeline:
    def __init__(
        self,
        vocab: Vocabulary,
        enc_cfg: EncoderConfig,
        enc_weights: EncoderWeights,
        dsaa: DsaaParams | None = None,
        flags: PipelineFlags | None = None,
        extraction: ExtractionConfig | None = None,
        extractor: Callable[[str], Sequence[str]] | None = None,
    ):
        self.vocab = vocab
        self.enc_cfg = enc_cfg
        self.enc_weights = enc_weights
        self.dsaa = dsaa
        self.flags = flags or PipelineFlags()
        self.extraction = extraction or ExtractionConfig()
        self._extractor = extractor
        self._prep: dict[str, Prepared] = {}
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.enc_cfg.model_dim

    @property
    def active(self) -> bool:
        return self.dsaa is not None and (self.flags.use_apa or self.flags.use_modulator)

    def trainable(self) -> list[Tensor]:
        if self.dsaa is None:
            return []
        out = []
        if self.flags.use_apa:
            out += list(self.dsaa.apa.params().values())
        if self.flags.use_modulator:
            out += list(self.dsaa.modulator.params().values())
        return out

    def invalidate(self) -> None:
        """Drop cached embeddings after the adapter weights change."""
        self._cache.clear()

    # -- text side -------------------------------------------------------
    def prepare(self, text: str) -> Prepared:
        hit = self._prep.get(text)
        if hit is not None:
            return hit
        tokens = tokenize(self.vocab, text, self.enc_cfg.max_len)
        fallback = False
        if self._extractor is not None:
            phrases = list(self._extractor(text))
        else:
            ext = extract_attributes(self.extraction, text)
            phrases, fallback = ext.phrases, ext.fallback
        spans = match_spans(self.vocab, tokens, phrases)
        prep = Prepared(text, tokens, spans, fallback)
        self._prep[text] = prep
        return prep

    # -- encoding --------------------------------------------------------
    def forward(self, texts: Sequence[str], collect_kv: bool = False) -> Encoded:
        """Differentiable batched encoding of ``texts``."""
        preps = [self.prepare(t) for t in texts]
        B, D = len(preps), self.dim
        use_apa = self.active and self.flags.use_apa
        use_mod = self.active and self.flags.use_modulator
        pos = self.enc_weights.pos_emb.data

        layout = []
        attr_rows = []  # attribute embeddings fed to the adapter
        for p in preps:
            k = p.spans.k if (use_apa and p.spans) else 0
            layout.append((k, p.tokens.length))
        T = max(k + L for k, L in layout) if layout else 0
        if T > self.enc_cfg.max_len:
            raise ValueError(f"caption plus prefixes need {T} rows, max_len is {self.enc_cfg.max_len}")

        base = np.zeros((B, T, D))
        key_mask = np.zeros((B, T), dtype=bool)
        cap_mask = np.zeros((B, T), dtype=bool)
        attr_mask = np.zeros((B, T), dtype=bool)
        has_attr = np.zeros(B, dtype=bool)
        raw_embeds = []
        prefix_slots = []
        for b, (p, (k, L)) in enumerate(zip(preps, layout)):
            e0 = embed(self.enc_weights, p.tokens).data  # positions 0..L-1: the adapter inputs
            raw_embeds.append(e0)
            if L:
                base[b, k : k + L] = embed(self.enc_weights, p.tokens, offset=k).data
            key_mask[b, : k + L] = True
            cap_mask[b, k : k + L] = True
            if p.spans:
                has_attr[b] = True
                for i in p.spans.attr_indices:
                    attr_mask[b, k + i - 1] = True
                if k:
                    base[b, :k] = pos[:k]
                    attr_rows.append(e0[[i - 1 for i in p.spans.attr_indices]])
                    prefix_slots.extend((b, j) for j in range(k))
                    if self.flags.modulate_prefixes:
                        attr_mask[b, :k] = True

        x = Tensor(base)
        if attr_rows:
            prefixes = apa_prefix(self.dsaa.apa, Tensor(np.concatenate(attr_rows, axis=0)))
            sel = np.zeros((B * T, len(prefix_slots)))
            for col, (b, j) in enumerate(prefix_slots):
                sel[b * T + j, col] = 1.0
            x = x + ad.reshape(ad.matmul(Tensor(sel), prefixes), (B, T, D))

        s_k = s_v = None
        if use_mod and has_attr.any():
            cond = np.zeros((B, D))
            for b, p in enumerate(preps):
                if p.spans:
                    cond[b] = condition_vector(raw_embeds[b], p.spans).data
            scales = modulation_scales(self.dsaa.modulator, Tensor(cond))
            s_k, s_v = scales.s_k, scales.s_v

        res = encode_batch(
            self.enc_weights,
            self.enc_cfg,
            x,
            cap_mask,
            key_mask,
            attr_mask if s_k is not None else None,
            s_k,
            s_v,
            collect_kv,
        )
        caption_attr = attr_mask & cap_mask
        attr_pooled = None
        if caption_attr.any():
            am = caption_attr.astype(np.float64)
            cnt = np.maximum(am.sum(axis=1, keepdims=True), 1.0)
            attr_pooled = ad.tsum(res.hidden * am[:, :, None], axis=1) / cnt
        return Encoded(res.pooled, attr_pooled, has_attr, res.per_layer_kv, layout)

    def embed_texts(self, texts: Sequence[str], batch: int = 64) -> np.ndarray:
        """Pooled embeddings without gradient tracking, cached per caption.

        Captions are grouped by row count so no batch carries padding; batch
        composition can still move results by floating-point rounding.
        """
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            groups: dict[int, list[str]] = {}
            for t in missing:
                p = self.prepare(t)
                k = p.spans.k if (self.active and self.flags.use_apa and p.spans) else 0
                groups.setdefault(k + p.tokens.length, []).append(t)
            with ad.no_grad():
                for rows in sorted(groups):
                    items = groups[rows]
                    for i in range(0, len(items), batch):
                        chunk = items[i : i + batch]
                        pooled = self.forward(chunk).pooled.data
                        for t, v in zip(chunk, pooled):
                            self._cache[t] = v
        return np.stack([self._cache[t] for t in texts]) if texts else np.zeros((0, self.dim))
