"""Attribute Prefix Adapter and K/V Modulator: the trainable DSAA stages."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .text import AttributeSpanSet

log = logging.getLogger(__name__)

INIT_STD = 0.02
# tanh rounds to exactly +-1 in float64 once |x| > ~19; shrinking its amplitude
# by 1e-9 keeps every scale strictly inside the open (1 - gamma, 1 + gamma) band
TANH_AMPLITUDE = 1.0 - 1e-9


@dataclass
class ApaWeights:
    w1: Tensor  # [d, D]
    w2: Tensor  # [D, d]
    ln_w: Tensor  # [d]
    ln_b: Tensor  # [d]
    ln_eps: float = 1e-5

    def __post_init__(self):
        d, D = self.w1.shape
        if self.w2.shape != (D, d):
            raise ContractError(f"APA w2 must be {(D, d)}, got {self.w2.shape}")
        if not 1 <= d < D:
            raise ContractError(f"APA bottleneck d={d} must satisfy 1 <= d < D={D}")

    @classmethod
    def init(cls, dim: int, bottleneck: int, rng: np.random.Generator) -> "ApaWeights":
        return cls(
            w1=Tensor(rng.normal(0.0, INIT_STD, size=(bottleneck, dim)), requires_grad=True),
            w2=Tensor(np.zeros((dim, bottleneck)), requires_grad=True),
            ln_w=Tensor(np.ones(bottleneck), requires_grad=True),
            ln_b=Tensor(np.zeros(bottleneck), requires_grad=True),
        )

    @property
    def bottleneck(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "w2": self.w2, "ln_w": self.ln_w, "ln_b": self.ln_b}


@dataclass
class ModulatorWeights:
    wk1: Tensor  # [b, D]
    wk2: Tensor  # [D, b]
    wv1: Tensor
    wv2: Tensor
    gamma_k: float = 0.1
    gamma_v: float = 0.1

    def __post_init__(self):
        self.gamma_k, self.gamma_v = float(self.gamma_k), float(self.gamma_v)
        if self.gamma_k <= 0 or self.gamma_v <= 0:
            raise ContractError("modulation strengths gamma_k, gamma_v must be positive")

    @classmethod
    def init(cls, dim: int, bottleneck: int, rng: np.random.Generator, gamma_k=0.1, gamma_v=0.1) -> "ModulatorWeights":
        def small():
            return Tensor(rng.normal(0.0, INIT_STD, size=(bottleneck, dim)), requires_grad=True)

        return cls(
            wk1=small(),
            wk2=Tensor(np.zeros((dim, bottleneck)), requires_grad=True),
            wv1=small(),
            wv2=Tensor(np.zeros((dim, bottleneck)), requires_grad=True),
            gamma_k=gamma_k,
            gamma_v=gamma_v,
        )

    @property
    def bottleneck(self) -> int:
        return self.wk1.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"wk1": self.wk1, "wk2": self.wk2, "wv1": self.wv1, "wv2": self.wv2}


@dataclass
class ScalePair:
    s_k: Tensor
    s_v: Tensor


def apa_prefix(w: ApaWeights, a: Tensor) -> Tensor:
    """Norm-preserving residual adapter applied to attribute embeddings.

    Accepts one vector [D] or a stack of rows [n, D].  A zero-norm input comes
    back as the zero vector.
    """
    a = ad.as_tensor(a)
    h = ad.layer_norm(ad.gelu(ad.linear(a, w.w1)), w.ln_w, w.ln_b, w.ln_eps)
    r = a + ad.linear(h, w.w2)
    a_norm = ad.l2_norm(a, axis=-1, keepdims=True)
    r_norm = ad.l2_norm(r, axis=-1, keepdims=True)
    if np.any(a_norm.data == 0):
        log.warning("zero-norm attribute embedding; prefix left at zero")
    # guard only the degenerate r = 0 rows; elsewhere the divisor is the true norm
    r_norm = r_norm + (r_norm.data == 0).astype(np.float64)
    return (r / r_norm) * a_norm


def build_prefixes(w: ApaWeights, embeds: Tensor, spans: AttributeSpanSet) -> Tensor:
    """One prefix row per attribute token, in ascending caption order."""
    L, D = embeds.shape
    spans.validate(L)
    idx = [i - 1 for i in spans.attr_indices]
    if not idx:
        return Tensor(np.zeros((0, D)))
    return apa_prefix(w, ad.getitem(embeds, np.asarray(idx)))


def condition_vector(embeds: Tensor | np.ndarray, spans: AttributeSpanSet) -> Tensor:
    """Span-length-weighted mean of span prototypes (mean embedding per span)."""
    if not spans:
        raise ContractError("condition vector needs at least one attribute span")
    embeds = ad.as_tensor(embeds)
    total = None
    weight = 0
    for s in spans.spans:
        proto = ad.mean(ad.getitem(embeds, np.asarray([i - 1 for i in s.indices])), axis=0)
        term = proto * float(len(s.indices))
        total = term if total is None else total + term
        weight += len(s.indices)
    return total * (1.0 / weight)


def modulation_scales(w: ModulatorWeights, c: Tensor) -> ScalePair:
    """Near-identity channel scales ``1 + gamma * tanh(W2 gelu(W1 c))`` for Keys and Values."""
    c = ad.as_tensor(c)
    s_k = 1.0 + (w.gamma_k * TANH_AMPLITUDE) * ad.tanh(ad.linear(ad.gelu(ad.linear(c, w.wk1)), w.wk2))
    s_v = 1.0 + (w.gamma_v * TANH_AMPLITUDE) * ad.tanh(ad.linear(ad.gelu(ad.linear(c, w.wv1)), w.wv2))
    return ScalePair(s_k, s_v)


@dataclass
class DsaaParams:
    apa: ApaWeights
    modulator: ModulatorWeights

    @classmethod
    def init(cls, dim: int, apa_bottleneck: int, mod_bottleneck: int, rng: np.random.Generator,
             gamma_k: float = 0.1, gamma_v: float = 0.1) -> "DsaaParams":
        return cls(ApaWeights.init(dim, apa_bottleneck, rng),
                   ModulatorWeights.init(dim, mod_bottleneck, rng, gamma_k, gamma_v))

    def named(self) -> dict[str, Tensor]:
        out = {f"dsaa.apa.{k}": v for k, v in self.apa.params().items()}
        out.update({f"dsaa.modulator.{k}": v for k, v in self.modulator.params().items()})
        return out

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def hyper(self) -> dict:
        return {"gamma_k": self.modulator.gamma_k, "gamma_v": self.modulator.gamma_v, "apa_ln_eps": self.apa.ln_eps}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], hyper: dict | None = None) -> "DsaaParams":
        hyper = hyper or {}
        try:
            apa = ApaWeights(*(Tensor(arrays[f"dsaa.apa.{k}"], requires_grad=True) for k in ("w1", "w2", "ln_w", "ln_b")),
                             ln_eps=hyper.get("apa_ln_eps", 1e-5))
            mod = ModulatorWeights(
                *(Tensor(arrays[f"dsaa.modulator.{k}"], requires_grad=True) for k in ("wk1", "wk2", "wv1", "wv2")),
                gamma_k=hyper.get("gamma_k", 0.1),
                gamma_v=hyper.get("gamma_v", 0.1),
            )
        except KeyError as exc:
            raise ContractError(f"DSAA checkpoint lacks parameter {exc}") from exc
        return cls(apa, mod)
