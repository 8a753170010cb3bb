"""Synthetic fine-grained detection world and benchmark generator.

The world freezes everything outside the trainable adapters: the vocabulary,
the text encoder, latent visual vectors for every category and attribute, and
a linear map from region features into the text embedding space.

Region feature of an object = category latent + sum of its attribute latents
+ Gaussian noise.  The map sends each category latent to the frozen encoder's
embedding of ``"a {category}"`` and each attribute latent to a fixed
attribute direction, so the visual side carries attribute evidence whether or
not the text side expresses it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint
from ..encoder import EncoderConfig, EncoderWeights
from ..errors import ContractError, GenerationError
from ..pipeline import TextPipeline
from ..rng import stream
from ..text import ATTRIBUTE_TYPES, ExtractionConfig, Vocabulary

log = logging.getLogger(__name__)

DIFFICULTIES = ("Hard", "Medium", "Easy", "Trivial")
ATTR_SUBSETS = ("Color", "Material", "Pattern", "Transparency")
SUBSETS = DIFFICULTIES + ATTR_SUBSETS
SUBSET_TYPE = dict(zip(ATTR_SUBSETS, ATTRIBUTE_TYPES))
# attribute slot order inside a caption: "a transparent red striped glass vase"
SLOT_ORDER = ("transparency", "color", "pattern", "material")
NEUTRAL_NOUNS = ("object", "item", "thing")

DATASET_FORMAT = "dsaa-fgovd"
DATASET_VERSION = 1


@dataclass
class WorldConfig:
    categories: list[str] = field(
        default_factory=lambda: ["dog", "chair", "plate", "mug", "car", "lamp", "bag", "vase"]
    )
    attributes: dict[str, list[str]] = field(
        default_factory=lambda: {
            "color": ["red", "blue", "green", "black", "white", "yellow"],
            "material": ["wooden", "metal", "plastic", "leather"],
            "pattern": [],
            "transparency": [],
        }
    )
    feature_dim: int = 48
    noise_std: float = 0.35
    min_angle_deg: float = 10.0
    # how far the visual attribute directions lean on the encoder's own attribute shift
    attr_alignment: float = 0.25
    # norm of an attribute's projected direction relative to a category's
    attr_gain: float = 0.8
    # scales attribute-word token embeddings; < 1 lets context swamp them
    attr_embed_scale: float = 0.5
    logit_bias: float = 0.5

    def attribute_list(self) -> list[tuple[str, str]]:
        return [(kind, a) for kind in ATTRIBUTE_TYPES for a in self.attributes.get(kind, [])]


@dataclass
class SyntheticWorld:
    config: WorldConfig
    vocab: Vocabulary
    encoder_config: EncoderConfig
    encoder: EncoderWeights
    category_latents: np.ndarray  # [C, F]
    attribute_latents: np.ndarray  # [A, F]
    projection: np.ndarray  # [D, F]
    attr_index: dict[str, int]
    attr_type: dict[str, str]

    @property
    def categories(self) -> list[str]:
        return self.config.categories

    def lexicon(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in self.config.attributes.items() if v}

    def extraction(self) -> ExtractionConfig:
        return ExtractionConfig(mode="lexicon", lexicon=self.lexicon())

    def pipeline(self, dsaa=None, flags=None, extraction: ExtractionConfig | None = None) -> TextPipeline:
        return TextPipeline(self.vocab, self.encoder_config, self.encoder, dsaa, flags, extraction or self.extraction())

    def object_feature(self, category: str, attrs, rng: np.random.Generator) -> np.ndarray:
        f = self.category_latents[self.categories.index(category)].copy()
        for a in attrs:
            f += self.attribute_latents[self.attr_index[a]]
        return f + rng.normal(0.0, self.config.noise_std, size=f.shape)

    def project(self, feats) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float64)
        return feats @ self.projection.T

    # -- serialization ---------------------------------------------------
    def to_json(self) -> dict:
        return {
            "format": "dsaa-world",
            "version": 1,
            "config": asdict(self.config),
            "vocab": self.vocab.to_json(),
            "encoder_config": self.encoder_config.to_dict(),
            "category_latents": checkpoint.encode_array(self.category_latents),
            "attribute_latents": checkpoint.encode_array(self.attribute_latents),
            "projection": checkpoint.encode_array(self.projection),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_json(cls, doc: dict, encoder: EncoderWeights) -> "SyntheticWorld":
        if doc.get("format") != "dsaa-world":
            raise ContractError("not a dsaa-world document")
        cfg = WorldConfig(**doc["config"])
        attrs = cfg.attribute_list()
        return cls(
            config=cfg,
            vocab=Vocabulary(doc["vocab"]),
            encoder_config=EncoderConfig.from_dict(doc["encoder_config"]),
            encoder=encoder,
            category_latents=checkpoint.decode_array(doc["category_latents"]),
            attribute_latents=checkpoint.decode_array(doc["attribute_latents"]),
            projection=checkpoint.decode_array(doc["projection"]),
            attr_index={a: i for i, (_, a) in enumerate(attrs)},
            attr_type={a: k for k, a in attrs},
        )

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "world.json").write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))
        checkpoint.save(directory / "encoder.ckpt.json", self.encoder.to_arrays(), self.encoder_config.to_dict())

    @classmethod
    def load(cls, directory: str | Path) -> "SyntheticWorld":
        directory = Path(directory)
        doc = json.loads((directory / "world.json").read_text())
        arrays, cfg = checkpoint.load(directory / "encoder.ckpt.json")
        enc_cfg = EncoderConfig.from_dict(cfg)
        return cls.from_json(doc, EncoderWeights.from_arrays(arrays, enc_cfg))


def _latents(n: int, dim: int, min_angle: float, rng: np.random.Generator) -> np.ndarray:
    limit = np.cos(np.deg2rad(min_angle))
    for _ in range(1000):
        v = rng.normal(size=(n, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        g = np.abs(v @ v.T)
        np.fill_diagonal(g, 0.0)
        if g.max() < limit:
            return v
    raise GenerationError(f"could not draw {n} latent vectors in {dim} dims with pairwise angle > {min_angle} deg")


def caption(category: str, attrs) -> str:
    return " ".join(["a", *attrs, category])


def world_words(cfg: WorldConfig, extra=()) -> list[str]:
    words = ["a", *NEUTRAL_NOUNS, *cfg.categories]
    words += [a for _, a in cfg.attribute_list()]
    return words + [w for w in extra if w not in words]


def build_world(cfg: WorldConfig, seed: int, encoder_config: EncoderConfig | None = None) -> SyntheticWorld:
    """Create the frozen world: vocabulary, encoder, latents and region projection."""
    attrs = cfg.attribute_list()
    if not cfg.categories or not attrs:
        raise ContractError("the world needs at least one category and one attribute")
    vocab = Vocabulary.build(world_words(cfg))
    enc_cfg = encoder_config or EncoderConfig()
    enc_cfg = EncoderConfig.from_dict({**enc_cfg.to_dict(), "vocab_size": len(vocab)})
    encoder = EncoderWeights.init(enc_cfg, stream(seed, "encoder"))
    attr_ids = [vocab.token_to_id[a] for _, a in attrs]
    encoder.tok_emb.data[attr_ids] *= cfg.attr_embed_scale

    rng = stream(seed, "world")
    n_c, n_a = len(cfg.categories), len(attrs)
    lat = _latents(n_c + n_a, cfg.feature_dim, cfg.min_angle_deg, rng)
    world = SyntheticWorld(
        config=cfg,
        vocab=vocab,
        encoder_config=enc_cfg,
        encoder=encoder,
        category_latents=lat[:n_c],
        attribute_latents=lat[n_c:],
        projection=np.zeros((enc_cfg.model_dim, cfg.feature_dim)),
        attr_index={a: i for i, (_, a) in enumerate(attrs)},
        attr_type={a: k for k, a in attrs},
    )
    world.projection = _fit_projection(world, rng)
    return world


def _fit_projection(world: SyntheticWorld, rng: np.random.Generator) -> np.ndarray:
    """Least-squares map sending each concept latent to its text-space target."""
    cfg = world.config
    plain = world.pipeline()
    cat_t = plain.embed_texts([caption(c, []) for c in cfg.categories])
    scale = np.linalg.norm(cat_t, axis=1).mean()
    D = cat_t.shape[1]
    attr_t = []
    for _, a in cfg.attribute_list():
        with_attr = plain.embed_texts([caption(c, [a]) for c in cfg.categories])
        shift = (with_attr - cat_t).mean(axis=0)
        shift /= np.linalg.norm(shift) + 1e-12
        free = rng.normal(size=D)
        free /= np.linalg.norm(free)
        direction = cfg.attr_alignment * shift + (1.0 - cfg.attr_alignment) * free
        attr_t.append(direction / np.linalg.norm(direction) * cfg.attr_gain * scale)
    targets = np.concatenate([cat_t, np.array(attr_t)], axis=0)  # [n, D]
    latents = np.concatenate([world.category_latents, world.attribute_latents], axis=0)  # [n, F]
    sol, *_ = np.linalg.lstsq(latents, targets, rcond=None)  # latents @ sol = targets
    return sol.T


# ---------------------------------------------------------------------------
# benchmark generation


@dataclass
class GenConfig:
    # 50 batches of 8: one epoch per 50-step loss-log window
    train_records: int = 400
    eval_records_per_subset: int = 60
    train_negatives: int = 3
    eval_negatives: int = 5
    decoys: int = 2
    jitter_per_object: int = 1
    jitter: float = 0.15
    min_box: float = 0.15
    max_box: float = 0.45
    max_box_iou: float = 0.1

    def __post_init__(self):
        if not 0 <= self.eval_negatives <= 10:
            raise ContractError(f"eval_negatives={self.eval_negatives} exceeds the bound of at most 10 negatives per caption")
        if self.train_negatives < 0:
            raise ContractError("train_negatives must be non-negative")


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _box(rng, cfg: GenConfig) -> list[float]:
    w, h = rng.uniform(cfg.min_box, cfg.max_box, size=2)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return [float(x0), float(y0), float(x0 + w), float(y0 + h)]


def _jitter(box, rng, amount: float) -> list[float]:
    w, h = box[2] - box[0], box[3] - box[1]
    d = rng.uniform(-amount, amount, size=4) * np.array([w, h, w, h])
    b = np.clip(np.array(box) + d, 0.0, 1.0)
    if b[2] - b[0] < 1e-3 or b[3] - b[1] < 1e-3:
        return list(box)
    return [float(v) for v in b]


class _Sampler:
    def __init__(self, world: SyntheticWorld, rng: np.random.Generator):
        self.world = world
        self.rng = rng
        self.by_type = {k: list(v) for k, v in world.config.attributes.items() if v}
        self.types = [t for t in SLOT_ORDER if t in self.by_type]

    def composition(self, n_attrs: int | None = None, require: str | None = None):
        rng = self.rng
        if n_attrs is None:
            n_attrs = int(rng.integers(1, min(2, len(self.types)) + 1))
        n_attrs = min(n_attrs, len(self.types))
        types = list(rng.choice(self.types, size=n_attrs, replace=False))
        if require is not None and require not in types:
            types[0] = require
        types = [t for t in SLOT_ORDER if t in types]
        attrs = [str(rng.choice(self.by_type[t])) for t in types]
        category = str(rng.choice(self.world.categories))
        return category, attrs

    # candidate negatives -------------------------------------------------
    def hard(self, category, attrs, only_type=None):
        out = []
        for slot, a in enumerate(attrs):
            kind = self.world.attr_type[a]
            if only_type and kind != only_type:
                continue
            for sib in self.by_type[kind]:
                if sib != a:
                    out.append(caption(category, attrs[:slot] + [sib] + attrs[slot + 1 :]))
        return out

    def medium(self, category, attrs):
        pool = [a for _, a in self.world.config.attribute_list() if a not in attrs]
        return [caption(category, attrs[:s] + [r] + attrs[s + 1 :]) for s in range(len(attrs)) for r in pool]

    def easy(self, category, attrs):
        options = [[s for s in self.by_type[self.world.attr_type[a]] if s != a] for a in attrs]
        return [caption(category, list(combo)) for combo in itertools.product(*options)]

    def trivial(self, category, attrs):
        return [caption(c, attrs) for c in self.world.categories if c != category]

    def candidates(self, subset, category, attrs):
        if subset == "Hard":
            return self.hard(category, attrs)
        if subset == "Medium":
            return self.medium(category, attrs)
        if subset == "Easy":
            return self.easy(category, attrs)
        if subset == "Trivial":
            return self.trivial(category, attrs)
        return self.hard(category, attrs, only_type=SUBSET_TYPE[subset])

    def pick(self, cands, n):
        cands = sorted(set(cands))
        idx = self.rng.permutation(len(cands))[:n]
        return [cands[i] for i in sorted(idx)]


def _capacity(world: SyntheticWorld, subset: str) -> int:
    """Most distinct negatives any composition can offer for ``subset``."""
    s = _Sampler(world, np.random.default_rng(0))
    best = 0
    pool_types = s.types
    for n in range(1, min(2, len(pool_types)) + 1):
        for types in itertools.combinations(pool_types, n):
            attrs = [s.by_type[t][0] for t in types]
            best = max(best, len(set(s.candidates(subset, world.categories[0], attrs))))
    return best


def _scene(world: SyntheticWorld, sampler: _Sampler, cfg: GenConfig, target, rng) -> dict:
    objects = [{"category": target[0], "attributes": list(target[1])}]
    others = [c for c in world.categories if c != target[0]]
    for _ in range(cfg.decoys if others else 0):
        cat, attrs = sampler.composition()
        if cat == target[0]:
            cat = str(rng.choice(others))
        objects.append({"category": cat, "attributes": attrs})
    boxes: list[list[float]] = []
    for _ in objects:
        for _ in range(200):
            b = _box(rng, cfg)
            if all(_iou(b, o) <= cfg.max_box_iou for o in boxes):
                break
        boxes.append(b)
    proposals = []
    for oi, (obj, box) in enumerate(zip(objects, boxes)):
        obj["box"] = box
        shapes = [box] + [_jitter(box, rng, cfg.jitter) for _ in range(cfg.jitter_per_object)]
        for pb in shapes:
            feat = world.object_feature(obj["category"], obj["attributes"], rng)
            proposals.append({"box": pb, "object": oi, "feature": [float(v) for v in feat]})
    return {"objects": objects, "target": 0, "proposals": proposals}


def _records(world, cfg: GenConfig, subset: str, count: int, negatives: int, exact: bool, rng, split: str):
    sampler = _Sampler(world, rng)
    cap = _capacity(world, subset)
    if exact and cap < negatives:
        raise GenerationError(
            f"{split} split needs {negatives} distinct {subset} negatives per caption; "
            f"the attribute vocabulary allows at most {cap} (short by {negatives - cap})"
        )
    if cap == 0 or count == 0:
        if count:
            log.warning("subset %s has no possible negatives in this world; skipped", subset)
        return []
    require = SUBSET_TYPE.get(subset)
    out = []
    for i in range(count):
        for _ in range(1000):
            n_attrs = 2 if subset == "Easy" else None
            cat, attrs = sampler.composition(n_attrs, require)
            cands = sampler.candidates(subset, cat, attrs)
            if cands and (not exact or len(set(cands)) >= negatives):
                break
        else:
            raise GenerationError(f"could not draw a {subset} composition with {negatives} negatives")
        negs = sampler.pick(cands, negatives)
        scene = _scene(world, sampler, cfg, (cat, attrs), rng)
        out.append(
            {
                "id": f"{split}-{subset.lower()}-{i:05d}",
                "subset": subset,
                "scene": scene,
                "record": {
                    "positive": caption(cat, attrs),
                    "negatives": negs,
                    "difficulty": subset if subset in DIFFICULTIES else "Hard",
                    "attr_subset": subset if subset in ATTR_SUBSETS else "Mixed",
                    "target": 0,
                },
            }
        )
    return out


def gen_benchmark(world: SyntheticWorld, cfg: GenConfig, seed: int) -> dict[str, list[dict]]:
    """Deterministic train/eval records.

    Training records are Hard compositions with exactly ``train_negatives``
    negatives.  Evaluation holds ``eval_records_per_subset`` records per
    subset with up to ``eval_negatives`` negatives each:

    * Hard: one attribute swapped for a same-type sibling
    * Medium: one attribute swapped for any attribute not in the caption
    * Easy: every attribute swapped (two-attribute objects)
    * Trivial: same attributes on a different category
    * Color/Material/Pattern/Transparency: Hard restricted to that type
    """
    train = _records(world, cfg, "Hard", cfg.train_records, cfg.train_negatives, True, stream(seed, "data/train"), "train")
    evaluation = []
    for subset in SUBSETS:
        evaluation += _records(
            world, cfg, subset, cfg.eval_records_per_subset, cfg.eval_negatives, False,
            stream(seed, f"data/eval/{subset}"), "eval",
        )
    return {"train": train, "eval": evaluation}


def write_dataset(path: str | Path, records: list[dict], split: str, meta: dict) -> str:
    """Write a JSON-lines split (header line first) and return its sha256 digest."""
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION, "split": split, **meta}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    text = "\n".join(lines) + "\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_dataset(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ContractError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ContractError(f"{path}: unsupported dataset header {header.get('format')}/{header.get('version')}")
    return header, [json.loads(line) for line in lines[1:] if line.strip()]
