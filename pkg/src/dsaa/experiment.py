"""Train and score the ablation variants on one generated benchmark."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from .adapters import DsaaParams
from .config import RunConfig
from .fgovd.protocol import EvalReport, pipeline_scorer, run_protocol
from .fgovd.world import SyntheticWorld, build_world, gen_benchmark
from .pipeline import PipelineFlags, TextPipeline
from .rng import stream
from .training import train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    use_apa: bool = True
    use_modulator: bool = True
    use_attr_loss: bool = True
    trained: bool = True


BASELINE = Variant("Baseline", trained=False)
APA_ONLY = Variant("APA", use_modulator=False, use_attr_loss=False)
APA_ATTR = Variant("APA+AttrLoss", use_modulator=False)
FULL = Variant("DSAA")
ABLATION = (BASELINE, APA_ONLY, APA_ATTR, FULL)


@dataclass
class VariantResult:
    variant: Variant
    pipeline: TextPipeline
    dsaa: DsaaParams
    report: EvalReport
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class Experiment:
    cfg: RunConfig
    world: SyntheticWorld
    data: dict[str, list[dict]]
    results: dict[str, VariantResult] = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: RunConfig) -> "Experiment":
        world = build_world(cfg.world, cfg.seed, cfg.encoder)
        return cls(cfg, world, gen_benchmark(world, cfg.data, cfg.seed))

    def run(self, variant: Variant) -> VariantResult:
        cfg = self.cfg
        t0 = time.perf_counter()
        dsaa = DsaaParams.init(self.world.encoder_config.model_dim, cfg.dsaa.apa_bottleneck, cfg.dsaa.mod_bottleneck,
                               stream(cfg.seed, "dsaa"), cfg.dsaa.gamma_k, cfg.dsaa.gamma_v)
        flags = PipelineFlags(variant.use_apa, variant.use_modulator, cfg.dsaa.modulate_prefixes)
        pipeline = self.world.pipeline(dsaa, flags)
        history = []
        if variant.trained:
            tcfg = dataclasses.replace(cfg.training, use_attr_loss=variant.use_attr_loss)
            history = train(pipeline, self.world, self.data["train"], tcfg, cfg.losses, cfg.seed)
        items = self.data["eval"]
        report = run_protocol(items, pipeline_scorer(pipeline, self.world, items), cfg.eval.iou_threshold,
                              cfg.eval.workers, {"variant": variant.name, "config_digest": cfg.digest()})
        res = VariantResult(variant, pipeline, dsaa, report, history, time.perf_counter() - t0)
        self.results[variant.name] = res
        log.info("%s: average %.4f (%.0fs)", variant.name, report.average, res.seconds)
        return res

    def reports(self) -> dict[str, EvalReport]:
        return {k: v.report for k, v in self.results.items()}
