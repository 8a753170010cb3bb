"""Command-line entry point: gen-data, train, eval, analyze, extract.

Exit codes: 0 ok, 2 bad config or input, 3 generation failure, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import checkpoint
from . import config as configmod
from .adapters import DsaaParams
from .analysis import PromptGroupSpec, emit_report, separation_stats, suppression_metric
from .config import RunConfig
from .errors import ContractError, GenerationError
from .fgovd.protocol import EvalReport, oracle_scorer, pipeline_scorer, run_protocol
from .fgovd.world import SyntheticWorld, WorldConfig, build_world, gen_benchmark, read_dataset, write_dataset
from .pipeline import PipelineFlags
from .rng import stream
from .text import Vocabulary, extract_attributes, match_spans, split_words, tokenize
from .training import train

log = logging.getLogger("dsaa")

EXIT_OK, EXIT_INPUT, EXIT_GENERATION, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    """Missing or inconsistent input files; maps to exit code 2."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(path: Path, cfg: RunConfig, **extra) -> None:
    doc = {"seed": cfg.seed, "config_digest": cfg.digest(), "created": _now(), **extra}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.data_dir)


def load_world(cfg: RunConfig) -> SyntheticWorld:
    d = _data_dir(cfg) / "world"
    if not (d / "world.json").exists():
        raise InputError(f"no generated world under {d}; run gen-data first")
    return SyntheticWorld.load(d)


def load_split(cfg: RunConfig, split: str) -> list[dict]:
    path = _data_dir(cfg) / f"{split}.jsonl"
    if not path.exists():
        raise InputError(f"dataset file {path} not found; run gen-data first")
    return read_dataset(path)[1]


def _extraction(cfg: RunConfig, world: SyntheticWorld):
    ext = cfg.extraction
    if not ext.lexicon:
        ext = dataclasses.replace(ext, lexicon=world.lexicon())
    return ext


def _flags(cfg: RunConfig) -> PipelineFlags:
    return PipelineFlags(cfg.dsaa.use_apa, cfg.dsaa.use_modulator, cfg.dsaa.modulate_prefixes)


def init_dsaa(cfg: RunConfig, dim: int) -> DsaaParams:
    return DsaaParams.init(dim, cfg.dsaa.apa_bottleneck, cfg.dsaa.mod_bottleneck, stream(cfg.seed, "dsaa"),
                           cfg.dsaa.gamma_k, cfg.dsaa.gamma_v)


def load_dsaa(path: str | Path, world: SyntheticWorld, cfg: RunConfig) -> tuple[DsaaParams, str]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint {path} not found")
    arrays, meta = checkpoint.load(path)
    digest = checkpoint.file_digest(path)
    D = world.encoder_config.model_dim
    w1 = arrays.get("dsaa.apa.w1")
    if w1 is None or w1.shape[1] != D:
        got = None if w1 is None else w1.shape[1]
        raise InputError(
            f"checkpoint {path} (sha256 {digest}) has model dim {got}, "
            f"but config {cfg.digest()} / world {world.digest()} expect {D}"
        )
    return DsaaParams.from_arrays(arrays, meta.get("dsaa")), digest


def _save_dsaa(path: Path, dsaa: DsaaParams, cfg: RunConfig, step: int) -> str:
    meta = {"config_digest": cfg.digest(), "step": step, "dsaa": dsaa.hyper()}
    return checkpoint.save(path, dsaa.to_arrays(), meta)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = _data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(cfg.world, cfg.seed, cfg.encoder)
    world.save(out / "world")
    data = gen_benchmark(world, cfg.data, cfg.seed)
    meta = {"seed": cfg.seed, "config_digest": cfg.digest(), "world_digest": world.digest()}
    digests = {split: write_dataset(out / f"{split}.jsonl", recs, split, meta) for split, recs in data.items()}
    _write_manifest(out / "manifest.json", cfg, world_digest=world.digest(), datasets=digests,
                    counts={k: len(v) for k, v in data.items()})
    return digests


def cmd_train(cfg: RunConfig) -> Path:
    world = load_world(cfg)
    items = load_split(cfg, "train")
    out = Path(cfg.paths.out_dir) / "train"
    out.mkdir(parents=True, exist_ok=True)
    dsaa = init_dsaa(cfg, world.encoder_config.model_dim)
    pipeline = world.pipeline(dsaa, _flags(cfg), _extraction(cfg, world))
    hashes = {}

    def on_checkpoint(step: int) -> None:
        p = out / f"dsaa_step{step:05d}.ckpt.json"
        hashes[p.name] = _save_dsaa(p, dsaa, cfg, step)

    try:
        history = train(pipeline, world, items, cfg.training, cfg.losses, cfg.seed, out / "train_log.jsonl", on_checkpoint)
    except FloatingPointError:
        p = out / "dsaa_last_good.ckpt.json"
        hashes[p.name] = _save_dsaa(p, dsaa, cfg, -1)
        _write_manifest(out / "manifest.json", cfg, checkpoints=hashes, status="aborted: non-finite loss")
        raise
    final = out / "dsaa.ckpt.json"
    hashes[final.name] = _save_dsaa(final, dsaa, cfg, len(history))
    _write_manifest(out / "manifest.json", cfg, checkpoints=hashes, steps=len(history), status="ok")
    return final


def _pipeline_for(cfg: RunConfig, world: SyntheticWorld, which: str):
    """``which`` is a checkpoint path, ``baseline`` (identity-initialized adapters) or ``plain``."""
    ext = _extraction(cfg, world)
    if which == "plain":
        return world.pipeline(None, None, ext), None
    if which == "baseline":
        return world.pipeline(init_dsaa(cfg, world.encoder_config.model_dim), _flags(cfg), ext), None
    dsaa, digest = load_dsaa(which, world, cfg)
    return world.pipeline(dsaa, _flags(cfg), ext), digest


def _name(which: str) -> str:
    return which if which in ("plain", "baseline", "oracle") else Path(which).name.split(".")[0]


def cmd_eval(cfg: RunConfig, which: str, name: str | None = None) -> EvalReport:
    world = load_world(cfg)
    items = load_split(cfg, "eval")
    name = name or _name(which)
    if which == "oracle":
        scorer, digest = oracle_scorer, None
    else:
        pipeline, digest = _pipeline_for(cfg, world, which)
        scorer = pipeline_scorer(pipeline, world, items)
    report = run_protocol(items, scorer, cfg.eval.iou_threshold, cfg.eval.workers,
                          {"variant": name, "config_digest": cfg.digest()})
    out = Path(cfg.paths.out_dir) / f"eval_{name}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.dumps())
    emit_report(out, eval_reports={name: report},
                manifest={"seed": cfg.seed, "config_digest": cfg.digest(), "checkpoints": {name: digest}})
    return report


def cmd_analyze(cfg: RunConfig, targets: list[str]) -> Path:
    if not targets:
        raise InputError("analyze needs at least one checkpoint (or 'baseline' / 'plain')")
    world = load_world(cfg)
    items = load_split(cfg, "eval")
    suppression, separation, digests = {}, {}, {}
    for spec in targets:
        name, _, which = spec.partition("=") if "=" in spec else (None, "", spec)
        name = name or _name(which)
        pipeline, digests[name] = _pipeline_for(cfg, world, which)
        suppression[name] = suppression_metric(pipeline, PromptGroupSpec())
        separation[name] = separation_stats(pipeline, world, items)
    out = Path(cfg.paths.out_dir) / "analysis"
    emit_report(out, suppression=suppression, separation=separation,
                manifest={"seed": cfg.seed, "config_digest": cfg.digest(), "checkpoints": digests,
                          "representation": "pooled final hidden state"})
    return out


def cmd_extract(cfg: RunConfig, captions_path: str | Path, out_path: str | Path | None = None) -> Path:
    captions_path = Path(captions_path)
    if not captions_path.exists():
        raise InputError(f"captions file {captions_path} not found")
    captions = [line.strip() for line in captions_path.read_text().splitlines() if line.strip()]
    world_dir = _data_dir(cfg) / "world"
    if (world_dir / "world.json").exists():
        world = SyntheticWorld.load(world_dir)
        vocab, ext = world.vocab, _extraction(cfg, world)
    else:
        ext = cfg.extraction
        if not ext.lexicon:
            ext = dataclasses.replace(ext, lexicon=WorldConfig().attributes)
        words = {w.lower() for c in captions for w in split_words(c)} | {w for p in ext.phrases() for w in split_words(p)}
        vocab = Vocabulary.build(sorted(words))
    out_path = Path(out_path) if out_path else Path(cfg.paths.out_dir) / "annotations.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines, fallbacks = [], 0
    for c in captions:
        ex = extract_attributes(ext, c)
        fallbacks += ex.fallback
        spans = match_spans(vocab, tokenize(vocab, c), ex.phrases)
        lines.append(json.dumps({
            "caption": c,
            "phrases": ex.phrases,
            "spans": [{"phrase": s.phrase, "indices": list(s.indices)} for s in spans.spans],
            "fallback": ex.fallback,
        }, sort_keys=True))
    out_path.write_text("".join(line + "\n" for line in lines))
    if fallbacks:
        log.warning("remote extraction unavailable for %d of %d caption(s); lexicon used instead", fallbacks, len(captions))
    return out_path


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; every field is optional")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. training.steps=100")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir")
    common.add_argument("--out-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="dsaa", description="Attribute-aware text adapters on a synthetic fine-grained detection benchmark.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the world and the train/eval splits")
    sub.add_parser("train", parents=[common], help="train the adapters")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the eval split")
    p.add_argument("checkpoint", help="checkpoint path, or 'baseline', 'plain', 'oracle'")
    p.add_argument("--name")
    p = sub.add_parser("analyze", parents=[common], help="suppression and separation analyses")
    p.add_argument("checkpoints", nargs="+", help="[NAME=]PATH, or 'baseline' / 'plain'")
    p = sub.add_parser("extract", parents=[common], help="annotate a caption file with attribute spans")
    p.add_argument("captions")
    p.add_argument("--out")
    p = sub.add_parser("show-config", parents=[common], help="print the resolved config and its digest")
    return ap


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.data_dir:
        overrides.append(f"paths.data_dir={json.dumps(args.data_dir)}")
    if args.out_dir:
        overrides.append(f"paths.out_dir={json.dumps(args.out_dir)}")
    return configmod.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            digests = cmd_gen_data(cfg)
            print(json.dumps(digests, sort_keys=True))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint, args.name)
            print(json.dumps({k: v for k, v in zip([*report.columns, "Average"], report.row())}))
        elif args.command == "analyze":
            print(cmd_analyze(cfg, args.checkpoints))
        elif args.command == "extract":
            print(cmd_extract(cfg, args.captions, args.out))
        elif args.command == "show-config":
            print(cfg.dumps())
            print(cfg.digest())
    except GenerationError as exc:
        print(f"error: generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except FloatingPointError as exc:
        print(f"error: {exc}; last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ContractError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
