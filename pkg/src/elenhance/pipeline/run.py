"""Stage sequencing with a content-addressed checkpoint store.

Every stage writes into ``root/<stage>/<key>/`` where ``key`` hashes the
stage's config section together with the keys of its upstream stages. A
``stage.json`` record lists the artifact digests; a later run that finds the
record and intact artifacts skips the stage. Artifacts edited in place raise
StaleArtifact. Missing artifacts trigger a rerun of the stage and of
everything downstream of it.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .. import checkpoint
from ..alignment import AlignmentConfig, AlignmentModel, FeatureBank, StageRecipe, finetune_schedule, pretrain
from ..corpus import CorpusConfig, build_corpus, corpus_roles, load_manifest
from ..errors import ConfigError, StageFailure, StaleArtifact
from ..features import FeatureStore
from ..recognition.model import Recognizer, RecognizerConfig
from ..recognition.train import RecognitionRecipe, train_stage
from ..synthesis import DiffusionConfig, DiffusionDecoder, SynthesisRecipe, adapt_fewshot, pretrain_multispeaker
from ..synthesis.speaker import save_embedding
from ..synthesis.train import speaker_embeddings
from ..units import UnitCodebook, fit_unit_extractor
from .config import SYSTEMS, load_config
from .lineage import SystemLineage

logger = logging.getLogger(__name__)

ROOT_ENV = "ELENHANCE_CKPT_ROOT"
RECORD = "stage.json"


def default_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "checkpoints"))


@dataclass
class Stage:
    name: str
    deps: list
    section: dict
    artifacts: list
    build: object  # callable(ctx, out_dir)


@dataclass
class StageStatus:
    name: str
    key: str
    path: Path
    ran: bool
    seconds: float = 0.0


@dataclass
class ExperimentResult:
    root: Path
    config: dict
    stages: dict = field(default_factory=dict)  # name -> StageStatus
    lineages: dict = field(default_factory=dict)  # system id -> SystemLineage

    @property
    def ran(self) -> list:
        return [n for n, s in self.stages.items() if s.ran]

    def path(self, stage: str) -> Path:
        return self.stages[stage].path


class _Context:
    """Lazy access to upstream artifacts while stages run."""

    def __init__(self, cfg: dict, result: ExperimentResult):
        self.cfg = cfg
        self.result = result
        self._manifest = None
        self._store = None

    @property
    def manifest(self):
        if self._manifest is None:
            self._manifest = load_manifest(self.result.path("corpus") / "manifest.jsonl")
        return self._manifest

    @property
    def store(self) -> FeatureStore:
        if self._store is None:
            self._store = FeatureStore(self.manifest)
        return self._store

    @property
    def roles(self) -> dict:
        return corpus_roles(corpus_config(self.cfg))

    def bank(self, with_recognizer: bool = False, with_units: bool = False) -> FeatureBank:
        rec = Recognizer.load(self.result.path("recognition") / "stage3.ckpt") if with_recognizer else None
        units = UnitCodebook.load(self.result.path("units") / "codebook.npz") if with_units else None
        return FeatureBank(self.store, rec, units)


def corpus_config(cfg: dict) -> CorpusConfig:
    return CorpusConfig.from_dict({"seed": cfg["seed"], **cfg["corpus"]})


# ---------------------------------------------------------------- stage bodies


def _build_corpus(ctx: _Context, out: Path) -> None:
    build_corpus(corpus_config(ctx.cfg), out)


def recognition_recipes(cfg: dict, roles: dict) -> list:
    """The three recognizer stages: typical pretraining, intermediate, target EL."""
    rc = cfg["recognition"]
    seed = cfg["seed"]
    return [
        RecognitionRecipe(
            "stage1",
            {"speech_type": "TYPICAL", "split": "train"},
            dev={"group": "main", "speech_type": "TYPICAL", "split": "dev"},
            seed=seed,
            **rc["stage1"],
        ),
        RecognitionRecipe("stage2", {"group": "synel", "split": "train"}, seed=seed, **rc["stage2"]),
        RecognitionRecipe("stage3", {"group": "main", "speakers": [roles["el"]], "split": "train"}, seed=seed, **rc["stage3"]),
    ]


def _build_recognition(ctx: _Context, out: Path) -> None:
    torch.manual_seed(ctx.cfg["seed"])
    model = Recognizer(RecognizerConfig(**ctx.cfg["recognition"]["model"]))
    for r in recognition_recipes(ctx.cfg, ctx.roles):
        model = train_stage(model, r, ctx.store).model
        model.save(out / f"{r.name}.ckpt", meta={"recipe": r.name})


def _build_units(ctx: _Context, out: Path) -> None:
    uc = ctx.cfg["units"]
    cb = fit_unit_extractor(
        ctx.manifest.select(speech_type="TYPICAL", split="train"), k=uc["k"], seed=ctx.cfg["seed"], tau=uc["tau"], max_frames=uc["max_frames"]
    )
    cb.save(out / "codebook.npz")


def _build_synthesis(ctx: _Context, out: Path) -> None:
    sc = ctx.cfg["synthesis"]
    seed = ctx.cfg["seed"]
    bank = ctx.bank(with_units=True)
    torch.manual_seed(seed)
    dec = DiffusionDecoder(DiffusionConfig(**{"guidance": sc["guidance"], "unit_dim": ctx.cfg["units"]["k"], **sc["model"]}))
    dec = pretrain_multispeaker(dec, SynthesisRecipe("pretrain", {"group": "pool", "split": "train"}, seed=seed, **sc["pretrain"]), bank)
    dec.save(out / "diffusion_pretrain.ckpt", meta=dec.meta)
    target = {"group": "main", "speakers": [ctx.roles["target"]], "split": "train"}
    emb = speaker_embeddings(bank, ctx.manifest.select(**target).entries, dec.config.spk_dim)[ctx.roles["target"]]
    dec = adapt_fewshot(dec, SynthesisRecipe("adapt", target, seed=seed, **sc["adapt"]), bank, embedding=emb)
    dec.save(out / "diffusion.ckpt", meta=dec.meta)
    save_embedding(emb, out / "target_embedding.npy")


def _alignment_builder(system: str):
    in_type, out_type, mode = SYSTEMS[system]

    def build(ctx: _Context, out: Path) -> None:
        ac = ctx.cfg["alignment"]
        seed = ctx.cfg["seed"] if ac["seed"] is None else ac["seed"]
        bank = ctx.bank(with_recognizer=in_type == "bnf", with_units=out_type == "units")
        roles = ctx.roles
        bnf_dim = ctx.cfg["recognition"]["model"].get("bnf_dim", 64)
        config = AlignmentConfig.for_types(in_type, out_type, bnf_dim=bnf_dim, n_units=ctx.cfg["units"]["k"], **ac["model"])
        torch.manual_seed(seed)
        model = AlignmentModel(config)
        vc_target = roles["vc_target"]
        pre = {**ac["pretrain"], "seed": seed}
        if mode == "parallel_vc":
            sources = [s for s in roles["pool"] if s != vc_target]
            model = pretrain(
                model,
                StageRecipe(
                    "PRETRAIN_PARALLEL_VC",
                    {"group": "pool", "speakers": sources, "split": "train"},
                    pair_with=f"speaker:{vc_target}",
                    dev={"group": "pool", "speakers": sources[:1], "split": "dev"},
                    **pre,
                ),
                bank,
            )
        else:
            data = {"group": "pool", "speakers": [vc_target], "split": "train"}
            dev = {"group": "pool", "speakers": [vc_target], "split": "dev"}
            model = pretrain(model, StageRecipe("PRETRAIN_TTS", data, dev=dev, **pre), bank)
            model = pretrain(model, StageRecipe("PRETRAIN_AE", data, dev=dev, **pre), bank)
        fts = [
            StageRecipe(
                "FT_SYNTHETIC_EL",
                {"group": "synel", "speech_type": "EL", "split": "train"},
                dev={"group": "synel", "speech_type": "EL", "split": "dev"},
                seed=seed,
                **ac["ft_synthetic"],
            ),
            StageRecipe(
                "FT_TARGET_EL",
                {"group": "main", "speakers": [roles["el"]], "split": "train"},
                dev={"group": "main", "speakers": [roles["el"]], "split": "dev"},
                seed=seed,
                **ac["ft_target"],
            ),
        ]
        model, _ = finetune_schedule(model, fts, bank)
        model.save(out / "aligner.ckpt", meta={**model.meta, "system": system, "pretraining": mode})

    return build


def plan(cfg: dict) -> list:
    """Stages in execution order for the systems named in ``cfg``."""
    systems = cfg["systems"]
    need_units = any(SYSTEMS[s][1] == "units" for s in systems)
    corpus_section = {"seed": cfg["seed"], **cfg["corpus"]}
    stages = [Stage("corpus", [], corpus_section, ["manifest.jsonl"], _build_corpus)]
    # the recognizer also scores every system, so it is always trained
    stages.append(Stage("recognition", ["corpus"], {"seed": cfg["seed"], **cfg["recognition"]}, ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt"], _build_recognition))
    if need_units:
        stages.append(Stage("units", ["corpus"], {"seed": cfg["seed"], **cfg["units"]}, ["codebook.npz"], _build_units))
        stages.append(
            Stage("synthesis", ["corpus", "units"], {"seed": cfg["seed"], **cfg["synthesis"]}, ["diffusion_pretrain.ckpt", "diffusion.ckpt", "target_embedding.npy"], _build_synthesis)
        )
    for s in systems:
        in_type, out_type, mode = SYSTEMS[s]
        deps = ["corpus"] + (["recognition"] if in_type == "bnf" else []) + (["units"] if out_type == "units" else [])
        # only the settings this system actually reads, so unrelated edits keep it cached
        section = {"system": s, "seed": cfg["seed"], "alignment": cfg["alignment"]}
        if out_type == "units":
            section["units_k"] = cfg["units"]["k"]
        if in_type == "bnf":
            section["bnf_dim"] = cfg["recognition"]["model"].get("bnf_dim", 64)
        stages.append(Stage(f"alignment-{s}", deps, section, ["aligner.ckpt"], _alignment_builder(s)))
    return stages


# ---------------------------------------------------------------- records


def _read_record(path: Path):
    try:
        return json.loads((path / RECORD).read_text())
    except (OSError, ValueError):
        return None


def _artifact_digests(path: Path, artifacts) -> dict:
    return {a: checkpoint.file_digest(path / a) for a in artifacts}


def _check_cached(stage: Stage, path: Path, dep_digests: dict):
    """True when the stage can be skipped; raises StaleArtifact on tampering."""
    record = _read_record(path)
    if record is None:
        return False
    if any(not (path / a).exists() for a in stage.artifacts):
        return False
    current = _artifact_digests(path, stage.artifacts)
    changed = [a for a in stage.artifacts if record["artifacts"].get(a) != current[a]]
    if changed:
        raise StaleArtifact(f"stage {stage.name}: {changed} changed since it was recorded in {path}")
    return record.get("deps") == dep_digests


def _closure(stages: list, targets) -> list:
    by_name = {s.name: s for s in stages}
    unknown = set(targets) - set(by_name)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}; known: {list(by_name)}")
    need, todo = set(), list(targets)
    while todo:
        name = todo.pop()
        if name not in need:
            need.add(name)
            todo.extend(by_name[name].deps)
    return [s for s in stages if s.name in need]


def run_experiment(config=None, root=None, force=(), targets=None) -> ExperimentResult:
    """Build every stage the config needs, reusing intact cached stages.

    ``force`` names stages to rebuild regardless of the cache. ``targets``
    restricts the run to those stages and their ancestors; lineages are only
    produced for systems whose alignment stage ran or was cached.
    """
    cfg = load_config(config)
    root = Path(root) if root is not None else default_root()
    result = ExperimentResult(root, cfg)
    ctx = _Context(cfg, result)
    keys: dict = {}
    digests: dict = {}
    rebuilt: set = set()
    stages = plan(cfg)
    if targets is not None:
        stages = _closure(stages, targets)
    for stage in stages:
        key = checkpoint.config_hash({"stage": stage.name, "section": stage.section, "deps": {d: keys[d] for d in stage.deps}})
        keys[stage.name] = key
        path = root / stage.name / key
        dep_digests = {d: digests[d] for d in stage.deps}
        upstream_rebuilt = any(d in rebuilt for d in stage.deps)
        cached = not upstream_rebuilt and stage.name not in force and _check_cached(stage, path, dep_digests)
        seconds = 0.0
        if not cached:
            logger.info("running stage %s -> %s", stage.name, path)
            if path.exists():
                shutil.rmtree(path)
            path.mkdir(parents=True)
            t0 = time.perf_counter()
            try:
                stage.build(ctx, path)
            except ConfigError:
                raise
            except Exception as exc:  # noqa: BLE001 - rewrapped with the stage name
                raise StageFailure(stage.name, exc) from exc
            seconds = time.perf_counter() - t0
            record = {
                "stage": stage.name,
                "key": key,
                "section": stage.section,
                "deps": dep_digests,
                "artifacts": _artifact_digests(path, stage.artifacts),
                "seconds": seconds,
            }
            (path / RECORD).write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
            rebuilt.add(stage.name)
            if stage.name == "corpus":
                ctx._manifest = ctx._store = None
        else:
            logger.info("stage %s cached at %s", stage.name, path)
        digests[stage.name] = _read_record(path)["artifacts"]
        result.stages[stage.name] = StageStatus(stage.name, key, path, not cached, seconds)

    for s in cfg["systems"]:
        if f"alignment-{s}" not in result.stages:
            continue
        lineage = make_lineage(result, s)
        lineage.save(result.path(f"alignment-{s}") / "lineage.json")
        result.lineages[s] = lineage
    return result


def make_lineage(result: ExperimentResult, system: str) -> SystemLineage:
    in_type, out_type, mode = SYSTEMS[system]
    cfg = result.config
    rec = result.path("recognition") / "stage3.ckpt" if in_type == "bnf" else None
    units = result.path("units") / "codebook.npz" if out_type == "units" else None
    synth = result.path("synthesis") / "diffusion.ckpt" if out_type == "units" else None
    emb = result.path("synthesis") / "target_embedding.npy" if out_type == "units" else None
    lineage = SystemLineage(
        system_id=system,
        in_type=in_type,
        out_type=out_type,
        pretraining=mode,
        recognition=str(rec) if rec else None,
        units=str(units) if units else None,
        alignment=str(result.path(f"alignment-{system}") / "aligner.ckpt"),
        synthesis=str(synth) if synth else None,
        embedding=str(emb) if emb else None,
        vocoder=dict(cfg["vocoder"]),
        guidance=float(cfg["synthesis"]["guidance"]),
        scorer=str(result.path("recognition") / "stage1.ckpt") if "recognition" in result.stages else None,
        config_hash=checkpoint.config_hash(cfg),
    )
    lineage.seal()
    return lineage


__all__ = [
    "ExperimentResult",
    "ROOT_ENV",
    "Stage",
    "StageStatus",
    "corpus_config",
    "default_root",
    "make_lineage",
    "plan",
    "run_experiment",
]
