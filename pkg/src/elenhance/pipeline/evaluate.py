"""Convert the EL test split with each trained system and score it."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..corpus import Manifest, corpus_roles, load_manifest
from ..evaluation.system import EvalReport, EvalRow, evaluate_outputs
from ..recognition.model import Recognizer
from .config import load_config
from .convert import Converter
from .lineage import SystemLineage
from .run import ExperimentResult, corpus_config, run_experiment

logger = logging.getLogger(__name__)

PRETRAIN_LABEL = {"tts_ae": "TTS/AE", "parallel_vc": "Parallel VC"}
TYPE_LABEL = {"mel": "mel", "bnf": "BNF", "units": "units"}


def el_test_entries(manifest: Manifest, el_speaker: str, split: str = "test", limit: int | None = None):
    entries = manifest.select(group="main", speakers=[el_speaker], split=split).entries
    return entries[:limit] if limit else entries


def evaluate_system(
    lineage: SystemLineage, manifest: Manifest, scorer: Recognizer, out_dir, entries, seed: int = 0
) -> EvalRow:
    """Write ``out_dir/<id>.wav`` for each entry and score the set; duration ratios go to ``extra``."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    conv = Converter(lineage)
    outputs, metas = {}, []
    for e in entries:
        path = out_dir / f"{e.utterance_id}.wav"
        metas.append(conv.convert_file(manifest.audio_path(e), path, seed=seed))
        outputs[e.utterance_id] = path
    row = evaluate_outputs(
        outputs,
        manifest,
        scorer,
        system_id=lineage.system_id,
        inputs=TYPE_LABEL[lineage.in_type],
        outputs_type=TYPE_LABEL[lineage.out_type],
        pretraining=PRETRAIN_LABEL.get(lineage.pretraining, lineage.pretraining),
    )
    ratios = [m["duration_ratio"] for m in metas]
    row.extra.update(
        duration_ratio_mean=float(np.mean(ratios)),
        truncated=int(sum(m["truncated"] for m in metas)),
        seconds_per_utterance=float(np.mean([sum(m["stage_seconds"].values()) for m in metas])),
        eval_seconds=time.perf_counter() - t0,
    )
    (out_dir / "conversion_meta.json").write_text(json.dumps(metas, indent=2))
    return row


def evaluate_experiment(result: ExperimentResult, systems=None) -> EvalReport:
    cfg = result.config
    ev = cfg["evaluation"]
    manifest = load_manifest(result.path("corpus") / "manifest.jsonl")
    scorer = Recognizer.load(result.path("recognition") / "stage1.ckpt")
    entries = el_test_entries(manifest, corpus_roles(corpus_config(cfg))["el"], ev["split"], ev["max_utterances"])
    report = EvalReport()
    for s in systems or cfg["systems"]:
        lineage = result.lineages[s]
        out_dir = result.path(f"alignment-{s}") / f"eval-{ev['split']}-seed{ev['seed']}"
        stamp = {"digests": lineage.digests, "entries": [e.utterance_id for e in entries], "seed": ev["seed"]}
        cached = out_dir / "row.json"
        if cached.exists() and json.loads(cached.read_text()).get("stamp") == stamp:
            row = EvalRow(**json.loads(cached.read_text())["row"])
        else:
            row = evaluate_system(lineage, manifest, scorer, out_dir, entries, seed=ev["seed"])
            cached.write_text(json.dumps({"stamp": stamp, "row": asdict(row)}, indent=2))
        logger.info("system %s: %s", s, row)
        report.add(row)
    return report


def run_and_evaluate(config=None, root=None) -> tuple[ExperimentResult, EvalReport]:
    cfg = load_config(config)
    result = run_experiment(cfg, root)
    return result, evaluate_experiment(result)
