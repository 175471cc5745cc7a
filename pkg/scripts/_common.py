"""Shared plumbing for the experiment runners.

Every runner writes its heavyweight outputs (checkpoints, logs) under
runs/<name>/ and a small JSON summary under artifacts/<name>/ that the
acceptance tests read back.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

import ard3d.tensor as T  # noqa: E402

T.retain_large_blocks()

from ard3d.cli import _script_stream  # noqa: E402
from ard3d.config import Config  # noqa: E402
from ard3d.ard import ArdError, ArdPipeline  # noqa: E402
from ard3d.backbone import ArdModel  # noqa: E402
from ard3d.grammar import grammar_corpus, instruction_text  # noqa: E402
from ard3d.textcodec import build_vocab  # noqa: E402
from ard3d.vae import Vae3d  # noqa: E402
from ard3d import evalkit  # noqa: E402

RUNS = ROOT / "runs"
ARTIFACTS = ROOT / "artifacts"

# disjoint from every training stream base used below
HELDOUT_OFFSET = 524_287


def out_dirs(name: str) -> tuple[Path, Path]:
    run = RUNS / name
    art = ARTIFACTS / name
    run.mkdir(parents=True, exist_ok=True)
    art.mkdir(parents=True, exist_ok=True)
    return run, art


def write_summary(art: Path, payload: dict):
    payload = dict(payload)
    payload.setdefault("v", 1)
    payload["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    (art / "summary.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def scripts_from_stream(n: int, base_seed: int, cfg: Config) -> list:
    stream = _script_stream(base_seed, cfg)
    return [next(stream) for _ in range(n)]


def build_pipeline(cfg: Config, trunk_ckpt: Path | None = None) -> ArdPipeline:
    """Pipeline over the frozen codec from the vae run; optionally restores
    trunk (and codec) weights from a full checkpoint."""
    vae = Vae3d.load(RUNS / "vae" / "vae.ardc", cfg.vae)
    vocab = build_vocab(grammar_corpus())
    C = cfg.vae.C_S
    model = ArdModel(cfg.backbone, vocab,
                     gen_width=C * cfg.model.gen_patch**3,
                     und_width=C * cfg.model.und_patch**3,
                     seed=cfg.train.seed)
    pipe = ArdPipeline(model, vae, vocab, cfg)
    if trunk_ckpt is not None:
        pipe.load(trunk_ckpt)
    return pipe


def _failed_entry(script, err) -> dict:
    """Zero-credit record for a run that died; skipping it instead would
    bias the aggregate upward."""
    return {
        "seed": script.seed,
        "n_steps": script.N,
        "relation_satisfaction": 0.0,
        "scene_iou": 0.0,
        "per_step": [{"step": t, "relation": s.relation, "ok": False}
                     for t, s in enumerate(script.steps) if s.relation is not None],
        "failed": str(err),
    }


def eval_scripts(pipe: ArdPipeline, scripts: list, sampler_steps: int,
                 log, jsonl: Path, mode: str = "ard") -> list[dict]:
    """Metric record per script, appended to `jsonl` as runs finish so an
    interrupted sweep resumes where it stopped."""
    entries = []
    if jsonl.exists():
        entries = [json.loads(ln) for ln in jsonl.read_text().splitlines() if ln.strip()]
        if entries:
            log(f"eval resume: {len(entries)}/{len(scripts)} already done")
    with jsonl.open("a") as f:
        for i in range(len(entries), len(scripts)):
            script = scripts[i]
            sampler = dataclasses.replace(pipe.cfg.sampler,
                                          steps=sampler_steps, seed=script.seed)
            instructions = [instruction_text(script, t) for t in range(script.N)]
            try:
                state = pipe.run_script(instructions, sampler, mode=mode)
                e = evalkit.evaluate_run(evalkit.run_from_state(state), script)
            except ArdError as err:
                log(f"eval {i + 1}/{len(scripts)} failed: {err}")
                e = _failed_entry(script, err)
            entries.append(e)
            f.write(json.dumps(e, sort_keys=True) + "\n")
            f.flush()
            log(f"eval {i + 1}/{len(scripts)}: rel {e['relation_satisfaction']:.3f} "
                f"iou {e['scene_iou']:.3f}")
            T.trim_heap()
    return entries


class Tee:
    """Mirror progress lines into a log file so backgrounded runs can be
    inspected while they are still going. Lines carry the current resident
    size; the long runs live near the sandbox memory cap."""

    def __init__(self, path: Path):
        self.f = path.open("a")

    def __call__(self, msg: str):
        stamp = time.strftime("%H:%M:%S")
        line = f"[{stamp} {_rss_gb():.2f}G] {msg}"
        print(line, flush=True)
        self.f.write(line + "\n")
        self.f.flush()


def _rss_gb() -> float:
    with open("/proc/self/statm") as f:
        return int(f.read().split()[1]) * 4096 / 1e9
