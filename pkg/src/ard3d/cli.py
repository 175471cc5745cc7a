"""Command-line front end.

Subcommands cover the whole artifact chain: datagen writes a scene-script
tree, train-vae fits the latent codec on rasterized grids, train fits the
trunk against a frozen codec, sample runs instructions against a
checkpoint, eval scores held-out scripts, serve exposes the HTTP session
service. Flag values beat config-file values beat built-in defaults, and
every run drops an effective-config snapshot into its output directory.

The `ARD_DATA_DIR` environment variable supplies the dataset root when a
subcommand needs scripts and no tree is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .ard import ArdError, ArdPipeline
from .backbone import ArdModel
from .config import Config, ConfigError, load_config
from .evalkit import EvalError, evaluate_run, format_table, report, report_json, run_from_state
from .grammar import (
    GrammarError,
    instruction_text,
    realize,
    sample_script,
    script_from_json,
    script_to_json,
    grammar_corpus,
)
from .optim import OptimError
from . import tensor as T
from .textcodec import build_vocab
from .vae import Vae3d, train_vae
from .voxel import EmptyObjectError, VoxelError

USAGE_ERRORS = (ArdError, ConfigError, EvalError, GrammarError, OptimError,
                VoxelError, EmptyObjectError, OSError, KeyError, ValueError)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ard3d",
                                description="Stepwise text-to-voxel scene tool")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, *, checkpoint=False, port=False, scenes=None,
            steps=False, mode=False, guidance=False, instructions=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="base seed for this run")
        sp.add_argument("--out", help="output directory")
        if scenes is not None:
            sp.add_argument("--scenes", type=int, default=scenes,
                            help="number of scene scripts (or grids)")
        if steps:
            sp.add_argument("--steps", type=int,
                            help="optimizer or sampler step count")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True,
                            help="checkpoint file this run consumes")
        if mode:
            sp.add_argument("--mode", choices=("ard", "ardplus"),
                            help="coarse-only or coarse+refine")
        if guidance:
            sp.add_argument("--cfg-text", type=float, dest="cfg_text",
                            help="text guidance weight")
            sp.add_argument("--cfg-3d", type=float, dest="cfg_3d",
                            help="scene-context guidance weight")
        if port:
            sp.add_argument("--port", type=int, default=8000)
        if instructions:
            sp.add_argument("instructions", nargs="*",
                            help="step instructions; omitted = sampled script")
        return sp

    add("datagen", "write a deterministic scene-script tree", scenes=100)
    add("train-vae", "fit the latent codec on rasterized grids",
        scenes=2000, steps=True)
    add("train", "fit the trunk against a frozen codec checkpoint",
        checkpoint=True, scenes=500, steps=True, mode=True)
    add("sample", "generate a scene from instructions",
        checkpoint=True, steps=True, mode=True, guidance=True,
        instructions=True)
    add("eval", "score held-out scripts against grammar predicates",
        checkpoint=True, scenes=200, steps=True, mode=True, guidance=True)
    add("serve", "run the HTTP session service",
        checkpoint=True, port=True, steps=True, mode=True, guidance=True)
    return p


def _apply_overrides(cfg: Config, args: argparse.Namespace) -> Config:
    """Flag beats file beats default; seeds route to the subsystem the
    subcommand drives."""
    if getattr(args, "steps", None) is not None:
        if args.command in ("train", "train-vae"):
            cfg.train.steps = args.steps
        else:
            cfg.sampler.steps = args.steps
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.sampler.seed = args.seed
    if getattr(args, "mode", None):
        cfg.model.mode = args.mode
    if getattr(args, "cfg_text", None) is not None:
        cfg.sampler.cfg_text = args.cfg_text
    if getattr(args, "cfg_3d", None) is not None:
        cfg.sampler.cfg_3d = args.cfg_3d
    cfg.validate()
    return cfg


def _out_dir(args, fallback_env=False) -> Path:
    out = args.out or (os.environ.get("ARD_DATA_DIR") if fallback_env else None)
    if not out:
        raise ConfigError(f"{args.command} needs --out"
                          + (" (or ARD_DATA_DIR)" if fallback_env else ""))
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(out: Path, cfg: Config, args: argparse.Namespace):
    # "out" is where this file lives; recording it would make otherwise
    # identical runs produce different trees
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "out") and v is not None}
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()}
    (out / "effective-config.json").write_text(json.dumps(
        {"v": 1, "command": args.command, "config": cfg.to_dict(),
         "flags": flags}, sort_keys=True, indent=1))


def _script_stream(base_seed: int, cfg: Config):
    """Endless deterministic supply of valid scripts; unsatisfiable seeds
    are skipped so the k-th script is stable for a given base seed."""
    cand = base_seed * 100_003 + 1
    while True:
        try:
            yield sample_script(cand, cfg.grammar)
        except GrammarError:
            pass
        cand += 1


def _load_or_sample_scripts(n: int, base_seed: int, cfg: Config):
    """Scripts from the ARD_DATA_DIR tree when present, else sampled."""
    root = os.environ.get("ARD_DATA_DIR")
    if root and (Path(root) / "manifest.json").exists():
        scripts = []
        for d in sorted(Path(root).glob("scene_*"))[:n]:
            scripts.append(script_from_json((d / "script.json").read_text()))
        if scripts:
            return scripts
    stream = _script_stream(base_seed, cfg)
    return [next(stream) for _ in range(n)]


def _build_pipeline(cfg: Config, checkpoint: str | None = None) -> ArdPipeline:
    vocab = build_vocab(grammar_corpus())
    vae = Vae3d(cfg.vae, seed=cfg.train.seed)
    C = cfg.vae.C_S
    model = ArdModel(cfg.backbone, vocab,
                     gen_width=C * cfg.model.gen_patch**3,
                     und_width=C * cfg.model.und_patch**3,
                     seed=cfg.train.seed)
    pipe = ArdPipeline(model, vae, vocab, cfg)
    if checkpoint:
        pipe.load(checkpoint)
    return pipe


# -- subcommands -------------------------------------------------------------


def _cmd_datagen(cfg: Config, args) -> int:
    out = _out_dir(args, fallback_env=True)
    base = args.seed if args.seed is not None else cfg.train.seed
    stream = _script_stream(base, cfg)
    seeds = []
    for i in range(args.scenes):
        script = next(stream)
        d = out / f"scene_{i:05d}"
        d.mkdir(exist_ok=True)
        (d / "script.json").write_text(script_to_json(script) + "\n")
        (d / "instructions.txt").write_text(
            "\n".join(instruction_text(script, t) for t in range(script.N)) + "\n")
        seeds.append(script.seed)
    (out / "manifest.json").write_text(json.dumps(
        {"v": 1, "n_scenes": args.scenes, "base_seed": base,
         "M": cfg.grammar.M, "script_seeds": seeds},
        sort_keys=True, indent=1) + "\n")
    _snapshot(out, cfg, args)
    print(f"wrote {args.scenes} scenes under {out}")
    return 0


def _grids_from_scripts(scripts, limit: int) -> np.ndarray:
    grids = []
    for script in scripts:
        for step in realize(script):
            grids.append(step.scene_grid.bits)
            grids.append(step.object_grid.bits)
            if len(grids) >= limit:
                return np.stack(grids)
    return np.stack(grids)


def _cmd_train_vae(cfg: Config, args) -> int:
    out = _out_dir(args)
    base = args.seed if args.seed is not None else cfg.train.seed
    n_holdout = max(8, args.scenes // 10)
    train_stream = _script_stream(base, cfg)
    hold_stream = _script_stream(base + 7919, cfg)
    train_bits = _grids_from_scripts(
        (next(train_stream) for _ in range(args.scenes)), args.scenes)
    holdout_bits = _grids_from_scripts(
        (next(hold_stream) for _ in range(n_holdout)), n_holdout)
    steps = args.steps if args.steps is not None else cfg.train.steps
    _snapshot(out, cfg, args)
    vae, metrics = train_vae(train_bits, cfg.vae, steps, out / "vae.ardc",
                             holdout_bits=holdout_bits, seed=base, log=print)
    (out / "vae-metrics.json").write_text(json.dumps(metrics, indent=1))
    final = metrics[-1].get("holdout_iou") if metrics else None
    print(f"codec checkpoint at {out / 'vae.ardc'}; holdout iou {final}")
    return 0


def _cmd_train(cfg: Config, args) -> int:
    out = _out_dir(args)
    vae = Vae3d.load(args.checkpoint, cfg.vae)
    vocab = build_vocab(grammar_corpus())
    C = cfg.vae.C_S
    model = ArdModel(cfg.backbone, vocab,
                     gen_width=C * cfg.model.gen_patch**3,
                     und_width=C * cfg.model.und_patch**3,
                     seed=cfg.train.seed)
    pipe = ArdPipeline(model, vae, vocab, cfg)
    base = args.seed if args.seed is not None else cfg.train.seed
    scripts = _load_or_sample_scripts(args.scenes, base, cfg)
    print(f"preparing {len(scripts)} scripts")
    items = [pipe.prepare_script(s) for s in scripts]
    _snapshot(out, cfg, args)
    pipe.train(items, out, steps=args.steps, log=print)
    print(f"trunk checkpoint at {out / 'model.ardc'}")
    return 0


def _cmd_sample(cfg: Config, args) -> int:
    out = _out_dir(args)
    pipe = _build_pipeline(cfg, args.checkpoint)
    if args.instructions:
        instructions = list(args.instructions)
    else:
        script = next(_script_stream(cfg.sampler.seed, cfg))
        instructions = [instruction_text(script, t) for t in range(script.N)]
        print("sampled script:")
        for line in instructions:
            print("  " + line)
    _snapshot(out, cfg, args)
    state = pipe.run_script(instructions, cfg.sampler, artifacts_dir=out)
    for obj in state.objects:
        print(f"step {obj.step}: {obj.coarse.count()} voxels at "
              f"{obj.box.lo}..{obj.box.hi}")
    return 0


def _cmd_eval(cfg: Config, args) -> int:
    out = _out_dir(args)
    pipe = _build_pipeline(cfg, args.checkpoint)
    base = args.seed if args.seed is not None else cfg.sampler.seed
    # a distinct stream offset keeps these scripts disjoint from training
    stream = _script_stream(base + 524_287, cfg)
    entries = []
    _snapshot(out, cfg, args)
    for i in range(args.scenes):
        script = next(stream)
        instructions = [instruction_text(script, t) for t in range(script.N)]
        try:
            state = pipe.run_script(instructions, cfg.sampler)
            run = run_from_state(state)
        except ArdError:
            from .voxel import empty_grid
            run = [empty_grid(cfg.grammar.M) for _ in range(script.N)]
        entries.append(evaluate_run(run, script))
        if (i + 1) % 20 == 0:
            print(f"evaluated {i + 1}/{args.scenes}")
    rep = report(entries)
    (out / "report.json").write_text(report_json(rep) + "\n")
    table = format_table(rep)
    (out / "report.txt").write_text(table)
    print(table, end="")
    return 0


def _cmd_serve(cfg: Config, args) -> int:
    import uvicorn

    from .server import create_app
    pipe = _build_pipeline(cfg, args.checkpoint)
    app = create_app(pipe)
    uvicorn.run(app, host="127.0.0.1", port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "datagen": _cmd_datagen,
    "train-vae": _cmd_train_vae,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    T.retain_large_blocks()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return _COMMANDS[args.command](cfg, args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
