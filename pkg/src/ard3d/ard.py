"""Training and inference orchestration for step-wise object generation.

Training packs realized scripts into long mixed sequences (greedy
first-fit), keeps only 1-3 noised generation blocks per sequence (their
loss flags carry the whole objective), selects at most 7 objects per
sequence to carry refinement substeps, and drops conditioning blocks with
probability 0.1 by swapping in null embeddings.

Inference walks a script one instruction at a time. Each coarse step
commits the instruction text, denoises a scene-space latent under dual
guidance (three branches - unconditional, 3D-only, full - run as one
batched cache), decodes it, and commits the re-encoded clean object as
understanding context. Refinement runs against a fork of the cache and
commits nothing, so a run with refinement produces bit-identical coarse
latents to a run without it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ArdModel, KvCache
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .flow import cfg_combine, euler_sample, flow_loss, sample_time
from .grammar import SIZE_RANGES, SceneScript, realize
from .sequence import SeqBuilder, SequenceOverflow, TokenSequence, patchify, unpatchify
from .tensor import Tensor, no_grad, trim_heap
from .textcodec import Vocab
from .vae import LatentVolume, Vae3d
from .voxel import Aabb, EmptyObjectError, OccupancyGrid, bbox, cubeify, embed_object, write_vox1

# guidance branch order everywhere: unconditional, 3D-only, full
BRANCHES = [(True, True), (True, False), (False, False)]


class ArdError(RuntimeError):
    pass


# -- script preparation ------------------------------------------------------


@dataclass
class ScriptLatents:
    """Frozen per-script training material: tokenized instructions and
    clean posterior-mean latents for every step at both scales."""

    script_id: str
    text_ids: list[list[int]]
    fine_text_ids: list[list[int]]
    coarse_x0: list[np.ndarray]   # per step (D,D,D,C) scene-space object latent
    fine_x0: list[np.ndarray]     # per step (D,D,D,C) object-space latent

    @property
    def n_steps(self) -> int:
        return len(self.text_ids)


def refine_text_for(instruction: str) -> str:
    """Refinement phrasing derived from a coarse instruction: the color and
    shape words directly follow the size word."""
    words = instruction.split()
    for i, w in enumerate(words):
        if w in SIZE_RANGES and i + 2 < len(words) + 1 and len(words) >= i + 3:
            return f"refine the {words[i + 1]} {words[i + 2]}"
    raise ArdError(f"cannot derive refinement text from {instruction!r}")


# -- packing and batch plans -------------------------------------------------


def pack_sequences(items: list, max_len: int, length_fn) -> list[list]:
    """Greedy first-fit in the given order: each item joins the first open
    bin with room, else opens a new bin. Items longer than max_len are
    skipped with a warning."""
    bins: list[list] = []
    sizes: list[int] = []
    for item in items:
        n = length_fn(item)
        if n > max_len:
            warnings.warn(f"script of length {n} exceeds budget {max_len}; skipped")
            continue
        for i, used in enumerate(sizes):
            if used + n <= max_len:
                bins[i].append(item)
                sizes[i] += n
                break
        else:
            bins.append([item])
            sizes.append(n)
    return bins


@dataclass
class TrainBatchPlan:
    plan_id: int
    items: list[ScriptLatents]
    refined: set = field(default_factory=set)        # (item_idx, step)
    retained: list = field(default_factory=list)     # (item_idx, step, substep)
    dropped: set = field(default_factory=set)        # (item_idx, step, substep, "text"|"und")
    draws: dict = field(default_factory=dict)        # retained key -> (s, eps volume)


class ArdPipeline:
    """Couples the trunk model with the frozen codec and frozen latent VAE."""

    def __init__(self, model: ArdModel, vae: Vae3d, vocab: Vocab, cfg: Config):
        self.model = model
        self.vae = vae
        self.vocab = vocab
        self.cfg = cfg
        self.D = vae.cfg.D
        self.C = vae.cfg.C_S
        self.gen_p = cfg.model.gen_patch
        self.und_p = cfg.model.und_patch
        if self.D % self.gen_p or self.D % self.und_p:
            raise ArdError("patch sizes must divide the latent resolution")
        # inference-debug switch: re-forward the whole committed context per
        # velocity call instead of using the cache (equivalence checks)
        self.full_reforward = False

    # -- sizes ---------------------------------------------------------------

    def gen_block_len(self) -> int:
        return (self.D // self.gen_p) ** 3 + 2

    def und_block_len(self) -> int:
        return (self.D // self.und_p) ** 3 + 2

    def persistent_len(self, item: ScriptLatents, refined_steps=None) -> int:
        """Sequence cost of a script without any generation blocks."""
        und = self.und_block_len()
        total = 0
        for t in range(item.n_steps):
            total += len(item.text_ids[t]) + 2 + und
            if refined_steps is None or t in refined_steps:
                if self.cfg.model.mode == "ardplus":
                    total += len(item.fine_text_ids[t]) + 2 + und
        return total

    # -- data preparation ----------------------------------------------------

    def prepare_script(self, script: SceneScript) -> ScriptLatents:
        steps = realize(script)
        scene_bits = np.stack([s.scene_grid.bits for s in steps])
        obj_bits = np.stack([s.object_grid.bits for s in steps])
        coarse = self.vae.encode_batch(scene_bits)
        fine = self.vae.encode_batch(obj_bits)
        return ScriptLatents(
            script_id=f"seed{script.seed}",
            text_ids=[self.vocab.encode_text(s.instruction) for s in steps],
            fine_text_ids=[self.vocab.encode_text(refine_text_for(s.instruction))
                           for s in steps],
            coarse_x0=[coarse[t] for t in range(len(steps))],
            fine_x0=[fine[t] for t in range(len(steps))],
        )

    # -- plan construction ---------------------------------------------------

    def make_plan(self, items: list[ScriptLatents], plan_id: int,
                  rng: np.random.Generator) -> TrainBatchPlan:
        """Retention, refinement selection, dropout, and noise draws for one
        packed bin."""
        plan = TrainBatchPlan(plan_id, items)
        mode = self.cfg.model.mode
        tc = self.cfg.train
        objects = [(i, t) for i, it in enumerate(items) for t in range(it.n_steps)]
        if mode == "ardplus":
            chosen = objects
            if len(chosen) > tc.max_refine_objects:
                idx = rng.choice(len(chosen), size=tc.max_refine_objects, replace=False)
                chosen = [chosen[k] for k in sorted(idx)]
            plan.refined = set(chosen)
        base = sum(self.persistent_len(it, {t for j, t in plan.refined if j == i})
                   for i, it in enumerate(items))
        budget = self.cfg.backbone.max_seq - base
        candidates = [(i, t, "coarse") for i, t in objects]
        candidates += [(i, t, "fine") for i, t in sorted(plan.refined)]
        r_max = min(tc.retain_max, len(candidates), budget // self.gen_block_len())
        if r_max < 1:
            raise ArdError(f"plan {plan_id}: no room for a generation block")
        r = int(rng.integers(tc.retain_min, r_max + 1)) if r_max > tc.retain_min \
            else tc.retain_min
        pick = rng.choice(len(candidates), size=r, replace=False)
        plan.retained = [candidates[k] for k in sorted(pick)]
        for i, t, sub in plan.retained:
            s = float(sample_time(1, rng)[0])
            eps = rng.standard_normal((self.D,) * 3 + (self.C,)).astype(np.float32)
            plan.draws[(i, t, sub)] = (s, eps)
        for i, it in enumerate(items):
            for t in range(it.n_steps):
                subs = ["coarse"] + (["fine"] if (i, t) in plan.refined else [])
                for sub in subs:
                    for kind in ("text", "und"):
                        if rng.random() < tc.dropout_p:
                            plan.dropped.add((i, t, sub, kind))
        return plan

    # -- sequence assembly ---------------------------------------------------

    def assemble(self, plan: TrainBatchPlan) -> TokenSequence:
        if not plan.retained:
            raise ArdError("a training sequence needs at least one retained "
                           "generation block")
        b = SeqBuilder(self.vocab)
        retained = set(plan.retained)
        for i, item in enumerate(plan.items):
            b.begin_group()
            for t in range(item.n_steps):
                self._append_substep(b, plan, i, t, "coarse",
                                     item.text_ids[t], item.coarse_x0[t],
                                     (i, t, "coarse") in retained)
                if (i, t) in plan.refined:
                    self._append_substep(b, plan, i, t, "fine",
                                         item.fine_text_ids[t], item.fine_x0[t],
                                         (i, t, "fine") in retained)
        try:
            return b.build(self.cfg.backbone.max_seq)
        except SequenceOverflow as e:
            raise ArdError(f"plan {plan.plan_id} overflows: {e}") from e

    def _append_substep(self, b: SeqBuilder, plan: TrainBatchPlan, i: int, t: int,
                        sub: str, words: list[int], x0: np.ndarray, keep_gen: bool):
        b.text_block(words, step=t, substep=sub, refinement=sub == "fine",
                     dropped=(i, t, sub, "text") in plan.dropped)
        if keep_gen:
            s, eps = plan.draws[(i, t, sub)]
            x0_rows, _ = patchify(x0, self.gen_p)
            eps_rows, _ = patchify(eps, self.gen_p)
            noised = (1.0 - s) * x0_rows + s * eps_rows
            b.gen_block(noised, p=self.gen_p, D=self.D, step=t, substep=sub,
                        time_s=s, target_rows=eps_rows - x0_rows)
        b.und_block(x0, p=self.und_p, step=t, substep=sub,
                    dropped=(i, t, sub, "und") in plan.dropped)

    # -- training ------------------------------------------------------------

    def plan_loss(self, plan: TrainBatchPlan) -> Tensor:
        seq = self.assemble(plan)
        hidden = self.model.forward_seq(seq)
        pred, targets = self.model.velocity_flagged(hidden, seq)
        B, n, w = pred.shape
        return flow_loss(pred.reshape(n, w), np.zeros((n, w), np.float32), targets)

    def train_step(self, plan: TrainBatchPlan, lr: float) -> dict:
        self.model.store.zero_grad()
        loss = self.plan_loss(plan)
        val = loss.item()
        if not np.isfinite(val):
            raise ArdError(f"non-finite loss in plan {plan.plan_id}")
        loss.backward()
        gnorm = self.model.store.adamw_step(lr=lr, grad_clip=self.cfg.train.grad_clip)
        return {"loss": val, "grad_norm": float(gnorm)}

    def train(self, items: list[ScriptLatents], out_dir: str | Path,
              steps: int | None = None, log=None) -> list[dict]:
        """Optimize over packed plans drawn deterministically from the seed.

        Writes checkpoints and a metrics.jsonl under out_dir; returns the
        metric rows."""
        tc = self.cfg.train
        steps = steps if steps is not None else tc.steps
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(tc.seed)
        rows = []
        metrics_path = out / "metrics.jsonl"
        with metrics_path.open("a") as mf:
            for k in range(steps):
                plan = self._draw_plan(items, k, rng)
                m = self.train_step(plan, lr=tc.lr)
                m["step"] = self.model.store.step_count
                rows.append(m)
                if log and (k % tc.log_every == 0 or k == steps - 1):
                    log(f"step {m['step']} loss {m['loss']:.4f} "
                        f"gnorm {m['grad_norm']:.2f}")
                mf.write(json.dumps(m) + "\n")
                if (k + 1) % 10 == 0:
                    trim_heap()  # bounds heap fragmentation over long runs
                if (k + 1) % tc.ckpt_every == 0 or k == steps - 1:
                    self.save(out / "model.ardc")
        return rows

    def _draw_plan(self, items: list[ScriptLatents], plan_id: int,
                   rng: np.random.Generator) -> TrainBatchPlan:
        """Fill one sequence by first-fit over a random draw of scripts."""
        budget = self.cfg.backbone.max_seq - self.gen_block_len()
        chosen: list[ScriptLatents] = []
        used = 0
        order = rng.permutation(len(items))
        for j in order:
            n = self.persistent_len(items[j])
            if n > budget:
                continue
            if used + n <= budget:
                chosen.append(items[j])
                used += n
            if used > budget * 0.7 and chosen:
                break
        if not chosen:
            raise ArdError("no script fits the sequence budget")
        return self.make_plan(chosen, plan_id, rng)

    # -- inference -----------------------------------------------------------

    def new_state(self) -> "SceneState":
        M = self.vae.cfg.M
        return SceneState(M, np.zeros((M,) * 3, bool), [],
                          self.model.new_cache(batch=len(BRANCHES)))

    def _commit(self, state: "SceneState", build_fn):
        b = SeqBuilder(self.vocab)
        build_fn(b)
        seq = b.build()
        with no_grad():
            self.model.forward_seq(seq, state.cache, commit=True, drops=BRANCHES)
        if self.full_reforward:
            state.replay_blocks.append(build_fn)

    def _denoise(self, state: "SceneState", cache: KvCache, step: int, sub: str,
                 sampler, rng: np.random.Generator,
                 replay_extra=None, progress=None) -> np.ndarray:
        """Euler-integrate one generation block against the given cache (or
        a full re-forward when the debug switch is on). Returns the clean
        (D,D,D,C) latent volume. `progress(k, total, rows)` fires once per
        integration step with the current noisy latent rows."""
        eps = rng.standard_normal((self.D,) * 3 + (self.C,)).astype(np.float32)
        eps_rows, _ = patchify(eps, self.gen_p)
        n_lat = len(eps_rows)
        calls = 0

        def v_fn(x_rows, s):
            nonlocal calls
            if progress is not None:
                progress(calls, sampler.steps, x_rows)
            calls += 1
            b = SeqBuilder(self.vocab)
            b.gen_block(x_rows, p=self.gen_p, D=self.D, step=step, substep=sub,
                        time_s=s)
            seq = b.build()
            with no_grad():
                if self.full_reforward:
                    full = SeqBuilder(self.vocab)
                    for fn in state.replay_blocks:
                        fn(full)
                    if replay_extra is not None:
                        replay_extra(full)
                    full.gen_block(x_rows, p=self.gen_p, D=self.D, step=step,
                                   substep=sub, time_s=s)
                    fseq = full.build()
                    h = self.model.forward_seq(fseq, drops=BRANCHES)
                    gen_start = fseq.segments[-1].start
                    v = self.model.velocity_span(h, gen_start + 1, n_lat)
                else:
                    h = self.model.forward_seq(seq, cache, commit=False,
                                               drops=BRANCHES)
                    v = self.model.velocity_span(h, 1, n_lat)
            return cfg_combine(v.data[0], v.data[1], v.data[2],
                               sampler.cfg_text, sampler.cfg_3d)

        x0_rows = euler_sample(v_fn, eps_rows, sampler.steps)
        return unpatchify(x0_rows, self.gen_p, self.D, self.C)

    def generate_next_object(self, state: "SceneState", instruction: str,
                             sampler, progress=None) -> OccupancyGrid:
        """Coarse scene-space generation for one instruction; commits the
        text block and the re-encoded clean object to the cache."""
        words = self.vocab.encode_text(instruction)
        t = state.step_count
        self._commit(state, lambda b: b.text_block(words, step=t))
        grid = None
        for attempt in range(3):
            rng = np.random.default_rng((sampler.seed, t, 0, attempt))
            latent = self._denoise(state, state.cache, t, "coarse", sampler, rng,
                                   progress=progress)
            grid = self.vae.decode(LatentVolume(latent), "scene")
            if grid.count() > 0:
                break
        if grid is None or grid.count() == 0:
            raise EmptyObjectError(f"step {t}: decoded grid empty after 3 attempts")
        clean = self.vae.encode(grid, sample=False)
        self._commit(state, lambda b: b.und_block(clean.values, p=self.und_p, step=t))
        box = cubeify(bbox(grid), state.M)
        state.objects.append(PlacedObject(t, instruction, grid, None, box))
        state.scene_bits |= grid.bits
        return grid

    def refine_object(self, state: "SceneState", coarse: OccupancyGrid,
                      instruction: str, sampler,
                      progress=None) -> tuple[OccupancyGrid, Aabb]:
        """Object-space refinement against a discarded cache fork; the
        committed context is left exactly as it was."""
        if coarse.count() == 0:
            raise EmptyObjectError("refinement requires a nonempty coarse grid")
        t = len(state.objects) - 1
        box = cubeify(bbox(coarse), state.M)
        words = self.vocab.encode_text(instruction)
        fork = state.cache.fork()
        b = SeqBuilder(self.vocab)
        b.text_block(words, step=t, substep="fine", refinement=True)
        with no_grad():
            self.model.forward_seq(b.build(), fork, commit=True, drops=BRANCHES)

        def replay_extra(full: SeqBuilder):
            full.text_block(words, step=t, substep="fine", refinement=True)

        fine = None
        for attempt in range(3):
            rng = np.random.default_rng((sampler.seed, t, 1, attempt))
            latent = self._denoise(state, fork, t, "fine", sampler, rng,
                                   replay_extra=replay_extra, progress=progress)
            fine = self.vae.decode(LatentVolume(latent), "object")
            if fine.count() > 0:
                break
        if fine is None or fine.count() == 0:
            raise EmptyObjectError(f"step {t}: refined grid empty after 3 attempts")
        obj = state.objects[t]
        state.objects[t] = PlacedObject(obj.step, obj.instruction, obj.coarse,
                                        fine, box)
        return fine, box

    def run_script(self, instructions: list[str], sampler, mode: str | None = None,
                   refine_instructions: list[str] | None = None,
                   artifacts_dir: str | Path | None = None) -> "SceneState":
        if not instructions:
            raise ArdError("run_script needs at least one instruction")
        mode = mode or self.cfg.model.mode
        if mode not in ("ard", "ardplus"):
            raise ArdError(f"unknown mode {mode!r}")
        state = self.new_state()
        art = Path(artifacts_dir) if artifacts_dir else None
        for t, instr in enumerate(instructions):
            try:
                coarse = self.generate_next_object(state, instr, sampler)
                fine = None
                if mode == "ardplus":
                    rtext = (refine_instructions[t] if refine_instructions
                             else refine_text_for(instr))
                    fine, _ = self.refine_object(state, coarse, rtext, sampler)
            except (ArdError, EmptyObjectError) as e:
                raise ArdError(f"step {t}: {e}") from e
            if art is not None:
                self._write_step_artifacts(art, t, state.objects[t], instr)
        if art is not None:
            self._write_session(art, instructions, sampler, mode, state)
        return state

    def replay_state(self, objects: list["PlacedObject"]) -> "SceneState":
        """Fresh state whose cache replays exactly the blocks the given
        steps committed (instruction text, then the re-encoded object;
        prefilled objects never had a text block). Generation after the
        replay is bit-identical to generation after the original commits."""
        state = self.new_state()
        for obj in objects:
            t = state.step_count
            if obj.instruction != "<prefill>":
                words = self.vocab.encode_text(obj.instruction)
                self._commit(state, lambda b, w=words: b.text_block(w, step=t))
            clean = self.vae.encode(obj.coarse, sample=False)
            self._commit(state, lambda b, v=clean.values:
                         b.und_block(v, p=self.und_p, step=t))
            state.objects.append(obj)
            state.scene_bits |= obj.coarse.bits
        return state

    def prefill_condition(self, state: "SceneState", grid: OccupancyGrid,
                          transform=None) -> "SceneState":
        """Commit a user-supplied object as understanding context without an
        instruction; generation then conditions on it."""
        bits = grid.bits if transform is None else np.asarray(transform(grid.bits), bool)
        if bits.shape != (state.M,) * 3:
            raise ArdError(f"prefill grid is {bits.shape}, scene needs {(state.M,)*3}")
        if not bits.any():
            raise EmptyObjectError("prefill grid is empty")
        g = OccupancyGrid(bits, "scene")
        t = state.step_count
        clean = self.vae.encode(g, sample=False)
        self._commit(state, lambda b: b.und_block(clean.values, p=self.und_p, step=t))
        state.objects.append(PlacedObject(t, "<prefill>", g, None,
                                          cubeify(bbox(g), state.M)))
        state.scene_bits |= g.bits
        return state

    # -- artifacts -----------------------------------------------------------

    def _write_step_artifacts(self, art: Path, t: int, obj: "PlacedObject",
                              instruction: str):
        d = art / f"step_{t}"
        d.mkdir(parents=True, exist_ok=True)
        write_vox1(d / "coarse.vox1", obj.coarse, step_index=t)
        if obj.fine is not None:
            write_vox1(d / "fine.vox1", obj.fine, step_index=t)
        (d / "placement.json").write_text(json.dumps(
            {"v": 1, "lo": list(map(int, obj.box.lo)),
             "hi": list(map(int, obj.box.hi))}, indent=1))
        (d / "instruction.txt").write_text(instruction + "\n")

    def _write_session(self, art: Path, instructions, sampler, mode, state):
        (art / "session.json").write_text(json.dumps({
            "v": 1, "mode": mode, "seed": sampler.seed, "steps": sampler.steps,
            "cfg_text": sampler.cfg_text, "cfg_3d": sampler.cfg_3d,
            "n_steps": len(instructions),
            "voxels_per_step": [int(o.coarse.count()) for o in state.objects],
        }, indent=1))

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path):
        """Single-file checkpoint: trunk and frozen codec parameters both,
        so inference needs nothing besides the config."""
        meta = {
            "kind": "ard-pipeline",
            "backbone": vars(self.cfg.backbone),
            "model": vars(self.cfg.model),
            "vae": {"M": self.vae.cfg.M, "D": self.D, "C_S": self.C},
            "vocab_words": list(self.vocab.words),
            "step_count": self.model.store.step_count,
            "vae_step_count": self.vae.store.step_count,
        }
        tensors = {**self.model.store.state_tensors(),
                   **self.vae.store.state_tensors()}
        save_checkpoint(path, tensors, meta)

    def load(self, path: str | Path):
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "ard-pipeline":
            raise ArdError(f"checkpoint kind {meta.get('kind')!r} is not a pipeline")
        want = {"M": self.vae.cfg.M, "D": self.D, "C_S": self.C}
        if meta.get("vae") != want:
            raise ArdError(f"checkpoint latent geometry {meta.get('vae')} vs {want}")
        if meta.get("vocab_words") != list(self.vocab.words):
            raise ArdError("checkpoint vocabulary differs")
        self.model.store.load_state_tensors(tensors, meta["step_count"])
        self.vae.store.load_state_tensors(tensors, meta.get("vae_step_count", 0))


# -- scene state -------------------------------------------------------------


@dataclass
class PlacedObject:
    step: int
    instruction: str
    coarse: OccupancyGrid          # scene space, this object alone
    fine: OccupancyGrid | None     # object space
    box: Aabb                      # cubeified placement box


@dataclass
class SceneState:
    M: int
    scene_bits: np.ndarray
    objects: list[PlacedObject]
    cache: KvCache
    replay_blocks: list = field(default_factory=list)

    @property
    def step_count(self) -> int:
        return len(self.objects)

    def scene_grid(self) -> OccupancyGrid:
        return OccupancyGrid(self.scene_bits, "scene")

    def rendered_scene(self, prefer_fine: bool = True) -> OccupancyGrid:
        """Scene view for display: refined objects are embedded into their
        placement boxes, others contribute their coarse grids."""
        out = OccupancyGrid(np.zeros((self.M,) * 3, bool), "scene")
        for obj in self.objects:
            if prefer_fine and obj.fine is not None:
                out = embed_object(out, obj.fine, obj.box)
            else:
                out = OccupancyGrid(out.bits | obj.coarse.bits, "scene")
        return out
