"""Stage orchestration: general training on clip-sampled source/target
pairs, teeth refinement with a frozen deformation field, compensation
training on single images with the base model frozen, and one-shot
fine-tuning of the compensation network alone.

Every stochastic choice is keyed on (seed, step, item), so resuming from a
checkpoint reproduces the uninterrupted run bitwise (in single-threaded
mode) and any step can be replayed in isolation.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import losses
from .checkpointio import CheckpointMeta, read_checkpoint, restore, save_checkpoint
from .diffcore import AdamState, NonFiniteLossError, ParameterGroup, adam_step, backward
from .losses import RoiBox, STAGE_WEIGHTS, stage_total
from .motionmodel import control_signal
from .pipeline import AvatarModel
from .rng import mix_seed
from .synthdata import Dataset, FrameRecord, scene_sampling

STAGE_TRAINABLE: dict[str, tuple[str, ...]] = {
    "general": ("encoder", "w_bar", "generator", "decoder", "deformation", "sr"),
    "refine": ("encoder", "w_bar", "generator", "decoder", "sr"),
    "comp": ("compensation",),
    "finetune": ("compensation",),
}


@dataclass
class StageConfig:
    stage: str
    steps: int
    batch_size: int = 4
    lr: float = 1e-3
    lr_final: float | None = None        # cosine decay target; None = constant
    seed: int = 0
    n_samples: int = 24
    p_self: float = 0.1
    weights: dict[str, float] | None = None       # defaults to the stage weights
    train_clips: list[int] | None = None          # explicit clip subset override
    val_clips_per_identity: int = 1
    log_every: int = 25
    probe_every: int = 100
    checkpoint_every: int = 250
    threads: int = 1

    def resolved_weights(self) -> dict[str, float]:
        return dict(STAGE_WEIGHTS[self.stage]) if self.weights is None else dict(self.weights)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["weights"] = self.resolved_weights()
        return d


# Stage presets sized for a small CPU box; the stage structure itself
# (weights, freezing) is fixed, these only size the runs.
STAGE_PRESETS: dict[str, StageConfig] = {
    "general": StageConfig("general", steps=3500, batch_size=4, lr=1e-3, lr_final=1e-4),
    "refine": StageConfig("refine", steps=400, batch_size=4, lr=3e-4, lr_final=1e-4),
    "comp": StageConfig("comp", steps=1000, batch_size=4, lr=1e-3, lr_final=2e-4),
    "finetune": StageConfig("finetune", steps=200, batch_size=1, lr=1e-3),
}


def stage_preset(stage: str, **overrides) -> StageConfig:
    base = STAGE_PRESETS[stage]
    cfg = StageConfig(**{**base.__dict__, **overrides})
    if cfg.stage != stage:
        raise ValueError(f"preset stage mismatch: {cfg.stage} vs {stage}")
    return cfg


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint: Path | None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class StepSample:
    source: torch.Tensor          # (3, 64, 64)
    target: torch.Tensor          # (3, 64, 64); == source for self-supervised stages
    alpha: torch.Tensor
    beta: torch.Tensor
    pose: object                  # CameraPose of the target frame
    roi: RoiBox
    intr: object = None           # CameraIntrinsics of the dataset
    source_record: FrameRecord | None = None
    target_record: FrameRecord | None = None


def mouth_roi(ds: Dataset, record: FrameRecord) -> RoiBox:
    lm = record.landmarks[ds.specs[record.identity_index].mouth_index]
    return RoiBox.from_landmark(float(lm[0]), float(lm[1]),
                                ds.intrinsics.width, ds.intrinsics.height)


def sample_pair(ds: Dataset, gen: torch.Generator, clip_ids: list[int] | None = None,
                p_self: float = 0.1) -> StepSample:
    """Draw (source, target) from one clip; identity coefficients are shared
    within a clip by construction. With probability p_self the pair is the
    same frame (otherwise the target is a different frame of the clip).
    """
    clip_ids = clip_ids if clip_ids is not None else sorted(ds.clips)
    if not clip_ids:
        raise ValueError("dataset has no clips to sample from")
    clip = clip_ids[int(torch.randint(len(clip_ids), (1,), generator=gen))]
    frame_idxs = ds.clips[clip]
    if len(frame_idxs) < 2:
        raise ValueError(f"clip {clip} has fewer than 2 frames")
    si = int(torch.randint(len(frame_idxs), (1,), generator=gen))
    if float(torch.rand(1, generator=gen)) < p_self:
        ti = si
    else:
        ti = int(torch.randint(len(frame_idxs) - 1, (1,), generator=gen))
        if ti >= si:
            ti += 1
    src = ds.frames[frame_idxs[si]]
    tgt = ds.frames[frame_idxs[ti]]
    return StepSample(ds.load_image(src), ds.load_image(tgt), src.alpha, tgt.beta,
                      tgt.pose, mouth_roi(ds, tgt), ds.intrinsics, src, tgt)


def sample_single(ds: Dataset, gen: torch.Generator,
                  clip_ids: list[int] | None = None) -> StepSample:
    """One frame reconstructing itself (compensation-stage sampling)."""
    clip_ids = clip_ids if clip_ids is not None else sorted(ds.clips)
    clip = clip_ids[int(torch.randint(len(clip_ids), (1,), generator=gen))]
    frame_idxs = ds.clips[clip]
    fi = int(torch.randint(len(frame_idxs), (1,), generator=gen))
    rec = ds.frames[frame_idxs[fi]]
    img = ds.load_image(rec)
    return StepSample(img, img, rec.alpha, rec.beta, rec.pose,
                      mouth_roi(ds, rec), ds.intrinsics, rec, rec)


def self_sample(ds: Dataset, record: FrameRecord) -> StepSample:
    img = ds.load_image(record)
    return StepSample(img, img, record.alpha, record.beta, record.pose,
                      mouth_roi(ds, record), ds.intrinsics, record, record)


def step_loss_terms(model: AvatarModel, item: StepSample, stage: str,
                    n_samples: int, jitter_seed: int,
                    jitter: bool = True) -> dict[str, torch.Tensor]:
    """Forward one sample through the stage's render path and loss terms."""
    use_comp = stage in ("comp", "finetune")
    cfg = scene_sampling(item.pose, n_samples, jitter=jitter, seed=jitter_seed)
    signal = control_signal(item.alpha, item.beta).to(torch.float32)
    result = model.reenact(item.source, signal, item.intr, item.pose, cfg,
                           use_compensation=use_comp)
    terms: dict[str, torch.Tensor] = {
        "rec": losses.l_rec(item.target, result.rgb),
        "id": losses.l_id(item.target, result.rgb, model.embedder),
    }
    if stage in ("general", "finetune"):
        terms["mouth"] = losses.l_mouth(item.target, result.rgb, item.roi)
    if stage == "refine":
        terms["teeth"] = losses.l_teeth(result.rgb, item.roi)
    if stage in ("general", "refine"):
        terms["latent"] = losses.l_latent(result.latent_offset)
    if use_comp:
        terms["depth"] = losses.l_depth(result.v_canonical, result.v_compensation)
    return terms


def group_hashes(groups: dict[str, ParameterGroup]) -> dict[str, str]:
    """SHA-256 over the raw float32 bytes of each group, for freeze audits."""
    out = {}
    for name, g in sorted(groups.items()):
        h = hashlib.sha256()
        for leaf in sorted(g.tensors):
            h.update(g.tensors[leaf].detach().cpu().contiguous().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


def apply_stage_freezing(groups: dict[str, ParameterGroup], stage: str) -> None:
    trainable = set(STAGE_TRAINABLE[stage])
    for name, g in groups.items():
        g.set_trainable(name in trainable and name != "embedder")


class StageRunner:
    """Runs one training stage, owning the log, the optimizer state, and
    periodic last-good checkpoints.
    """

    def __init__(self, model: AvatarModel, dataset: Dataset | None, cfg: StageConfig,
                 out_dir: str | Path, quiet: bool = False,
                 fixed_sample: StepSample | None = None):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.quiet = quiet
        self.fixed_sample = fixed_sample
        self.groups = model.parameter_groups()
        apply_stage_freezing(self.groups, cfg.stage)
        self.state = AdamState(list(self.groups.values()), lr=cfg.lr)
        self.start_step = 0
        self.log_path = self.out_dir / "log.jsonl"
        self._log_lines: list[str] = []

        if cfg.train_clips is not None:
            self.train_clips = list(cfg.train_clips)
        elif dataset is not None:
            self.train_clips, _ = dataset.train_val_clips(cfg.val_clips_per_identity)
        else:
            self.train_clips = []

    def _log(self, record: dict) -> None:
        self._log_lines.append(json.dumps(record, sort_keys=True))

    def _flush_log(self) -> None:
        with open(self.log_path, "a") as f:
            for line in self._log_lines:
                f.write(line + "\n")
        self._log_lines.clear()

    def resume(self, checkpoint_path: str | Path) -> None:
        meta, tensors = read_checkpoint(checkpoint_path)
        if meta.stage != self.cfg.stage:
            raise ValueError(f"checkpoint is for stage {meta.stage!r}, "
                             f"runner is {self.cfg.stage!r}")
        restore(self.groups, self.state, meta, tensors)
        self.start_step = meta.step

    def load_base(self, checkpoint_path: str | Path) -> None:
        """Load parameters from an earlier stage; optimizer state starts fresh."""
        meta, tensors = read_checkpoint(checkpoint_path)
        restore(self.groups, None, meta, tensors)

    def _batch(self, step: int) -> list[StepSample]:
        if self.fixed_sample is not None:
            items = [self.fixed_sample] * self.cfg.batch_size
        else:
            gen = torch.Generator().manual_seed(mix_seed(self.cfg.seed, "sample", step))
            if self.cfg.stage in ("general", "refine"):
                items = [sample_pair(self.dataset, gen, self.train_clips, self.cfg.p_self)
                         for _ in range(self.cfg.batch_size)]
            else:
                items = [sample_single(self.dataset, gen, self.train_clips)
                         for _ in range(self.cfg.batch_size)]
        return items

    def _compute_loss(self, items: list[StepSample], step: int, jitter: bool = True
                      ) -> tuple[torch.Tensor, dict[str, float]]:
        weights = self.cfg.resolved_weights()
        acc: dict[str, torch.Tensor] = {}
        for k, item in enumerate(items):
            terms = step_loss_terms(self.model, item, self.cfg.stage, self.cfg.n_samples,
                                    jitter_seed=mix_seed(self.cfg.seed, "jitter", step, k),
                                    jitter=jitter)
            for name, value in terms.items():
                acc[name] = acc.get(name, 0.0) + value / len(items)
        total = stage_total(self.cfg.stage, acc, weights)
        scalars = {name: float(v.detach()) for name, v in acc.items()}
        scalars["total"] = float(total.detach())
        return total, scalars

    def _lr_at(self, step: int) -> float:
        cfg = self.cfg
        if cfg.lr_final is None:
            return cfg.lr
        frac = min(step / max(cfg.steps - 1, 1), 1.0)
        return cfg.lr_final + (cfg.lr - cfg.lr_final) * 0.5 * (1 + math.cos(math.pi * frac))

    def _save(self, path: Path, step: int) -> Path:
        meta = CheckpointMeta(stage=self.cfg.stage, step=step, seed=self.cfg.seed,
                              adam_t=self.state.t, lr=self.state.lr,
                              beta1=self.state.beta1, beta2=self.state.beta2,
                              eps=self.state.eps,
                              model_config=self.model.config.to_dict())
        save_checkpoint(path, self.groups, self.state, meta)
        return path

    def run(self) -> Path:
        cfg = self.cfg
        torch.set_num_threads(max(cfg.threads, 1))
        gen_probe = torch.Generator().manual_seed(mix_seed(cfg.seed, "probe"))
        probe_items = None
        if self.dataset is not None and cfg.stage in ("general", "refine"):
            probe_items = [sample_pair(self.dataset, gen_probe, self.train_clips, 0.0)
                           for _ in range(4)]

        self._log({"event": "start", "stage": cfg.stage, "weights": cfg.resolved_weights(),
                   "config": cfg.to_dict(), "start_step": self.start_step})
        if not self.quiet:
            print(f"[{cfg.stage}] weights={cfg.resolved_weights()} steps={cfg.steps} "
                  f"lr={cfg.lr} batch={cfg.batch_size}")
        last_good: Path | None = None
        t0 = time.time()
        for step in range(self.start_step, cfg.steps):
            self.state.lr = self._lr_at(step)
            items = self._batch(step)
            self.model.zero_grad(set_to_none=True)
            try:
                total, scalars = self._compute_loss(items, step)
                backward(total, list(self.groups.values()))
                adam_step(list(self.groups.values()), self.state)
            except NonFiniteLossError as exc:
                self._log({"event": "abort", "step": step, "error": str(exc)})
                self._flush_log()
                raise TrainingAborted(f"non-finite loss at step {step}: {exc}",
                                      step, last_good) from exc
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                self._log({"step": step, **scalars})
                if not self.quiet:
                    rate = (step - self.start_step + 1) / max(time.time() - t0, 1e-9)
                    print(f"[{cfg.stage}] step {step} total={scalars['total']:.4f} "
                          f"({rate:.2f} it/s)")
            if probe_items is not None and step % cfg.probe_every == 0:
                with torch.no_grad():
                    _, probe_scalars = self._compute_loss(probe_items, step, jitter=False)
                self._log({"event": "probe", "step": step, **probe_scalars})
            if (step + 1) % cfg.checkpoint_every == 0:
                last_good = self._save(self.out_dir / "last_good.nofa", step + 1)
            self._flush_log()
        final = self._save(self.out_dir / "checkpoint.nofa", cfg.steps)
        self._log({"event": "done", "step": cfg.steps, "seconds": time.time() - t0})
        self._flush_log()
        try:
            from .plotting import save_loss_curves
            save_loss_curves(self.log_path, self.out_dir / "loss_curves.png")
        except Exception as exc:  # figures are best-effort side outputs
            self._log({"event": "plot-error", "error": str(exc)})
            self._flush_log()
        return final


def train_general(model: AvatarModel, dataset: Dataset, cfg: StageConfig | None,
                  out_dir: str | Path, resume_from: str | Path | None = None,
                  quiet: bool = False) -> Path:
    cfg = cfg or stage_preset("general")
    runner = StageRunner(model, dataset, cfg, out_dir, quiet=quiet)
    if resume_from is not None:
        runner.resume(resume_from)
    return runner.run()


def train_teeth(model: AvatarModel, dataset: Dataset, cfg: StageConfig | None,
                out_dir: str | Path, base_checkpoint: str | Path,
                quiet: bool = False) -> Path:
    cfg = cfg or stage_preset("refine")
    runner = StageRunner(model, dataset, cfg, out_dir, quiet=quiet)
    runner.load_base(base_checkpoint)
    return runner.run()


def train_compensation(model: AvatarModel, dataset: Dataset, cfg: StageConfig | None,
                       out_dir: str | Path, base_checkpoint: str | Path,
                       quiet: bool = False) -> Path:
    cfg = cfg or stage_preset("comp")
    runner = StageRunner(model, dataset, cfg, out_dir, quiet=quiet)
    runner.load_base(base_checkpoint)
    return runner.run()


def finetune_oneshot(model: AvatarModel, dataset: Dataset, record: FrameRecord,
                     cfg: StageConfig | None, out_dir: str | Path,
                     base_checkpoint: str | Path | None = None,
                     quiet: bool = False) -> Path:
    """Brief optimization of only the compensation network on one source image."""
    cfg = cfg or stage_preset("finetune")
    sample = self_sample(dataset, record)
    runner = StageRunner(model, dataset, cfg, out_dir, quiet=quiet, fixed_sample=sample)
    if base_checkpoint is not None:
        runner.load_base(base_checkpoint)
    return runner.run()


def find_frame(ds: Dataset, image_path: str | Path) -> FrameRecord:
    """Resolve a frame record from an on-disk image path."""
    target = Path(image_path)
    for record in ds.frames:
        if (ds.root / record.image_path).resolve() == target.resolve() \
                or record.image_path == str(image_path):
            return record
    raise ValueError(f"{image_path} is not a frame of the dataset at {ds.root}")
