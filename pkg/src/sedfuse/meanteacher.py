"""Mean-teacher semi-supervised training.

A student CRNN is trained by Adam on a composite loss: clip-level binary
cross entropy on the weakly labeled half of each batch, plus clip- and
frame-level mean-squared consistency against a teacher.  The teacher is
architecturally identical, starts as a copy of the student and follows it
as an exponential moving average (decay 0.999 per step) of every
parameter and batch-norm running statistic; it never sees gradients.
Both models run their own dropout draws on the same batch; the teacher
normalizes with batch statistics but only the student updates running
statistics (the teacher's arrive through the EMA).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dataio import ClipRecord, Dataset, TIME_REDUCTION
from .model import CrnnConfig, CrnnModel, ModelInput, clone_model, save_model
from .sedmetrics import MetricConfig, clip_micro_f1, decisions_to_tags, evaluate_run
from .tensor import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


# --------------------------------------------------------------------------
# schedule and optimizer
# --------------------------------------------------------------------------

@dataclass
class LrSchedule:
    """Exponential warmup to the peak, then per-step multiplicative decay.

    The ramp is peak * exp(-5 * (1 - s/ramp_steps)^2); it starts near zero
    and reaches the peak exactly at ramp_steps, after which the rate is
    multiplied by decay_per_step each step.
    """

    peak: float = 1e-3
    ramp_steps: int = 12500
    decay_per_step: float = 0.99995

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ConfigError("step must be non-negative")
        if step < self.ramp_steps:
            frac = 1.0 - step / self.ramp_steps
            return self.peak * float(np.exp(-5.0 * frac * frac))
        return self.peak * self.decay_per_step ** (step - self.ramp_steps)


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params, config: AdamConfig = AdamConfig()):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self, lr: float) -> bool:
        """Apply one update; skips (and zeroes) non-finite gradients."""
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                log.warning("non-finite gradient in %s; skipping optimizer step", name)
                for q in self.params.values():
                    q.zero_grad()
                return False
        self.step_count += 1
        c = self.config
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.value -= (lr * update).astype(p.value.dtype)
        return True


def ema_update(teacher: CrnnModel, student: CrnnModel, decay: float = 0.999):
    """teacher <- decay * teacher + (1 - decay) * student, elementwise,
    over all parameters and batch-norm running statistics."""
    t_params, s_params = teacher.named_params(), student.named_params()
    if t_params.keys() != s_params.keys():
        raise ShapeError("teacher/student architectures differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        mixed = decay * tp.value.astype(np.float64) + (1.0 - decay) * sp.value.astype(np.float64)
        tp.value[...] = mixed.astype(tp.value.dtype)
    for t_bn, s_bn in zip(teacher.bns, student.bns):
        for attr in ("running_mean", "running_var"):
            tv = getattr(t_bn, attr)
            sv = getattr(s_bn, attr)
            mixed = decay * tv.astype(np.float64) + (1.0 - decay) * sv.astype(np.float64)
            tv[...] = mixed.astype(tv.dtype)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def classification_loss(clip_probs, labels, weak_mask=None):
    """Clip-level BCE over the weakly annotated rows.

    Returns (loss, gradient w.r.t. clip_probs).  Probabilities are clamped
    to [1e-7, 1 - 1e-7]; labels must be 0/1.
    """
    p = np.asarray(clip_probs)
    y = np.asarray(labels)
    if weak_mask is None:
        weak_mask = np.ones(p.shape[0], dtype=bool)
    rows = np.flatnonzero(weak_mask)
    if y.shape != (rows.size, p.shape[1]) and y.shape != p.shape:
        raise ShapeError(f"labels shape {list(y.shape)} incompatible with "
                         f"clip probs {list(p.shape)}")
    yw = y if y.shape == (rows.size, p.shape[1]) else y[rows]
    if not np.all((yw == 0) | (yw == 1)):
        raise DataError("weak labels must be 0/1")
    pw = np.clip(p[rows], PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = pw.size
    if n == 0:
        return 0.0, np.zeros_like(p)
    loss = float(-(yw * np.log(pw) + (1.0 - yw) * np.log1p(-pw)).sum() / n)
    grad = np.zeros_like(p)
    grad[rows] = ((pw - yw) / (pw * (1.0 - pw)) / n).astype(p.dtype)
    return loss, grad


def consistency_loss(student_clip, student_frames, teacher_clip, teacher_frames,
                     frame_mask=None):
    """Clip-level plus frame-level MSE between student and teacher outputs.

    Teacher values are constants (targets).  The frame term averages over
    each clip's valid frames and all classes, then over clips; the clip
    term averages over classes and clips.  Returns (loss, d_clip, d_frames).
    """
    sc, tc = np.asarray(student_clip), np.asarray(teacher_clip)
    sf, tf = np.asarray(student_frames), np.asarray(teacher_frames)
    if sc.shape != tc.shape or sf.shape != tf.shape:
        raise ShapeError("student/teacher output shapes differ")
    b, n_classes = sc.shape
    if frame_mask is None:
        frame_mask = np.ones(sf.shape[:2], dtype=sf.dtype)
    m = frame_mask.astype(sf.dtype)[:, :, None]
    clip_diff = sc - tc
    clip_mse = float((clip_diff ** 2).sum() / (b * n_classes))
    d_clip = (2.0 * clip_diff / (b * n_classes)).astype(sc.dtype)

    frame_diff = (sf - tf) * m
    valid = np.maximum(m.sum(axis=(1, 2)) * n_classes, 1.0)  # per-clip frame*class count
    per_clip = (frame_diff ** 2).sum(axis=(1, 2)) / valid
    frame_mse = float(per_clip.sum() / b)
    d_frames = (2.0 * frame_diff / valid[:, None, None] / b).astype(sf.dtype)
    return clip_mse + frame_mse, d_clip, d_frames


def total_loss(class_loss: float, cons_loss: float,
               classification_weight: float = 1.0,
               consistency_weight: float = 2.0) -> float:
    if not (np.isfinite(class_loss) and np.isfinite(cons_loss)):
        raise DataError(f"non-finite loss terms: classification={class_loss}, "
                        f"consistency={cons_loss}")
    return classification_weight * class_loss + consistency_weight * cons_loss


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

@dataclass
class Batch:
    clips: List[ClipRecord]
    labels: np.ndarray          # [n_weak, n_classes] 0/1
    n_weak: int


def labels_to_vector(labels, classes) -> np.ndarray:
    vec = np.zeros(len(classes), dtype=np.float32)
    for name in labels:
        vec[classes.index(name)] = 1.0
    return vec


def compose_batch(weak_pool, unlabeled_pool, rng,
                  n_weak: int = 24, n_unlabeled: int = 24) -> Batch:
    """Sample uniformly with replacement: n_weak (clip, label-vector) pairs
    and n_unlabeled clips."""
    if n_weak > 0 and not weak_pool:
        raise ConfigError("weak pool is empty but weak examples were requested")
    if n_unlabeled > 0 and not unlabeled_pool:
        raise ConfigError("unlabeled pool is empty but unlabeled examples were requested")
    clips: List[ClipRecord] = []
    labels = []
    for i in rng.integers(len(weak_pool), size=n_weak):
        clip, vec = weak_pool[int(i)]
        clips.append(clip)
        labels.append(vec)
    for i in rng.integers(len(unlabeled_pool), size=n_unlabeled) if n_unlabeled else []:
        clips.append(unlabeled_pool[int(i)])
    label_mat = np.stack(labels) if labels else np.zeros((0, 0), dtype=np.float32)
    return Batch(clips=clips, labels=label_mat, n_weak=n_weak)


def batch_tensors(clips: List[ClipRecord], config: CrnnConfig,
                  dtype=np.float32) -> ModelInput:
    """Zero-pad every modality the model wants to the batch maximum and
    record per-clip valid output-frame counts."""
    b = len(clips)
    out_frames = np.array([c.out_frames for c in clips], dtype=np.int64)
    t_out = int(out_frames.max())
    spectral = pre_audio = pre_visual = None
    if config.use_spectral:
        spectral = np.zeros((b, 1, t_out * TIME_REDUCTION, 128), dtype=dtype)
        for i, clip in enumerate(clips):
            if clip.spectral is None:
                raise DataError(f"clip {clip.clip_id}: missing spectral tensor")
            t = clip.spectral.shape[0]
            spectral[i, 0, :t] = clip.spectral
    if config.use_pre_audio:
        pre_audio = np.zeros((b, t_out, config.pre_audio_dim), dtype=dtype)
        for i, clip in enumerate(clips):
            if clip.pre_audio is None:
                raise DataError(f"clip {clip.clip_id}: missing pre_audio tensor")
            pre_audio[i, :clip.pre_audio.shape[0]] = clip.pre_audio
    if config.use_pre_visual:
        pre_visual = np.zeros((b, t_out, config.pre_visual_dim), dtype=dtype)
        for i, clip in enumerate(clips):
            if clip.pre_visual is None:
                raise DataError(f"clip {clip.clip_id}: missing pre_visual tensor")
            pre_visual[i, :clip.pre_visual.shape[0]] = clip.pre_visual
    return ModelInput(spectral=spectral, pre_audio=pre_audio, pre_visual=pre_visual,
                      valid_frames=out_frames)


def frame_mask_for(inp: ModelInput, t_out: int) -> np.ndarray:
    mask = np.zeros((len(inp.valid_frames), t_out), dtype=np.float32)
    for i, n in enumerate(inp.valid_frames):
        mask[i, :int(n)] = 1.0
    return mask


# --------------------------------------------------------------------------
# inference helpers
# --------------------------------------------------------------------------

def predict_on_clips(model: CrnnModel, clips: List[ClipRecord], batch_size: int = 8):
    """Eval-mode forward over a clip list.

    Returns ({clip_id: clip_probs}, {clip_id: frame_probs trimmed to the
    clip's valid frames}).
    """
    clip_probs: Dict[str, np.ndarray] = {}
    frame_probs: Dict[str, np.ndarray] = {}
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        inp = batch_tensors(chunk, model.config, dtype=model.dtype)
        fp, cp = model.forward(inp, train=False, cache=False)
        for i, clip in enumerate(chunk):
            n = clip.out_frames
            clip_probs[clip.clip_id] = cp[i].copy()
            frame_probs[clip.clip_id] = fp[i, :n].copy()
    return clip_probs, frame_probs


def validation_clip_f1(model: CrnnModel, dataset: Dataset, split: str = "val",
                       tau: float = 0.5) -> float:
    clips = dataset.split_clips(split)
    events = dataset.split_events(split)
    clip_probs, _ = predict_on_clips(model, clips)
    pred = {cid: decisions_to_tags(p, dataset.classes, tau)
            for cid, p in clip_probs.items()}
    ref = {c.clip_id: {e[2] for e in events.get(c.clip_id, [])} for c in clips}
    return clip_micro_f1(pred, ref).f1


def evaluate_model_on_split(model: CrnnModel, dataset: Dataset, split: str,
                            metric_config: MetricConfig = MetricConfig()):
    """All three reports (clip/segment/event) for one strongly annotated split."""
    clips = dataset.split_clips(split)
    events = dataset.split_events(split)
    clip_probs, frame_probs = predict_on_clips(model, clips)
    durations = {c.clip_id: c.duration_s for c in clips}
    frame_dt = TIME_REDUCTION / dataset.spectral_rate
    refs = {c.clip_id: events.get(c.clip_id, []) for c in clips}
    return evaluate_run(clip_probs, frame_probs, durations, frame_dt, refs,
                        dataset.classes, metric_config)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainRunConfig:
    epochs: int = 200
    batches_per_epoch: int = 250
    weak_per_batch: int = 24
    unlabeled_per_batch: int = 24
    seed: int = 0
    classification_weight: float = 1.0
    consistency_weight: float = 2.0
    ema_decay: float = 0.999
    lr: LrSchedule = field(default_factory=LrSchedule)
    adam: AdamConfig = field(default_factory=AdamConfig)
    val_threshold: float = 0.5

    def validate(self):
        if self.epochs < 0 or self.batches_per_epoch <= 0:
            raise ConfigError("epochs must be >= 0 and batches_per_epoch > 0")
        if self.weak_per_batch <= 0:
            raise ConfigError("weak_per_batch must be positive (BCE needs weak data)")
        if self.unlabeled_per_batch < 0:
            raise ConfigError("unlabeled_per_batch must be non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0,1)")


@dataclass
class TrainResult:
    student: CrnnModel
    teacher: CrnnModel
    log_lines: List[str]
    final_val_f1: float
    history: List[Dict[str, float]]


def train(model_config: CrnnConfig, run_config: TrainRunConfig, dataset: Dataset,
          out_dir: Optional[str] = None) -> TrainResult:
    """Run the full mean-teacher loop; optionally write checkpoints and the
    epoch log under ``out_dir``."""
    run_config.validate()
    seed = int(run_config.seed)
    rng_init = np.random.default_rng([seed, 1])
    rng_batch = np.random.default_rng([seed, 2])
    rng_student = np.random.default_rng([seed, 3])
    rng_teacher = np.random.default_rng([seed, 4])

    student = CrnnModel(model_config, rng=rng_init)
    teacher = clone_model(student)
    optimizer = Adam(student.named_params(), run_config.adam)

    weak_pool = [(clip, labels_to_vector(dataset.weak_labels[clip.clip_id], dataset.classes))
                 for clip in dataset.weak]
    unlabeled_pool = list(dataset.unlabeled)

    log_lines: List[str] = []
    history: List[Dict[str, float]] = []
    final_val = 0.0
    global_step = 0
    lr = run_config.lr.lr_at(0)
    for epoch in range(run_config.epochs):
        sum_class = sum_cons = sum_total = 0.0
        for batch_index in range(run_config.batches_per_epoch):
            batch = compose_batch(weak_pool, unlabeled_pool, rng_batch,
                                  run_config.weak_per_batch,
                                  run_config.unlabeled_per_batch)
            inp = batch_tensors(batch.clips, model_config)
            weak_mask = np.zeros(len(batch.clips), dtype=bool)
            weak_mask[:batch.n_weak] = True

            student.zero_grads()
            s_frames, s_clip = student.forward(inp, train=True, rng=rng_student)
            t_frames, t_clip = teacher.forward(inp, train=True, rng=rng_teacher,
                                               cache=False, track_bn=False)
            mask = frame_mask_for(inp, s_frames.shape[1])
            class_loss, d_clip_cls = classification_loss(s_clip, batch.labels, weak_mask)
            cons_loss, d_clip_cons, d_frames_cons = consistency_loss(
                s_clip, s_frames, t_clip, t_frames, mask)
            try:
                batch_total = total_loss(class_loss, cons_loss,
                                         run_config.classification_weight,
                                         run_config.consistency_weight)
            except DataError as exc:
                raise DataError(f"epoch {epoch} batch {batch_index}: {exc}") from exc

            d_clip = (run_config.classification_weight * d_clip_cls
                      + run_config.consistency_weight * d_clip_cons)
            d_frames = run_config.consistency_weight * d_frames_cons
            student.backward(d_frame_probs=d_frames, d_clip_probs=d_clip)
            lr = run_config.lr.lr_at(global_step)
            optimizer.step(lr)
            ema_update(teacher, student, run_config.ema_decay)
            global_step += 1
            sum_class += class_loss
            sum_cons += cons_loss
            sum_total += batch_total
        n = run_config.batches_per_epoch
        val_f1 = validation_clip_f1(student, dataset, tau=run_config.val_threshold)
        final_val = val_f1
        record = {"epoch": epoch, "step": global_step, "lr": lr,
                  "class_loss": sum_class / n, "cons_loss": sum_cons / n,
                  "total_loss": sum_total / n, "val_clip_f1": val_f1}
        history.append(record)
        log_lines.append(f"{epoch}\t{global_step}\t{lr:.10g}\t{sum_class / n:.6f}"
                         f"\t{sum_cons / n:.6f}\t{sum_total / n:.6f}\t{val_f1:.6f}")

    result = TrainResult(student, teacher, log_lines, final_val, history)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        try:
            save_model(os.path.join(out_dir, "student.ftb"), student)
            save_model(os.path.join(out_dir, "teacher.ftb"), teacher)
            with open(os.path.join(out_dir, "train_log.tsv"), "w",
                      encoding="utf-8", newline="\n") as fh:
                for line in log_lines:
                    fh.write(line + "\n")
        except OSError as exc:
            raise OSError(f"failed writing run outputs to {out_dir}: {exc}") from exc
    return result


# --------------------------------------------------------------------------
# multi-seed protocol
# --------------------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    val_score: float
    test_reports: Optional[Tuple] = None   # (clip, segment, event) when selected


@dataclass
class SelectionReport:
    runs: List[SeedRun]
    selected_seeds: List[int]
    mean_clip_f1: float
    mean_segment_f1: float
    mean_event_f1: float


def multi_seed_select(model_config: CrnnConfig, run_config: TrainRunConfig,
                      dataset: Dataset, n_seeds: int = 5, k_best: int = 2,
                      metric_config: MetricConfig = MetricConfig()) -> SelectionReport:
    """Train n_seeds independently seeded systems, select the k_best by
    validation clip F1 and average their test scores."""
    if k_best > n_seeds or k_best < 1:
        raise ConfigError(f"k_best ({k_best}) must be in [1, n_seeds ({n_seeds})]")
    runs: List[SeedRun] = []
    models: Dict[int, CrnnModel] = {}
    for i in range(n_seeds):
        cfg_i = replace(run_config, seed=run_config.seed + i)
        result = train(model_config, cfg_i, dataset)
        runs.append(SeedRun(seed=cfg_i.seed, val_score=result.final_val_f1))
        models[cfg_i.seed] = result.student
    ranked = sorted(runs, key=lambda r: (-r.val_score, r.seed))
    selected = [r.seed for r in ranked[:k_best]]
    clip_f1s, seg_f1s, evt_f1s = [], [], []
    for run in runs:
        if run.seed not in selected:
            continue
        reports = evaluate_model_on_split(models[run.seed], dataset, "test", metric_config)
        run.test_reports = reports
        clip_f1s.append(reports[0].f1)
        seg_f1s.append(reports[1].f1)
        evt_f1s.append(reports[2].f1)
    return SelectionReport(runs=runs, selected_seeds=selected,
                           mean_clip_f1=float(np.mean(clip_f1s)),
                           mean_segment_f1=float(np.mean(seg_f1s)),
                           mean_event_f1=float(np.mean(evt_f1s)))
