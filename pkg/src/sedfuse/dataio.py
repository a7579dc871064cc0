"""On-disk formats and the synthetic dataset generator.

Formats
-------
Feature container (``.ftb``): magic ``FTB1\\n``, then a little-endian u32
record count; each record is u16 name length, ASCII name bytes, u8 ndim,
ndim x u32 extents, and the row-major float32 payload.  Round trips are
byte-exact.

Strong annotation TSV: ``clip_id<TAB>onset_s<TAB>offset_s<TAB>label``
lines (optional header, detected by a non-numeric second field).
Weak annotation TSV: ``clip_id<TAB>label1,label2,...``.
Manifest: flat ``key=value`` lines.

The generator synthesizes aligned multimodal clips with known ground
truth: each class owns a fixed spectral band pattern and fixed embedding
directions for the pretrained streams; events add those signatures on top
of background noise.  Event boundaries are snapped to the model's output
frame grid (4 spectral frames), so the strong ground truth is exactly
representable by frame decisions.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .tensor import ConfigError, DataError

MAGIC = b"FTB1\n"
SPECTRAL_RATE = 60.4          # spectral frames per second (604 per 10 s clip)
TIME_REDUCTION = 4            # spectral frames per output frame

DEFAULT_CLASSES = ("bark", "bell", "chirp", "click", "drill",
                   "hum", "ring", "siren", "thud", "whistle")


class FormatError(DataError):
    """Malformed container or annotation file."""


# --------------------------------------------------------------------------
# feature container
# --------------------------------------------------------------------------

def write_feature_file(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write named float32 tensors; names must be unique ASCII."""
    blobs = []
    seen = set()
    for name, arr in tensors.items():
        try:
            name_b = name.encode("ascii")
        except UnicodeEncodeError as exc:
            raise FormatError(f"tensor name {name!r} is not ASCII") from exc
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        if a.ndim == 0:
            a = a.reshape(1)
        if a.ndim > 255:
            raise FormatError(f"tensor {name!r} has too many dimensions")
        head = struct.pack("<H", len(name_b)) + name_b + struct.pack("B", a.ndim)
        head += struct.pack(f"<{a.ndim}I", *a.shape)
        blobs.append(head + a.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            fh.write(blob)


def read_feature_file(path) -> Dict[str, np.ndarray]:
    """Read a container written by :func:`write_feature_file`."""
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(n, offset, what):
        if offset + n > len(buf):
            raise FormatError(f"{path}: truncated {what} at offset {offset}")
        return buf[offset:offset + n], offset + n

    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    off = len(MAGIC)
    raw, off = need(4, off, "record count")
    (count,) = struct.unpack("<I", raw)
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, off = need(2, off, "name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, off = need(nlen, off, "name")
        name = raw.decode("ascii", errors="replace")
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r} at offset {off}")
        raw, off = need(1, off, "ndim")
        ndim = raw[0]
        raw, off = need(4 * ndim, off, "extents")
        shape = struct.unpack(f"<{ndim}I", raw) if ndim else ()
        nelem = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw, off = need(4 * nelem, off, f"payload of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes at offset {off}")
    return out


# --------------------------------------------------------------------------
# annotation formats
# --------------------------------------------------------------------------

@dataclass
class StrongAnnotation:
    clip_id: str
    events: List[Tuple[float, float, str]]


@dataclass
class WeakAnnotation:
    clip_id: str
    labels: Set[str]


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def parse_strong_tsv(path, vocabulary: Optional[Sequence[str]] = None) -> List[StrongAnnotation]:
    """Parse onset/offset/label lines, grouped by clip in file order."""
    vocab = set(vocabulary) if vocabulary is not None else None
    by_clip: Dict[str, List[Tuple[float, float, str]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise FormatError(f"{path}: expected 4 tab-separated fields, "
                                  f"got {len(fields)}, line {lineno}")
            clip_id, onset_s, offset_s, label = fields
            if lineno == 1 and not _is_number(onset_s):
                continue  # header row
            if not (_is_number(onset_s) and _is_number(offset_s)):
                raise FormatError(f"{path}: non-numeric time field, line {lineno}")
            onset, offset = float(onset_s), float(offset_s)
            if onset < 0:
                raise FormatError(f"{path}: negative onset, line {lineno}")
            if offset <= onset:
                raise FormatError(f"{path}: offset before onset, line {lineno}")
            if vocab is not None and label not in vocab:
                raise FormatError(
                    f"{path}: unknown label {label!r}, line {lineno}; "
                    f"vocabulary: {sorted(vocab)}")
            by_clip.setdefault(clip_id, []).append((onset, offset, label))
    return [StrongAnnotation(cid, evs) for cid, evs in by_clip.items()]


def write_strong_tsv(path, annotations: Sequence[StrongAnnotation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ann in annotations:
            for onset, offset, label in ann.events:
                fh.write(f"{ann.clip_id}\t{float(onset)!r}\t{float(offset)!r}\t{label}\n")


def parse_weak_tsv(path, vocabulary: Optional[Sequence[str]] = None) -> List[WeakAnnotation]:
    vocab = set(vocabulary) if vocabulary is not None else None
    out: List[WeakAnnotation] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise FormatError(f"{path}: expected 2 tab-separated fields, "
                                  f"got {len(fields)}, line {lineno}")
            clip_id, label_csv = fields
            labels = {l for l in label_csv.split(",") if l}
            if not labels:
                raise FormatError(f"{path}: no labels, line {lineno}")
            if vocab is not None and not labels <= vocab:
                bad = sorted(labels - vocab)
                raise FormatError(f"{path}: unknown labels {bad}, line {lineno}; "
                                  f"vocabulary: {sorted(vocab)}")
            out.append(WeakAnnotation(clip_id, labels))
    return out


def write_weak_tsv(path, annotations: Sequence[WeakAnnotation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ann in annotations:
            if not ann.labels:
                raise FormatError(f"clip {ann.clip_id}: weak annotation needs >=1 label")
            fh.write(f"{ann.clip_id}\t{','.join(sorted(ann.labels))}\n")


def write_manifest(path, entries: Dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def read_manifest(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}: expected key=value, line {lineno}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# --------------------------------------------------------------------------
# synthetic dataset generation
# --------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Knobs of the synthetic aligned multimodal dataset.

    Durations are snapped down so the spectral frame count is a multiple
    of 4 (the model's temporal reduction); event boundaries land on the
    output frame grid.
    """

    n_weak: int = 64
    n_unlabeled: int = 64
    n_val: int = 16
    n_test: int = 16
    duration_s: float = 10.0
    min_duration_s: Optional[float] = None   # uniform [min, duration_s] when set
    classes: Tuple[str, ...] = DEFAULT_CLASSES
    events_min: int = 1
    events_max: int = 3
    event_len_min_s: float = 0.5
    event_len_max_s: float = 5.0
    noise_level: float = 0.3
    spectral_gain: float = 3.0
    pretrained_gain: float = 3.0
    pre_audio_dim: int = 128
    pre_visual_dim: int = 4096
    visual_informative: bool = False
    seed: int = 0

    def validate(self):
        if self.n_weak < 0 or self.n_unlabeled < 0 or self.n_val < 0 or self.n_test < 0:
            raise ConfigError("partition sizes must be non-negative")
        if not self.classes:
            raise ConfigError("class vocabulary is empty")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class names")
        lo = self.min_duration_s if self.min_duration_s is not None else self.duration_s
        if lo <= 0 or lo > self.duration_s:
            raise ConfigError("invalid clip duration range")
        if self.events_min < 1 or self.events_max < self.events_min:
            raise ConfigError("invalid events-per-clip range")
        if self.event_len_min_s <= 0 or self.event_len_max_s < self.event_len_min_s:
            raise ConfigError("invalid event length range")
        if self.event_len_min_s > lo:
            raise ConfigError(
                f"infeasible spec: shortest event ({self.event_len_min_s}s) is longer "
                f"than the shortest clip ({lo}s)")
        if min(_clip_frames(lo)) < TIME_REDUCTION:
            raise ConfigError("clips too short for one output frame")


def _clip_frames(duration_s: float) -> Tuple[int, int]:
    """Spectral and output frame counts for a nominal duration; spectral
    count is snapped down to a multiple of the temporal reduction."""
    t = int(duration_s * SPECTRAL_RATE / TIME_REDUCTION) * TIME_REDUCTION
    return t, t // TIME_REDUCTION


def output_frame_duration() -> float:
    return TIME_REDUCTION / SPECTRAL_RATE


def class_templates(spec: SynthSpec):
    """Per-class signatures, a pure function of the seed: a banded energy
    pattern over the 128 spectral bins and unit direction vectors for the
    pretrained streams."""
    rng = np.random.default_rng([int(spec.seed), 0x7E3])
    n = len(spec.classes)
    bins = np.arange(128, dtype=np.float64)
    spectral = np.zeros((n, 128), dtype=np.float64)
    for c in range(n):
        center = 10.0 + (c + 0.5) * (108.0 / n) + rng.uniform(-3, 3)
        width = rng.uniform(3.0, 8.0)
        spectral[c] = np.exp(-0.5 * ((bins - center) / width) ** 2)
    audio = rng.standard_normal((n, spec.pre_audio_dim))
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    visual = rng.standard_normal((n, spec.pre_visual_dim))
    visual /= np.linalg.norm(visual, axis=1, keepdims=True)
    return (spectral.astype(np.float32), audio.astype(np.float32),
            visual.astype(np.float32))


def _merge_intervals(frames: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
    if not frames:
        return []
    frames = sorted(frames)
    merged = [frames[0]]
    for a, b in frames[1:]:
        if a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
        else:
            merged.append((a, b))
    return merged


def _synth_clip(spec, rng, templates, t_frames, t_out):
    """Feature tensors plus frame-grid ground truth for one clip."""
    spectral_t, audio_t, visual_t = templates
    n_classes = len(spec.classes)
    out_dt = output_frame_duration()
    duration = t_frames / SPECTRAL_RATE

    n_events = int(rng.integers(spec.events_min, spec.events_max + 1))
    placed = []  # (class idx, on_f, off_f, amplitude) on the output grid
    for _ in range(n_events):
        cls = int(rng.integers(n_classes))
        length = float(rng.uniform(spec.event_len_min_s,
                                   min(spec.event_len_max_s, duration)))
        onset = float(rng.uniform(0.0, duration - length))
        on_f = int(round(onset / out_dt))
        off_f = int(round((onset + length) / out_dt))
        off_f = min(max(off_f, on_f + 1), t_out)
        on_f = min(on_f, off_f - 1)
        amp = float(rng.uniform(0.8, 1.25))
        placed.append((cls, on_f, off_f, amp))

    spectral = rng.standard_normal((t_frames, 128)).astype(np.float32) * spec.noise_level
    pre_audio = rng.standard_normal((t_out, spec.pre_audio_dim)).astype(np.float32) \
        * spec.noise_level
    pre_visual = rng.standard_normal((t_out, spec.pre_visual_dim)).astype(np.float32) \
        * spec.noise_level
    for cls, on_f, off_f, amp in placed:
        spectral[on_f * TIME_REDUCTION: off_f * TIME_REDUCTION] += \
            (amp * spec.spectral_gain) * spectral_t[cls]
        pre_audio[on_f:off_f] += (amp * spec.pretrained_gain) * audio_t[cls]
        if spec.visual_informative:
            pre_visual[on_f:off_f] += (amp * spec.pretrained_gain) * visual_t[cls]

    events = []
    for cls in sorted({p[0] for p in placed}):
        spans = _merge_intervals([(p[1], p[2]) for p in placed if p[0] == cls])
        for a, b in spans:
            events.append((a * out_dt, b * out_dt, spec.classes[cls]))
    events.sort()
    tensors = {"spectral": spectral, "pre_audio": pre_audio, "pre_visual": pre_visual}
    return tensors, events


def synthesize_dataset(spec: SynthSpec, out_dir) -> Dict[str, int]:
    """Generate feature files, annotations and the manifest under
    ``out_dir``; returns per-partition clip counts."""
    spec.validate()
    templates = class_templates(spec)
    rng = np.random.default_rng([int(spec.seed), 0xDA7A])
    features_dir = os.path.join(out_dir, "features")
    os.makedirs(features_dir, exist_ok=True)

    partitions = [("weak", spec.n_weak), ("unl", spec.n_unlabeled),
                  ("val", spec.n_val), ("test", spec.n_test)]
    weak_anns: List[WeakAnnotation] = []
    strong: Dict[str, List[StrongAnnotation]] = {"val": [], "test": []}
    sidecar: List[StrongAnnotation] = []
    unlabeled_ids: List[str] = []
    counts: Dict[str, int] = {}
    for part, n_clips in partitions:
        counts[part] = n_clips
        for i in range(n_clips):
            clip_id = f"{part}_{i:04d}"
            if spec.min_duration_s is not None:
                dur = float(rng.uniform(spec.min_duration_s, spec.duration_s))
            else:
                dur = spec.duration_s
            t_frames, t_out = _clip_frames(dur)
            tensors, events = _synth_clip(spec, rng, templates, t_frames, t_out)
            write_feature_file(os.path.join(features_dir, f"{clip_id}.ftb"), tensors)
            sidecar.append(StrongAnnotation(clip_id, events))
            if part == "weak":
                weak_anns.append(WeakAnnotation(clip_id, {e[2] for e in events}))
            elif part == "unl":
                unlabeled_ids.append(clip_id)
            else:
                strong[part].append(StrongAnnotation(clip_id, events))

    write_weak_tsv(os.path.join(out_dir, "weak.tsv"), weak_anns)
    with open(os.path.join(out_dir, "unlabeled.lst"), "w", encoding="utf-8",
              newline="\n") as fh:
        for clip_id in unlabeled_ids:
            fh.write(clip_id + "\n")
    write_strong_tsv(os.path.join(out_dir, "val.tsv"), strong["val"])
    write_strong_tsv(os.path.join(out_dir, "test.tsv"), strong["test"])
    write_strong_tsv(os.path.join(out_dir, ".oracle_strong.tsv"), sidecar)
    write_manifest(os.path.join(out_dir, "manifest.txt"), {
        "format": "sedfuse-dataset-v1",
        "classes": ",".join(spec.classes),
        "spectral_rate": repr(SPECTRAL_RATE),
        "pre_audio_dim": str(spec.pre_audio_dim),
        "pre_visual_dim": str(spec.pre_visual_dim),
        "modalities": "spectral,pre_audio,pre_visual",
        "features_dir": "features",
        "weak_tsv": "weak.tsv",
        "unlabeled_list": "unlabeled.lst",
        "val_tsv": "val.tsv",
        "test_tsv": "test.tsv",
        "n_weak": str(spec.n_weak),
        "n_unlabeled": str(spec.n_unlabeled),
        "n_val": str(spec.n_val),
        "n_test": str(spec.n_test),
        "seed": str(spec.seed),
    })
    return counts


# --------------------------------------------------------------------------
# dataset loading
# --------------------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: str
    duration_s: float
    spectral: Optional[np.ndarray] = None      # [T, 128]
    pre_audio: Optional[np.ndarray] = None     # [T/4, Da]
    pre_visual: Optional[np.ndarray] = None    # [T/4, Dv]

    @property
    def out_frames(self) -> int:
        if self.spectral is not None:
            return self.spectral.shape[0] // TIME_REDUCTION
        for t in (self.pre_audio, self.pre_visual):
            if t is not None:
                return t.shape[0]
        raise DataError(f"clip {self.clip_id}: no feature tensors")


@dataclass
class Dataset:
    root: str
    classes: List[str]
    spectral_rate: float
    pre_audio_dim: int
    pre_visual_dim: int
    weak: List[ClipRecord] = field(default_factory=list)
    weak_labels: Dict[str, Set[str]] = field(default_factory=dict)
    unlabeled: List[ClipRecord] = field(default_factory=list)
    val: List[ClipRecord] = field(default_factory=list)
    val_events: Dict[str, List[Tuple[float, float, str]]] = field(default_factory=dict)
    test: List[ClipRecord] = field(default_factory=list)
    test_events: Dict[str, List[Tuple[float, float, str]]] = field(default_factory=dict)

    def split_clips(self, split: str) -> List[ClipRecord]:
        return {"weak": self.weak, "unlabeled": self.unlabeled,
                "val": self.val, "test": self.test}[split]

    def split_events(self, split: str):
        return {"val": self.val_events, "test": self.test_events}[split]


def _load_clip(features_dir, clip_id, rate) -> ClipRecord:
    path = os.path.join(features_dir, f"{clip_id}.ftb")
    if not os.path.exists(path):
        raise DataError(f"clip {clip_id}: missing feature file {path}")
    tensors = read_feature_file(path)
    spectral = tensors.get("spectral")
    pre_audio = tensors.get("pre_audio")
    pre_visual = tensors.get("pre_visual")
    if spectral is not None:
        t = spectral.shape[0]
        if t % TIME_REDUCTION:
            raise DataError(f"clip {clip_id}: spectral frame count {t} "
                            f"not divisible by {TIME_REDUCTION}")
        expected = t // TIME_REDUCTION
        for name, tensor in (("pre_audio", pre_audio), ("pre_visual", pre_visual)):
            if tensor is not None and tensor.shape[0] != expected:
                raise DataError(
                    f"clip {clip_id}: {name} alignment violation: "
                    f"expected {expected}, got {tensor.shape[0]}")
        duration = t / rate
    else:
        ref = pre_audio if pre_audio is not None else pre_visual
        if ref is None:
            raise DataError(f"clip {clip_id}: feature file holds no known modality")
        if pre_audio is not None and pre_visual is not None \
                and pre_audio.shape[0] != pre_visual.shape[0]:
            raise DataError(f"clip {clip_id}: pretrained streams disagree on frames")
        duration = ref.shape[0] * TIME_REDUCTION / rate
    return ClipRecord(clip_id, duration, spectral, pre_audio, pre_visual)


def load_split(root) -> Dataset:
    """Load all four partitions, checking every referenced file and the
    4:1 temporal alignment contract."""
    manifest = read_manifest(os.path.join(root, "manifest.txt"))
    if manifest.get("format") != "sedfuse-dataset-v1":
        raise FormatError(f"{root}: unknown dataset format {manifest.get('format')!r}")
    classes = manifest["classes"].split(",")
    rate = float(manifest.get("spectral_rate", repr(SPECTRAL_RATE)))
    features_dir = os.path.join(root, manifest.get("features_dir", "features"))
    ds = Dataset(root=str(root), classes=classes, spectral_rate=rate,
                 pre_audio_dim=int(manifest.get("pre_audio_dim", "0")),
                 pre_visual_dim=int(manifest.get("pre_visual_dim", "0")))

    for ann in parse_weak_tsv(os.path.join(root, manifest["weak_tsv"]), classes):
        ds.weak.append(_load_clip(features_dir, ann.clip_id, rate))
        ds.weak_labels[ann.clip_id] = set(ann.labels)
    with open(os.path.join(root, manifest["unlabeled_list"]), "r", encoding="utf-8") as fh:
        for line in fh:
            clip_id = line.strip()
            if clip_id:
                ds.unlabeled.append(_load_clip(features_dir, clip_id, rate))
    for split, key in (("val", "val_tsv"), ("test", "test_tsv")):
        clips = getattr(ds, split)
        events = getattr(ds, f"{split}_events")
        for ann in parse_strong_tsv(os.path.join(root, manifest[key]), classes):
            clips.append(_load_clip(features_dir, ann.clip_id, rate))
            events[ann.clip_id] = list(ann.events)
    return ds


def load_oracle_sidecar(root) -> Dict[str, List[Tuple[float, float, str]]]:
    """Debug-only ground truth for every partition; never fed to training."""
    path = os.path.join(root, ".oracle_strong.tsv")
    return {ann.clip_id: ann.events for ann in parse_strong_tsv(path)}
