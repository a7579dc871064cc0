"""Decision post-processing and DCASE-style scoring.

Pipeline order is fixed: threshold the probabilities (strict > tau, so an
all-0.5 output stays silent), median-filter the binary frame decisions,
decode contiguous runs into events, then score.  Three report levels:
clip-based micro F1 over (clip, class) tag pairs, segment-based micro F1
over 1 s chunks, and event-based macro F1 with onset/offset collars.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .tensor import ConfigError, DataError

Event = Tuple[float, float, str]


@dataclass
class MetricConfig:
    threshold: float = 0.5
    median_window: int = 7
    segment_s: float = 1.0
    onset_collar_s: float = 0.2
    offset_ratio: float = 0.2
    offset_min_s: float = 0.2


@dataclass
class F1Report:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_class: Optional[Dict[str, "F1Report"]] = None
    matches: Optional[List[Tuple[str, str, Tuple[float, float], Tuple[float, float]]]] = None

    @classmethod
    def from_counts(cls, tp, fp, fn) -> "F1Report":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
        return cls(tp, fp, fn, precision, recall, f1)


def threshold(probs, tau=0.5):
    """Binary decisions; strictly greater than tau (ties go inactive)."""
    return (np.asarray(probs) > tau).astype(np.uint8)


def median_filter(decisions, window=7):
    """Sliding binary median with truncated windows at the edges.

    Majority vote per window; even-sized edge windows break 0/1 ties
    toward 0, so clip boundaries cannot hallucinate activity.
    """
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"median filter window must be odd and positive, got {window}")
    d = np.asarray(decisions, dtype=np.uint8)
    squeeze = d.ndim == 1
    if squeeze:
        d = d[:, None]
    t = d.shape[0]
    half = window // 2
    csum = np.concatenate([np.zeros((1, d.shape[1]), dtype=np.int64),
                           np.cumsum(d, axis=0, dtype=np.int64)])
    idx = np.arange(t)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, t)
    ones = csum[hi] - csum[lo]
    length = (hi - lo)[:, None]
    out = (2 * ones > length).astype(np.uint8)
    return out[:, 0] if squeeze else out


def decode_events(decisions, frame_duration_s, classes) -> List[Event]:
    """Maximal runs of active frames become events on the frame grid."""
    d = np.asarray(decisions)
    if d.ndim != 2 or d.shape[1] != len(classes):
        raise DataError(f"decisions must be [T,{len(classes)}], got {list(d.shape)}")
    events: List[Event] = []
    for c, name in enumerate(classes):
        col = d[:, c].astype(np.int8)
        changes = np.flatnonzero(np.diff(np.concatenate([[0], col, [0]])))
        for start, stop in zip(changes[::2], changes[1::2]):
            events.append((start * frame_duration_s, stop * frame_duration_s, name))
    events.sort(key=lambda e: (e[0], e[2], e[1]))
    return events


def rasterize_events(events: Sequence[Event], frame_duration_s, n_frames, classes):
    """Inverse of :func:`decode_events`: a frame is active iff it has a
    positive-length overlap with an event of that class."""
    class_idx = {name: i for i, name in enumerate(classes)}
    out = np.zeros((n_frames, len(classes)), dtype=np.uint8)
    for onset, offset, label in events:
        if label not in class_idx:
            raise DataError(f"unknown class {label!r} in event list")
        start = max(int(np.floor(onset / frame_duration_s + 1e-9)), 0)
        stop = min(int(np.ceil(offset / frame_duration_s - 1e-9)), n_frames)
        if stop > start:
            out[start:stop, class_idx[label]] = 1
    return out


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def clip_micro_f1(pred_tags: Dict[str, Set[str]], ref_tags: Dict[str, Set[str]]) -> F1Report:
    """Micro F1 over all (clip, class) tag pairs; both sides must cover the
    same clip universe."""
    if pred_tags.keys() != ref_tags.keys():
        diff = sorted(pred_tags.keys() ^ ref_tags.keys())
        raise DataError(f"clip universes differ; symmetric difference: {diff}")
    tp = fp = fn = 0
    for clip_id, ref in ref_tags.items():
        pred = pred_tags[clip_id]
        tp += len(pred & ref)
        fp += len(pred - ref)
        fn += len(ref - pred)
    return F1Report.from_counts(tp, fp, fn)


def _clip_events_to_duration(events, duration, clip_id):
    kept = []
    for onset, offset, label in events:
        if onset >= duration:
            warnings.warn(f"clip {clip_id}: event ({onset},{offset},{label}) "
                          f"starts beyond duration {duration}; dropped")
            continue
        if offset > duration:
            warnings.warn(f"clip {clip_id}: event ({onset},{offset},{label}) "
                          f"clipped to duration {duration}")
            offset = duration
        kept.append((onset, offset, label))
    return kept


def segment_micro_f1(pred_events: Dict[str, List[Event]],
                     ref_events: Dict[str, List[Event]],
                     durations: Dict[str, float],
                     segment_s: float = 1.0) -> F1Report:
    """Micro F1 over fixed-length timeline chunks.

    A class is active in a segment iff one of its events overlaps the
    segment with positive length; the final partial segment is scored.
    """
    if segment_s <= 0:
        raise ConfigError("segment length must be positive")
    for side, evs in (("pred", pred_events), ("ref", ref_events)):
        unknown = evs.keys() - durations.keys()
        if unknown:
            raise DataError(f"{side} events reference clips without durations: "
                            f"{sorted(unknown)}")
    tp = fp = fn = 0
    for clip_id, duration in durations.items():
        n_seg = int(np.ceil(duration / segment_s))
        classes = set()
        sides = []
        for evs in (pred_events.get(clip_id, []), ref_events.get(clip_id, [])):
            active: Dict[str, np.ndarray] = {}
            for onset, offset, label in _clip_events_to_duration(evs, duration, clip_id):
                k0 = max(int(np.floor(onset / segment_s)), 0)
                k1 = min(int(np.ceil(offset / segment_s)), n_seg)
                col = active.setdefault(label, np.zeros(n_seg, dtype=bool))
                col[k0:k1] = True
                classes.add(label)
            sides.append(active)
        pred_active, ref_active = sides
        for label in classes:
            p = pred_active.get(label, np.zeros(n_seg, dtype=bool))
            r = ref_active.get(label, np.zeros(n_seg, dtype=bool))
            tp += int(np.sum(p & r))
            fp += int(np.sum(p & ~r))
            fn += int(np.sum(~p & r))
    return F1Report.from_counts(tp, fp, fn)


def _offset_tolerance(ref_onset, ref_offset, ratio, floor):
    return max(floor, ratio * (ref_offset - ref_onset))


def event_macro_f1(pred_events: Dict[str, List[Event]],
                   ref_events: Dict[str, List[Event]],
                   onset_collar_s: float = 0.2,
                   offset_ratio: float = 0.2,
                   offset_min_s: float = 0.2) -> F1Report:
    """Macro-averaged event F1 with onset/offset collars.

    A prediction matches a same-class reference iff the onset difference
    is within the onset collar and the offset difference is within
    max(offset_min, offset_ratio * reference length).  Matching is
    one-to-one and greedy: references in onset order take the
    earliest-onset unmatched compatible prediction.  Classes absent from
    both sides are excluded from the macro average.
    """
    clip_ids = sorted(pred_events.keys() | ref_events.keys())
    class_names = sorted({e[2] for evs in pred_events.values() for e in evs} |
                         {e[2] for evs in ref_events.values() for e in evs})
    counts = {name: [0, 0, 0] for name in class_names}  # tp, fp, fn
    matches = []
    for clip_id in clip_ids:
        preds = sorted(pred_events.get(clip_id, []))
        refs = sorted(ref_events.get(clip_id, []))
        for name in class_names:
            p_cls = [e for e in preds if e[2] == name]
            r_cls = [e for e in refs if e[2] == name]
            taken = [False] * len(p_cls)
            tp_here = 0
            for r_on, r_off, _ in r_cls:
                tol = _offset_tolerance(r_on, r_off, offset_ratio, offset_min_s)
                for i, (p_on, p_off, _) in enumerate(p_cls):
                    if taken[i]:
                        continue
                    if abs(p_on - r_on) <= onset_collar_s and abs(p_off - r_off) <= tol:
                        taken[i] = True
                        tp_here += 1
                        matches.append((clip_id, name, (r_on, r_off), (p_on, p_off)))
                        break
            c = counts[name]
            c[0] += tp_here
            c[1] += len(p_cls) - tp_here
            c[2] += len(r_cls) - tp_here
    per_class = {name: F1Report.from_counts(*counts[name]) for name in class_names}
    scored = [rep for rep in per_class.values() if rep.tp + rep.fp + rep.fn > 0]
    if scored:
        precision = float(np.mean([r.precision for r in scored]))
        recall = float(np.mean([r.recall for r in scored]))
        f1 = float(np.mean([r.f1 for r in scored]))
    else:
        precision = recall = f1 = 0.0
    total = [sum(c[i] for c in counts.values()) for i in range(3)]
    return F1Report(total[0], total[1], total[2], precision, recall, f1,
                    per_class=per_class, matches=matches)


# --------------------------------------------------------------------------
# probability -> report pipeline
# --------------------------------------------------------------------------

def decisions_to_tags(clip_probs, classes, tau):
    return {classes[j] for j in np.flatnonzero(np.asarray(clip_probs) > tau)}


def evaluate_run(clip_probs: Dict[str, np.ndarray],
                 frame_probs: Dict[str, np.ndarray],
                 durations: Dict[str, float],
                 frame_duration_s: float,
                 ref_events: Dict[str, List[Event]],
                 classes: Sequence[str],
                 config: MetricConfig = MetricConfig()):
    """Full scoring pipeline; returns (clip, segment, event) reports."""
    classes = list(classes)
    pred_tags = {cid: decisions_to_tags(p, classes, config.threshold)
                 for cid, p in clip_probs.items()}
    ref_tags = {cid: {e[2] for e in ref_events.get(cid, [])} for cid in durations}
    clip_report = clip_micro_f1(pred_tags, ref_tags)

    pred_events: Dict[str, List[Event]] = {}
    for cid, probs in frame_probs.items():
        decisions = threshold(probs, config.threshold)
        decisions = median_filter(decisions, config.median_window)
        pred_events[cid] = decode_events(decisions, frame_duration_s, classes)
    refs = {cid: ref_events.get(cid, []) for cid in durations}
    segment_report = segment_micro_f1(pred_events, refs, durations, config.segment_s)
    event_report = event_macro_f1(pred_events, refs, config.onset_collar_s,
                                  config.offset_ratio, config.offset_min_s)
    return clip_report, segment_report, event_report


def report_lines(name: str, report: F1Report) -> List[str]:
    """Serialize one report: a summary line plus per-class lines when present."""
    def fmt(tag, rep):
        return (f"{tag}\t{rep.precision:.6f}\t{rep.recall:.6f}\t{rep.f1:.6f}"
                f"\t{rep.tp}\t{rep.fp}\t{rep.fn}")

    lines = [fmt(name, report)]
    if report.per_class is not None:
        for cls in sorted(report.per_class):
            lines.append(fmt(f"{name}/{cls}", report.per_class[cls]))
    return lines
