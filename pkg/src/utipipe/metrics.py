"""Evaluation measures: collar-based detection P/R/F1, DER, word alignment
P/R/F1 and WER.

Times are quantised to milliseconds and all interval arithmetic runs on
integers (half-millisecond units, so a collar of any whole number of
milliseconds splits evenly), which makes every score exact.  The collar is
applied around reference speech boundaries only.  Labels are fixed speaker
names, so no speaker mapping step is needed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError
from .session_io import NONSPEECH_LABELS

SPEAKERS = frozenset({"child", "therapist"})
_UNIT = 2000  # half-milliseconds per second


@dataclass(frozen=True)
class DetectionScores:
    precision: float
    recall: float
    f1: float
    retrieved_s: float
    relevant_s: float
    correct_s: float


@dataclass(frozen=True)
class DiarizationScores:
    der: float
    confusion: float
    missed: float
    false_alarm: float
    scored_s: float


def _q(t):
    return 2 * int(round(t * 1000.0))


def _quantized(labeling):
    return [(_q(s.start_s), _q(s.end_s), s.label) for s in labeling if _q(s.end_s) > _q(s.start_s)]


def _label_lookup(segs, points):
    starts = np.array([s for s, _, _ in segs], dtype=np.int64)
    ends = np.array([e for _, e, _ in segs], dtype=np.int64)
    idx = np.searchsorted(starts, points, side="right") - 1
    out = []
    for p, i in zip(points, idx):
        out.append(segs[i][2] if i >= 0 and p < ends[i] else None)
    return out


def timeline(ref, hyp, collar_s=0.1, is_speech=None):
    """Elementary intervals ``(duration, ref_label, hyp_label, scored)``.

    Durations are integer half-milliseconds.

    Every boundary of a reference segment whose label passes ``is_speech``
    (default: every reference boundary) excludes ``collar_s / 2`` on
    either side from scoring.
    """
    is_speech = is_speech or (lambda l: True)
    r, h = _quantized(ref), _quantized(hyp)
    half = int(round(collar_s * 1000.0))  # collar/2 in half-ms units
    points = set()
    zones = []
    for s, e, lab in r:
        points.update((s, e))
        if is_speech(lab) and half > 0:
            zones.extend([(s - half, s + half), (e - half, e + half)])
    for s, e, _ in h:
        points.update((s, e))
    for a, b in zones:
        points.update((a, b))
    if not points:
        return []
    pts = np.array(sorted(points), dtype=np.int64)
    mids2 = pts[:-1] + pts[1:]           # twice the midpoint, stays integral
    rl = _label_lookup([(2 * s, 2 * e, l) for s, e, l in r], mids2)
    hl = _label_lookup([(2 * s, 2 * e, l) for s, e, l in h], mids2)
    if zones:
        z = np.array(zones, dtype=np.int64) * 2
        z = z[np.argsort(z[:, 0])]
        inside = np.zeros(mids2.size, dtype=bool)
        for a, b in z:
            inside |= (mids2 > a) & (mids2 < b)
    else:
        inside = np.zeros(mids2.size, dtype=bool)
    durs = np.diff(pts)
    return [(int(d), a, b, not c) for d, a, b, c in zip(durs, rl, hl, inside) if d > 0]


def _detection_counts(ref, hyp, match, is_target_ref, is_target_hyp, collar_s, is_speech=None):
    ret = rel = cor = 0
    for d, rlab, hlab, scored in timeline(ref, hyp, collar_s, is_speech):
        if not scored:
            continue
        rt = rlab is not None and is_target_ref(rlab)
        ht = hlab is not None and is_target_hyp(hlab)
        rel += d * rt
        ret += d * ht
        cor += d * (rt and ht and match(rlab, hlab))
    return np.array([ret, rel, cor], dtype=np.int64)


def prf_from_counts(counts):
    """Scores from summed ``(retrieved, relevant, correct)`` accumulators."""
    ret, rel, cor = (int(c) for c in counts)
    if rel == 0:
        raise UndefinedMetricError("no scored reference target time: recall is undefined")
    p = cor / ret if ret else 0.0
    r = cor / rel
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return DetectionScores(p, r, f1, ret / _UNIT, rel / _UNIT, cor / _UNIT)


def detection_counts(ref, hyp, target_label="child", collar_s=0.1):
    is_t = lambda l: l == target_label
    return _detection_counts(ref, hyp, lambda a, b: True, is_t, is_t, collar_s)


def detection_prf(ref, hyp, target_label="child", collar_s=0.1):
    """Precision / recall of ``target_label`` time with a reference collar."""
    return prf_from_counts(detection_counts(ref, hyp, target_label, collar_s))


def alignment_counts(ref_words, hyp_words, collar_s=0.1):
    is_word = lambda l: l not in NONSPEECH_LABELS
    return _detection_counts(ref_words, hyp_words, lambda a, b: a == b,
                             is_word, is_word, collar_s)


def alignment_prf(ref_words, hyp_words=None, collar_s=0.1):
    """Word alignment P/R/F1: correct time needs matching word labels.

    Either labelling, or a list of ``(ref, hyp)`` pairs to micro-average.
    """
    if isinstance(ref_words, list) and hyp_words is None:
        counts = sum(alignment_counts(r, h, collar_s) for r, h in ref_words)
        return prf_from_counts(counts)
    return prf_from_counts(alignment_counts(ref_words, hyp_words, collar_s))


def der_counts(ref, hyp, collar_s=0.1, labels=SPEAKERS):
    labels = frozenset(labels)
    sp = lambda l: l is not None and l in labels
    total = miss = fa = conf = 0
    for d, rlab, hlab, scored in timeline(ref, hyp, collar_s):
        if not scored:
            continue
        rs, hs = sp(rlab), sp(hlab)
        if rs:
            total += d
            if not hs:
                miss += d
            elif rlab != hlab:
                conf += d
        elif hs:
            fa += d
    return np.array([total, miss, fa, conf], dtype=np.int64)


def der_from_counts(counts):
    total, miss, fa, conf = (int(c) for c in counts)
    if total == 0:
        raise UndefinedMetricError("no scored reference speech: DER is undefined")
    m, f, c = 100.0 * miss / total, 100.0 * fa / total, 100.0 * conf / total
    # sum the integer counts so the decomposition identity is exact
    return DiarizationScores(100.0 * (miss + fa + conf) / total, c, m, f, total / _UNIT)


def der(ref, hyp, collar_s=0.1, labels=SPEAKERS):
    """Diarization error rate with missed / false-alarm / confusion split,
    each a percentage of scored reference speech."""
    return der_from_counts(der_counts(ref, hyp, collar_s, labels))


def wer(ref, hyp):
    """Word error rate from a minimum-edit alignment.

    Among alignments with the fewest errors the one with the fewest
    insertions plus deletions (so the most substitutions) is reported, then
    the fewest insertions.  Returns ``(wer_percent, S, I, D)``.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    if n == 0:
        raise UndefinedMetricError("empty reference: WER is undefined")
    # cost[i][j] = (errors, insertions + deletions, insertions, substitutions, deletions)
    cost = [[None] * (m + 1) for _ in range(n + 1)]
    cost[0][0] = (0, 0, 0, 0, 0)
    for i in range(n + 1):
        for j in range(m + 1):
            cands = []
            if i and j:
                e, gap, ins, s, d = cost[i - 1][j - 1]
                sub = int(ref[i - 1] != hyp[j - 1])
                cands.append((e + sub, gap, ins, s + sub, d))
            if j:
                e, gap, ins, s, d = cost[i][j - 1]
                cands.append((e + 1, gap + 1, ins + 1, s, d))
            if i:
                e, gap, ins, s, d = cost[i - 1][j]
                cands.append((e + 1, gap + 1, ins, s, d + 1))
            if cands:
                cost[i][j] = min(cands)
    e, _, ins, s, d = cost[n][m]
    return 100.0 * e / n, s, ins, d


# ---------------------------------------------------------------------------
# reports

REPORT_FIELDS = ("utt", "precision", "recall", "f1", "der", "conf", "miss", "fa", "wer")


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_report(rows, path, group_key=None):
    """CSV report; ``rows`` are dicts keyed by :data:`REPORT_FIELDS` (plus
    ``group_key`` when grouping)."""
    fields = list(REPORT_FIELDS) + ([group_key] if group_key else [])
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(f)) for f in fields])
    os.replace(tmp, path)
