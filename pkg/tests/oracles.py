"""Independent reference implementations used by the tests.

They favour obviousness over speed: explicit loops, direct definitions and
exhaustive enumeration.
"""

import itertools
from functools import lru_cache

import numpy as np


def eta_bruteforce(frames, W, hop=1):
    """Per-window mean over pixels of ``np.var`` along time."""
    T = frames.shape[0]
    flat = frames.reshape(T, -1).astype(np.float64)
    return np.array([np.var(flat[s:s + W], axis=0).mean() for s in range(0, T - W + 1, hop)])


def grid_labels(labeling, n_ms):
    """Label of every 1 ms cell ``[k, k+1)`` (None where unlabelled)."""
    out = [None] * n_ms
    for s, e, lab in labeling:
        for k in range(int(round(s * 1000)), int(round(e * 1000))):
            if 0 <= k < n_ms:
                out[k] = lab
    return out


def grid_scored(ref, n_ms, collar_s):
    """Cells outside ``collar/2`` of every reference boundary."""
    half = collar_s * 1000 / 2.0
    ok = [True] * n_ms
    for s, e, _ in ref:
        for b in (s * 1000, e * 1000):
            for k in range(n_ms):
                if k + 1 > b - half and k < b + half:
                    ok[k] = False
    return ok


def grid_detection(ref, hyp, target, collar_s, n_ms, match_labels=False):
    r, h, ok = grid_labels(ref, n_ms), grid_labels(hyp, n_ms), grid_scored(ref, n_ms, collar_s)
    if match_labels:
        is_t = lambda l: l is not None and l not in ("silence", "sil", "noise")
    else:
        is_t = lambda l: l == target
    ret = sum(1 for k in range(n_ms) if ok[k] and is_t(h[k]))
    rel = sum(1 for k in range(n_ms) if ok[k] and is_t(r[k]))
    cor = sum(1 for k in range(n_ms) if ok[k] and is_t(r[k]) and is_t(h[k])
              and (not match_labels or r[k] == h[k]))
    p = cor / ret if ret else 0.0
    rc = cor / rel
    return p, rc


def grid_der(ref, hyp, collar_s, n_ms, speakers=("child", "therapist")):
    r, h, ok = grid_labels(ref, n_ms), grid_labels(hyp, n_ms), grid_scored(ref, n_ms, collar_s)
    total = miss = fa = conf = 0
    for k in range(n_ms):
        if not ok[k]:
            continue
        rs, hs = r[k] in speakers, h[k] in speakers
        total += rs
        miss += rs and not hs
        fa += hs and not rs
        conf += rs and hs and r[k] != h[k]
    return 100.0 * (miss + fa + conf) / total, 100.0 * conf / total


def edit_distance(ref, hyp):
    """Plain recursive minimum edit distance (no tie-break bookkeeping)."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1,
                   d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


def _all_path_scores(graph, loglik):
    T, S = loglik.shape
    paths = np.array(list(itertools.product(range(S), repeat=T)), dtype=np.int64).reshape(-1, T)
    with np.errstate(divide="ignore"):
        li, lt, lf = np.log(graph.init), np.log(graph.trans), np.log(graph.final)
    score = li[paths[:, 0]] + loglik[0, paths[:, 0]]
    for t in range(1, T):
        score = score + lt[paths[:, t - 1], paths[:, t]] + loglik[t, paths[:, t]]
    return paths, score + lf[paths[:, -1]]


def best_path_bruteforce(graph, loglik):
    """Score every state sequence; returns (best score, best path)."""
    paths, score = _all_path_scores(graph, loglik)
    k = int(np.argmax(score))
    return score[k], tuple(paths[k])


def total_prob_bruteforce(graph, loglik):
    """log of the summed probability of every path."""
    _, score = _all_path_scores(graph, loglik)
    m = score.max()
    return m + np.log(np.sum(np.exp(score - m)))


def best_path_dfs(graph, loglik):
    """Exhaustive search over paths that only follow nonzero arcs.

    Same answer as :func:`best_path_bruteforce` but feasible for sparse
    left-to-right graphs with a dozen or more states.
    """
    T, S = loglik.shape
    with np.errstate(divide="ignore"):
        li, lt, lf = np.log(graph.init), np.log(graph.trans), np.log(graph.final)
    succ = [np.flatnonzero(graph.trans[s] > 0) for s in range(S)]
    best = [-np.inf, None]

    def walk(path, score):
        t = len(path)
        if t == T:
            total = score + lf[path[-1]]
            if total > best[0]:
                best[0], best[1] = total, tuple(path)
            return
        for nxt in succ[path[-1]]:
            walk(path + [nxt], score + lt[path[-1], nxt] + loglik[t, nxt])

    for s in np.flatnonzero(graph.init > 0):
        walk([s], li[s] + loglik[0, s])
    return best[0], best[1]


def wer_counts_bruteforce(ref, hyp):
    """(S, I, D) of the best edit alignment, found by listing every alignment.

    Best means fewest errors, then fewest insertions plus deletions, then
    fewest insertions.  Only feasible for short word strings.
    """
    ref, hyp = tuple(ref), tuple(hyp)
    best = [None]

    def walk(i, j, s, ins, d):
        if i == len(ref) and j == len(hyp):
            key = (s + ins + d, ins + d, ins)
            if best[0] is None or key < best[0][0]:
                best[0] = (key, (s, ins, d))
            return
        if i < len(ref) and j < len(hyp):
            walk(i + 1, j + 1, s + (ref[i] != hyp[j]), ins, d)
        if j < len(hyp):
            walk(i, j + 1, s, ins + 1, d)
        if i < len(ref):
            walk(i + 1, j, s, ins, d + 1)

    walk(0, 0, 0, 0, 0)
    return best[0][1]
