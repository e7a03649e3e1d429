"""HMM machinery shared by the diarizer and the aligner.

Models are built from *units* (speaker tokens or phones), each a left-to-right
chain of emitting states.  Every state owns a probability density ("pdf"),
indexed globally; a per-utterance :class:`Graph` lays unit instances out as a
dense transition matrix over graph states that point back to those pdfs.

Transition parameters are one self-loop probability per pdf.  The mass that
leaves a state is shared among its successors by fixed branch weights, so
re-estimating loop probabilities and emissions is a plain EM step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import AlignmentFailure, DimensionError, ValidationError

LOG_2PI = np.log(2.0 * np.pi)
NEG_INF = -np.inf


@dataclass
class DiagGmm:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        K = self.weights.size
        if self.means.shape[0] != K or self.variances.shape != self.means.shape:
            raise DimensionError(
                f"inconsistent GMM shapes: weights {self.weights.shape}, "
                f"means {self.means.shape}, variances {self.variances.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValidationError("GMM weights must be non-negative and sum to 1")
        if np.any(self.variances <= 0):
            raise ValidationError("GMM variances must be positive")

    @property
    def num_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def single(cls, mean, var):
        return cls(np.ones(1), np.asarray(mean)[None, :], np.asarray(var)[None, :])

    def copy(self):
        return DiagGmm(self.weights.copy(), self.means.copy(), self.variances.copy())

    def component_log_likelihood(self, X):
        """``(T, K)`` matrix of ``log w_k + log N(x_t; mu_k, var_k)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.dim:
            raise DimensionError(f"features have {X.shape[1]} dims, GMM has {self.dim}")
        inv = 1.0 / self.variances
        const = -0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(axis=1)
                        + (self.means ** 2 * inv).sum(axis=1))
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return (logw + const)[None, :] - 0.5 * (X ** 2) @ inv.T + X @ (self.means * inv).T

    def log_likelihood(self, X):
        return logsumexp(self.component_log_likelihood(X), axis=1)


class GmmStats:
    """Occupancy-weighted zeroth, first and second order statistics."""

    def __init__(self, num_components, dim):
        self.n = np.zeros(num_components)
        self.s1 = np.zeros((num_components, dim))
        self.s2 = np.zeros((num_components, dim))

    def accumulate(self, gmm, X, gamma):
        keep = gamma > 1e-12
        if not keep.any():
            return
        X, gamma = X[keep], gamma[keep]
        comp = gmm.component_log_likelihood(X)
        post = np.exp(comp - logsumexp(comp, axis=1, keepdims=True)) * gamma[:, None]
        self.n += post.sum(axis=0)
        self.s1 += post.T @ X
        self.s2 += post.T @ (X * X)

    def __iadd__(self, other):
        self.n += other.n
        self.s1 += other.s1
        self.s2 += other.s2
        return self


def reestimate_gmm(gmm, stats, var_floor, min_occupancy=1e-6):
    """ML update; components without data keep their previous parameters."""
    total = stats.n.sum()
    if total <= min_occupancy:
        return gmm.copy()
    weights = stats.n / total
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    live = stats.n > min_occupancy
    means[live] = stats.s1[live] / stats.n[live, None]
    variances[live] = stats.s2[live] / stats.n[live, None] - means[live] ** 2
    variances = np.maximum(variances, var_floor[None, :])
    return DiagGmm(weights / weights.sum(), means, variances)


def split_gmm(gmm, max_components, epsilon=0.2, min_occupancy=None, occupancy=None):
    """Binary-split the heaviest components (means moved by +/- epsilon sigma)."""
    K = gmm.num_components
    room = max_components - K
    if room <= 0:
        return gmm.copy()
    order = np.argsort(-gmm.weights, kind="stable")
    if occupancy is not None and min_occupancy is not None:
        order = [k for k in order if occupancy[k] >= min_occupancy]
    chosen = list(order[:min(room, K)])
    if not chosen:
        return gmm.copy()
    w, mu, var = list(gmm.weights), list(gmm.means), list(gmm.variances)
    for k in chosen:
        delta = epsilon * np.sqrt(gmm.variances[k])
        w[k] = gmm.weights[k] / 2.0
        mu[k] = gmm.means[k] + delta
        w.append(gmm.weights[k] / 2.0)
        mu.append(gmm.means[k] - delta)
        var.append(gmm.variances[k].copy())
    w = np.array(w)
    return DiagGmm(w / w.sum(), np.array(mu), np.array(var))


# ---------------------------------------------------------------------------
# graphs


@dataclass
class Graph:
    """Dense HMM over graph states.

    ``trans[i, j]`` is the probability of moving from state ``i`` to ``j``
    (self-loops on the diagonal); rows may sum to less than one when part of
    the mass leaves through ``final``.  ``unit_pos`` tags every state with
    the unit instance it belongs to and ``unit_label`` names that instance.
    """

    state_pdf: np.ndarray
    trans: np.ndarray
    init: np.ndarray
    final: np.ndarray
    unit_pos: np.ndarray
    unit_label: list
    state_index: np.ndarray = field(default=None)

    @property
    def num_states(self):
        return self.state_pdf.size

    @property
    def log_trans(self):
        with np.errstate(divide="ignore"):
            return np.log(self.trans)


@dataclass(frozen=True)
class Unit:
    """A left-to-right chain; ``pdfs`` lists the pdf id of each state."""

    label: str
    pdfs: tuple


def build_chain_graph(slots, loop_prob, end_required=True):
    """Linear graph from a list of slots.

    Each slot is ``(alternatives, optional)`` where ``alternatives`` is a list
    of :class:`Unit`.  A path visits every non-optional slot in order and at
    most one alternative of each slot.  ``loop_prob`` maps pdf id to its
    self-loop probability.  The path must end on leaving the last state of a
    unit after which only optional slots remain.
    """
    states_pdf, states_pos, states_idx = [], [], []
    labels = []
    entries, exits = [], []
    for s, (alts, _opt) in enumerate(slots):
        ent, ex = [], []
        for unit in alts:
            pos = len(labels)
            labels.append(unit.label)
            first = len(states_pdf)
            for k, pdf in enumerate(unit.pdfs):
                states_pdf.append(pdf)
                states_pos.append(pos)
                states_idx.append(k)
            ent.append(first)
            ex.append(len(states_pdf) - 1)
        entries.append(ent)
        exits.append(ex)
    S = len(states_pdf)
    state_pdf = np.array(states_pdf, dtype=np.int64)
    loops = np.array([loop_prob[p] for p in state_pdf]) if S else np.zeros(0)
    trans = np.zeros((S, S))
    init = np.zeros(S)
    final = np.zeros(S)
    n = len(slots)

    def successors(after):
        # entry states reachable once slot ``after`` is done, plus end flag
        targets = []
        j = after + 1
        while j < n:
            targets.extend(entries[j])
            if not slots[j][1]:
                return targets, False
            j += 1
        return targets, True

    for i in range(S):
        trans[i, i] = loops[i]
    for s in range(n):
        for ex in exits[s]:
            first = ex
            while first > 0 and states_pos[first - 1] == states_pos[ex]:
                first -= 1
            for k in range(first, ex):
                trans[k, k + 1] = 1.0 - loops[k]
        targets, can_end = successors(s)
        branches = len(targets) + (1 if can_end else 0)
        for ex in exits[s]:
            leave = 1.0 - loops[ex]
            for t in targets:
                trans[ex, t] += leave / branches
            if can_end:
                final[ex] = leave / branches
    start_targets, start_can_end = successors(-1)
    if start_can_end and not start_targets:
        raise ValidationError("graph has no emitting states")
    for t in start_targets:
        init[t] = 1.0 / len(start_targets)
    return Graph(state_pdf, trans, init, final, np.array(states_pos, dtype=np.int64),
                 labels, np.array(states_idx, dtype=np.int64))


def min_path_length(graph):
    """Fewest frames of any complete path (breadth-first over arcs)."""
    S = graph.num_states
    reach = graph.init > 0
    for t in range(1, S + 2):
        if np.any(reach & (graph.final > 0)):
            return t
        reach = (reach.astype(float) @ (graph.trans > 0)) > 0
    return None


# ---------------------------------------------------------------------------
# inference


def forward_backward(graph, loglik):
    """Scaled forward-backward.

    ``loglik`` is ``(T, S)`` per graph state.  Returns ``(log_prob, gamma,
    xi_sum)`` with ``gamma`` the ``(T, S)`` state occupancies and ``xi_sum``
    the ``(S, S)`` expected transition counts.
    """
    T, S = loglik.shape
    A = graph.trans
    alpha = np.zeros((T, S))
    btil = np.zeros((T, S))
    scale = np.zeros(T)
    logp = 0.0
    pred = graph.init
    for t in range(T):
        if t:
            pred = alpha[t - 1] @ A
        live = pred > 0
        if not live.any():
            raise AlignmentFailure(f"no live states at frame {t}")
        ll = loglik[t]
        m = ll[live].max()
        if not np.isfinite(m):
            raise AlignmentFailure(f"all live states have zero likelihood at frame {t}")
        b = np.zeros(S)
        b[live] = np.exp(ll[live] - m)
        a = pred * b
        c = a.sum()
        if c <= 0:
            raise AlignmentFailure(f"forward mass vanished at frame {t}")
        alpha[t] = a / c
        btil[t] = b
        scale[t] = c
        logp += np.log(c) + m
    f = alpha[-1] @ graph.final
    if f <= 0:
        raise AlignmentFailure("no complete path through the graph")
    logp += np.log(f)
    beta = np.zeros((T, S))
    beta[-1] = graph.final / f
    for t in range(T - 2, -1, -1):
        beta[t] = A @ (btil[t + 1] * beta[t + 1]) / scale[t + 1]
    gamma = alpha * beta
    nxt = btil[1:] * beta[1:] / scale[1:, None]
    xi_sum = A * (alpha[:-1].T @ nxt)
    return logp, gamma, xi_sum


def viterbi(graph, loglik):
    """Best state path and its log probability."""
    T, S = loglik.shape
    logA = graph.log_trans
    with np.errstate(divide="ignore"):
        log_init = np.log(graph.init)
        log_final = np.log(graph.final)
    delta = log_init + loglik[0]
    back = np.zeros((T, S), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + logA
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(S)] + loglik[t]
    total = delta + log_final
    last = int(np.argmax(total))
    score = total[last]
    if not np.isfinite(score):
        raise AlignmentFailure(
            f"no complete path through the graph for {T} frames")
    path = np.empty(T, dtype=np.int64)
    path[-1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(score)


def path_log_prob(graph, loglik, path):
    """Log probability of one explicit state path (used by brute-force checks)."""
    with np.errstate(divide="ignore"):
        lp = np.log(graph.init[path[0]]) + loglik[0, path[0]]
        for t in range(1, len(path)):
            lp += np.log(graph.trans[path[t - 1], path[t]]) + loglik[t, path[t]]
        lp += np.log(graph.final[path[-1]])
    return lp


def collapse_path(graph, path):
    """Runs of unit instances along a state path: ``(start, stop, label)``."""
    pos = graph.unit_pos[path]
    runs = []
    i = 0
    T = len(path)
    while i < T:
        j = i + 1
        while j < T and pos[j] == pos[i]:
            j += 1
        runs.append((i, j, graph.unit_label[pos[i]]))
        i = j
    return runs


# ---------------------------------------------------------------------------
# embedded training over a set of per-utterance graphs


class GmmPdfSet:
    """Emission model: one :class:`DiagGmm` per pdf id plus loop probabilities."""

    def __init__(self, gmms, loop_prob):
        self.gmms = list(gmms)
        self.loop_prob = np.asarray(loop_prob, dtype=np.float64)

    @property
    def dim(self):
        return self.gmms[0].dim

    def __len__(self):
        return len(self.gmms)

    def score(self, X):
        """``(T, num_pdfs)`` log-likelihoods."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.dim:
            raise DimensionError(
                f"features have {X.shape[1]} dims, model expects {self.dim}")
        return np.column_stack([g.log_likelihood(X) for g in self.gmms])

    def copy(self):
        return GmmPdfSet([g.copy() for g in self.gmms], self.loop_prob.copy())


def e_step(pdfs, utterances):
    """Accumulate statistics over ``(X, graph)`` pairs.

    Returns ``(total_log_prob, gmm_stats, loop_counts, leave_counts, occupancy)``.
    """
    P = len(pdfs)
    stats = [GmmStats(g.num_components, g.dim) for g in pdfs.gmms]
    loops = np.zeros(P)
    leaves = np.zeros(P)
    occ = np.zeros(P)
    total = 0.0
    for X, graph in utterances:
        ll = pdfs.score(X)[:, graph.state_pdf]
        logp, gamma, xi = forward_backward(graph, ll)
        total += logp
        diag = np.diag(xi).copy()
        out = xi.sum(axis=1) - diag
        state_occ = gamma.sum(axis=0)
        # the final frame's exit counts as leaving
        out = out + gamma[-1] * (graph.final > 0)
        np.add.at(loops, graph.state_pdf, diag)
        np.add.at(leaves, graph.state_pdf, out)
        np.add.at(occ, graph.state_pdf, state_occ)
        for p in np.unique(graph.state_pdf):
            g = gamma[:, graph.state_pdf == p].sum(axis=1)
            stats[p].accumulate(pdfs.gmms[p], X, g)
    return total, stats, loops, leaves, occ


def m_step(pdfs, stats, loops, leaves, var_floor, min_loop=1e-3, max_loop=0.999,
           frozen=()):
    gmms = []
    loop_prob = pdfs.loop_prob.copy()
    for p, (g, st) in enumerate(zip(pdfs.gmms, stats)):
        if p in frozen:
            gmms.append(g.copy())
            continue
        gmms.append(reestimate_gmm(g, st, var_floor))
        denom = loops[p] + leaves[p]
        if denom > 1e-8:
            loop_prob[p] = np.clip(loops[p] / denom, min_loop, max_loop)
    return GmmPdfSet(gmms, loop_prob)


@dataclass
class TrainResult:
    pdfs: GmmPdfSet
    history: list
    utterances: list
    initial_occupancy: np.ndarray


def train_embedded(pdfs, features, make_graphs, iterations, var_floor, max_components=1,
                   split_start=2, split_epsilon=0.2, min_split_occupancy=20.0,
                   max_halvings=6, log=None):
    """Embedded Baum-Welch over ``(X, graph)`` pairs.

    ``make_graphs(pdfs)`` rebuilds the per-utterance graphs, which depend on
    the loop probabilities.  From iteration ``split_start`` on, each
    iteration binary-splits the Gaussians towards ``max_components``; a split
    is accepted only if the corpus log-likelihood does not drop, otherwise
    the perturbation is halved (``max_halvings`` times at most) and the split
    is skipped.  That keeps the likelihood history monotone.
    """
    features = list(features)
    utts = list(zip(features, make_graphs(pdfs)))
    ll, stats, loops, leaves, occ = e_step(pdfs, utts)
    history = [ll]
    initial_occ = occ
    for it in range(iterations):
        pdfs = m_step(pdfs, stats, loops, leaves, var_floor)
        utts = list(zip(features, make_graphs(pdfs)))
        result = None
        if it + 1 >= split_start and any(g.num_components < max_components for g in pdfs.gmms):
            eps = split_epsilon
            for _ in range(max_halvings):
                split = GmmPdfSet([split_gmm(g, max_components, eps, min_split_occupancy, st.n)
                                   for g, st in zip(pdfs.gmms, stats)], pdfs.loop_prob)
                cand = e_step(split, utts)
                if cand[0] >= history[-1]:
                    pdfs, result = split, cand
                    break
                eps /= 2.0
            else:
                if log:
                    log.info("iteration %d: split rejected", it + 1)
        if result is None:
            result = e_step(pdfs, utts)
        ll, stats, loops, leaves, occ = result
        history.append(ll)
        if log:
            log.debug("iteration %d: log-likelihood %.3f", it + 1, ll)
    return TrainResult(pdfs, history, utts, initial_occ)
