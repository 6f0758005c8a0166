"""Cross-camera retrieval evaluation: distances, CMC, mAP, repeated trials.

Report files are plain text, one ``key = value`` per line after the header
``# pitreid retrieval report v1``. Floats are written with ``repr`` so that a
report can be read back bit-exactly. Keys::

    config.<name>          echo of the run configuration
    num_queries            queries evaluated
    num_valid_queries      queries with at least one cross-camera match
    mAP
    rank<k>                CMC at the requested ranks
    cmc                    full CMC curve, comma separated
    trial.<i>.mAP, trial.<i>.rank<k>   per-trial values for repeated trials
"""
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

REPORT_HEADER = "# pitreid retrieval report v1"
DEFAULT_RANKS = (1, 5, 10, 20)


class RetrievalError(ValueError):
    pass


def _pyramid_array(x):
    """Accept a FeaturePyramid, a Tensor or an array; return float64 [E, c]."""
    x = getattr(x, "features", x)
    x = getattr(x, "data", x)
    return np.asarray(x, dtype=np.float64)


def distance(a, b, mode="concat"):
    """Distance between two video pyramids given as [E, c] arrays.

    ``concat``: Euclidean distance of the concatenated branch features.
    ``branch_sum``: sum of per-branch Euclidean distances.
    """
    a, b = _pyramid_array(a), _pyramid_array(b)
    if a.shape != b.shape:
        raise RetrievalError(f"pyramid structures differ: {a.shape} vs {b.shape}")
    diff = (a - b).reshape(a.shape[0] if a.ndim > 1 else 1, -1)
    if mode == "concat":
        return float(np.sqrt((diff * diff).sum()))
    if mode == "branch_sum":
        return float(np.sqrt((diff * diff).sum(axis=1)).sum())
    raise RetrievalError(f"unknown distance mode {mode!r}")


def distance_matrix(query, gallery, mode="concat"):
    """[Q, G] distances for pyramid stacks [Q, E, c] and [G, E, c] (or flat [n, d])."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim == 2:
        q, g = q[:, None], g[:, None]
    if q.shape[1:] != g.shape[1:]:
        raise RetrievalError(f"pyramid structures differ: {q.shape[1:]} vs {g.shape[1:]}")
    diff = q[:, None] - g[None, :]
    per_branch = (diff * diff).sum(axis=-1)
    if mode == "concat":
        return np.sqrt(per_branch.sum(axis=-1))
    if mode == "branch_sum":
        return np.sqrt(per_branch).sum(axis=-1)
    raise RetrievalError(f"unknown distance mode {mode!r}")


def _ap_exact(matches):
    hits = np.flatnonzero(np.asarray(matches, dtype=bool))
    if hits.size == 0:
        return Fraction(0)
    return sum(Fraction(n + 1, int(r) + 1) for n, r in enumerate(hits)) / hits.size


def average_precision(matches):
    """AP of a boolean relevance vector in ranked order.

    Accumulated as an exact rational and rounded once, so e.g. hits at ranks
    1 and 3 give exactly the double nearest to 5/6.
    """
    return float(_ap_exact(matches))


@dataclass
class RetrievalReport:
    cmc: np.ndarray
    mAP: float
    num_valid_queries: int
    num_queries: int
    ranks: tuple = DEFAULT_RANKS
    rankings: list = field(default_factory=list)
    average_precisions: np.ndarray = None
    trials: list = field(default_factory=list)

    def rank(self, k):
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self):
        out = {f"rank{k}": self.rank(k) for k in self.ranks}
        out["mAP"] = float(self.mAP)
        return out

    def to_text(self, config=None):
        lines = [REPORT_HEADER]
        for key, value in (config or {}).items():
            lines.append(f"config.{key} = {value}")
        lines.append(f"num_queries = {self.num_queries}")
        lines.append(f"num_valid_queries = {self.num_valid_queries}")
        lines.append(f"mAP = {float(self.mAP)!r}")
        for k in self.ranks:
            lines.append(f"rank{k} = {self.rank(k)!r}")
        lines.append("cmc = " + ",".join(repr(float(v)) for v in self.cmc))
        for i, trial in enumerate(self.trials):
            lines.append(f"trial.{i}.mAP = {float(trial.mAP)!r}")
            for k in trial.ranks:
                lines.append(f"trial.{i}.rank{k} = {trial.rank(k)!r}")
        return "\n".join(lines) + "\n"


def read_report(text):
    """Parse a report file into a flat dict of strings/floats (config kept as str)."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != REPORT_HEADER:
        raise RetrievalError("not a pitreid retrieval report")
    out = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("config."):
            out[key] = value
        elif key == "cmc":
            out[key] = [float(v) for v in value.split(",")] if value else []
        elif key.startswith("num_"):
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def evaluate(query_feats, query_ids, query_cams, gallery_feats, gallery_ids, gallery_cams,
             query_vids=None, gallery_vids=None, ranks=DEFAULT_RANKS, mode="concat", distmat=None):
    """Cross-camera CMC and mAP.

    Gallery entries sharing both identity and camera with the query are
    dropped; the rest are ranked by ascending distance with ties broken by
    video id. Queries without any remaining correct match are counted but do
    not enter CMC or mAP.
    """
    q_ids, q_cams = np.asarray(query_ids), np.asarray(query_cams)
    g_ids, g_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    if gallery_vids is None:
        gallery_vids = np.arange(len(g_ids))
    g_vids = np.asarray(gallery_vids)
    if len(set(g_vids.tolist())) != len(g_vids):
        raise RetrievalError("gallery video ids must be unique")
    if distmat is None:
        distmat = distance_matrix(query_feats, gallery_feats, mode)
    distmat = np.asarray(distmat, dtype=np.float64)
    n_q, n_g = distmat.shape
    if (n_q, n_g) != (len(q_ids), len(g_ids)):
        raise RetrievalError(f"distance matrix {distmat.shape} vs {len(q_ids)} queries, {len(g_ids)} gallery")
    tie_order = np.argsort(np.argsort(g_vids, kind="stable"), kind="stable")
    curve = np.zeros(n_g)
    aps, rankings = [], []
    for i in range(n_q):
        keep = ~((g_ids == q_ids[i]) & (g_cams == q_cams[i]))
        cand = np.flatnonzero(keep)
        order = cand[np.lexsort((tie_order[cand], distmat[i, cand]))]
        rankings.append(g_vids[order])
        matches = g_ids[order] == q_ids[i]
        if not matches.any():
            continue
        first = int(np.argmax(matches))
        curve[first:] += 1
        aps.append(_ap_exact(matches))
    valid = len(aps)
    if valid == 0:
        raise RetrievalError("no query has a cross-camera match in the gallery")
    return RetrievalReport(curve / valid, float(sum(aps) / valid), valid, n_q, tuple(ranks),
                           rankings, np.array([float(a) for a in aps]))


def average_reports(reports):
    """Arithmetic mean of CMC curves (cut to the shortest) and of mAP."""
    reports = list(reports)
    if not reports:
        raise RetrievalError("no reports to average")
    n = min(len(r.cmc) for r in reports)
    cmc = np.mean([r.cmc[:n] for r in reports], axis=0)
    return RetrievalReport(cmc, float(np.mean([r.mAP for r in reports])),
                           int(sum(r.num_valid_queries for r in reports)),
                           int(sum(r.num_queries for r in reports)),
                           reports[0].ranks, trials=reports)


def split_identities(ids, rng):
    """Random half/half identity split; returns (train_ids, test_ids)."""
    uniq = np.unique(ids)
    if len(uniq) < 4:
        raise RetrievalError(f"need at least 4 identities to split in halves, have {len(uniq)}")
    perm = rng.permutation(uniq)
    half = len(uniq) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def repeated_trials(ids, num_trials, seed, run_trial):
    """Average ``run_trial(train_ids, test_ids, trial_seed)`` over random splits.

    ``run_trial`` trains on the first half of the identities and returns the
    RetrievalReport measured on the second half.
    """
    if num_trials < 1:
        raise RetrievalError("num_trials must be >= 1")
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(num_trials):
        train_ids, test_ids = split_identities(ids, rng)
        trial_seed = int(rng.integers(0, 2**31 - 1))
        reports.append(run_trial(train_ids, test_ids, trial_seed))
    if num_trials == 1:
        only = reports[0]
        return RetrievalReport(only.cmc, only.mAP, only.num_valid_queries, only.num_queries,
                               only.ranks, only.rankings, only.average_precisions, trials=reports)
    return average_reports(reports)
