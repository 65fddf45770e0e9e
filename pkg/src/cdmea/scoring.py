"""Similarity scoring, prediction fusion, and counterfactual effect estimation.

Branch scores are cosine similarities of L2-normalized embeddings, fused by
an attentive weighted sum. Counterfactual worlds block branches by zeroing
their scores (a blocked modality carries no similarity information), which
makes the all-blocked reference world score exactly 0 and reduces the
effect estimates to:

    TE  = fused factual score
    NDE = fused score with only the debias-target branch active
    TIE = TE - beta * NDE
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BRANCHES = ("v", "g", "m")


@dataclass
class FusionParams:
    """Learnable per-branch logits; weights are their softmax."""

    phi_v: float = 0.0
    phi_g: float = 0.0
    phi_m: float = 0.0

    @classmethod
    def uniform(cls) -> "FusionParams":
        return cls(0.0, 0.0, 0.0)

    def weights(self) -> tuple[float, float, float]:
        phis = (self.phi_v, self.phi_g, self.phi_m)
        top = max(phis)
        exps = [math.exp(p - top) for p in phis]
        total = sum(exps)
        return tuple(e / total for e in exps)


@dataclass
class CausalScores:
    """Effect decomposition for one candidate pair.

    In the general mediation formulation the reference world would use the
    mediator value induced by the no-treatment input; because blocked
    branches score exactly zero here, that reference outcome collapses to 0
    and te / nde are the factual and single-branch fused scores directly.
    """

    y_v: float
    y_g: float
    y_m: float
    y_factual: float
    y_counterfactual: float
    te: float
    nde: float
    tie: float
    beta: float


def _as_rows(z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("similarity operands must be 1-D vectors")
    return arr


def similarity_score(z_a, z_b) -> float:
    """Dot product of two unit (or zero) rows; zero rows score 0."""
    a, b = _as_rows(z_a), _as_rows(z_b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def _check_blocked(blocked) -> frozenset:
    blocked = frozenset(blocked)
    unknown = blocked - set(BRANCHES)
    if unknown:
        raise ValueError(f"unknown branch in blocked set: {sorted(unknown)}")
    return blocked


def fuse_scores(y_v: float, y_g: float, y_m: float, params: FusionParams,
                blocked=frozenset()) -> float:
    """Attentive weighted sum of branch scores.

    Blocked branches contribute w_k * 0; the weights are not renormalized
    over the surviving branches, so counterfactual worlds keep the factual
    model's weighting.
    """
    blocked = _check_blocked(blocked)
    w_v, w_g, w_m = params.weights()
    total = 0.0
    for key, w, y in (("v", w_v, y_v), ("g", w_g, y_g), ("m", w_m, y_m)):
        if key not in blocked:
            total += w * y
    return total


def _check_beta(beta: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return float(beta)


def _counterfactual_blocked(debias_target: str) -> frozenset:
    if debias_target == "visual":
        return frozenset({"g", "m"})
    if debias_target == "graph":
        return frozenset({"v", "m"})
    raise ValueError("debias_target must be 'visual' or 'graph'")


def causal_scores(y_v: float, y_g: float, y_m: float, params: FusionParams,
                  beta: float, debias_target: str = "visual") -> CausalScores:
    """Compute TE / NDE / TIE for one candidate pair."""
    beta = _check_beta(beta)
    cf_blocked = _counterfactual_blocked(debias_target)
    y_factual = fuse_scores(y_v, y_g, y_m, params)
    y_cf = fuse_scores(y_v, y_g, y_m, params, blocked=cf_blocked)
    y_null = fuse_scores(y_v, y_g, y_m, params, blocked=frozenset(BRANCHES))
    te = y_factual - y_null
    nde = y_cf - y_null
    tie = te - beta * nde
    return CausalScores(y_v=y_v, y_g=y_g, y_m=y_m, y_factual=y_factual,
                        y_counterfactual=y_cf, te=te, nde=nde, tie=tie, beta=beta)


@dataclass
class CausalScoreMatrix:
    """Dense effect matrices for a query set against a candidate set."""

    query_ids: np.ndarray
    candidate_ids: np.ndarray
    y_v: np.ndarray
    y_g: np.ndarray
    y_m: np.ndarray
    te: np.ndarray
    nde: np.ndarray
    tie: np.ndarray
    beta: float
    debias_target: str

    def entry(self, qi: int, ci: int) -> CausalScores:
        """CausalScores for (row qi, column ci) of the matrices."""
        w = (self.y_v[qi, ci], self.y_g[qi, ci], self.y_m[qi, ci])
        return CausalScores(
            y_v=float(w[0]), y_g=float(w[1]), y_m=float(w[2]),
            y_factual=float(self.te[qi, ci]),
            y_counterfactual=float(self.nde[qi, ci]),
            te=float(self.te[qi, ci]), nde=float(self.nde[qi, ci]),
            tie=float(self.tie[qi, ci]), beta=self.beta)


def score_matrix(embeds_1, embeds_2, params: FusionParams, beta: float,
                 debias_target: str = "visual",
                 query_ids=None, candidate_ids=None) -> CausalScoreMatrix:
    """Full causal scores for every (query, candidate) combination.

    embeds_1 / embeds_2 are the per-graph ModalityEmbeddings; queries index
    graph 1 rows and candidates graph 2 rows. Swap the arguments to score
    the opposite alignment direction.
    """
    beta = _check_beta(beta)
    cf_blocked = _counterfactual_blocked(debias_target)
    if query_ids is None:
        query_ids = np.arange(embeds_1.z_v.shape[0])
    if candidate_ids is None:
        candidate_ids = np.arange(embeds_2.z_v.shape[0])
    query_ids = np.asarray(query_ids, dtype=np.int64)
    candidate_ids = np.asarray(candidate_ids, dtype=np.int64)
    if candidate_ids.size == 0:
        raise ValueError("candidate set is empty")
    if query_ids.size == 0:
        raise ValueError("query set is empty")

    w = dict(zip(BRANCHES, params.weights()))
    sims = {}
    for key in BRANCHES:
        z1 = np.asarray(getattr(embeds_1, f"z_{key}"), dtype=np.float64)
        z2 = np.asarray(getattr(embeds_2, f"z_{key}"), dtype=np.float64)
        sims[key] = z1[query_ids] @ z2[candidate_ids].T

    te = sum(w[k] * sims[k] for k in BRANCHES)
    nde = sum(w[k] * sims[k] for k in BRANCHES if k not in cf_blocked)
    tie = te - beta * nde
    return CausalScoreMatrix(
        query_ids=query_ids, candidate_ids=candidate_ids,
        y_v=sims["v"], y_g=sims["g"], y_m=sims["m"],
        te=te, nde=nde, tie=tie, beta=beta, debias_target=debias_target)


SCORE_COLUMNS = ("y_v", "y_g", "y_m", "te", "nde", "tie")


@dataclass
class ScoreRows:
    """Flat per-pair score rows, as read from the TSV interchange format."""

    query_ids: np.ndarray
    candidate_ids: np.ndarray
    y_v: np.ndarray
    y_g: np.ndarray
    y_m: np.ndarray
    te: np.ndarray
    nde: np.ndarray
    tie: np.ndarray


def write_scores_tsv(path, matrix: CausalScoreMatrix) -> None:
    """Export: query_id, candidate_id, Y_v, Y_g, Y_m, TE, NDE, TIE per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qi, q in enumerate(matrix.query_ids):
            for ci, c in enumerate(matrix.candidate_ids):
                vals = "\t".join(
                    f"{getattr(matrix, col)[qi, ci]:.17g}" for col in SCORE_COLUMNS)
                fh.write(f"{q}\t{c}\t{vals}\n")


def read_scores_tsv(path) -> ScoreRows:
    """Parse the score interchange TSV; malformed lines report their number."""
    cols: dict[str, list] = {c: [] for c in ("query_ids", "candidate_ids", *SCORE_COLUMNS)}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 8:
                raise ValueError(f"scores line {lineno}: expected 8 tab-separated fields")
            try:
                cols["query_ids"].append(int(parts[0]))
                cols["candidate_ids"].append(int(parts[1]))
                for col, raw in zip(SCORE_COLUMNS, parts[2:]):
                    cols[col].append(float(raw))
            except ValueError:
                raise ValueError(f"scores line {lineno}: malformed numeric field") from None
    if not cols["query_ids"]:
        raise ValueError("scores file contains no rows")
    return ScoreRows(
        query_ids=np.array(cols["query_ids"], dtype=np.int64),
        candidate_ids=np.array(cols["candidate_ids"], dtype=np.int64),
        **{c: np.array(cols[c], dtype=np.float64) for c in SCORE_COLUMNS})
