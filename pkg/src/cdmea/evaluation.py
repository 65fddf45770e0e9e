"""Debiased ranking, retrieval metrics, and the analysis reports.

Candidates are ranked by the debiased score (TIE); ties break toward the
smaller entity id so ranks are deterministic. The default candidate pool is
the target-side entities of the test pairs; pass candidates="all" to rank
against every entity of the target graph.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Mmkg, SyntheticSpec, generate_synthetic_pair
from .encoders import ModalityEmbeddings, prepare_pair
from .scoring import FusionParams, score_matrix
from .training import TrainConfig, train

BUCKET_EDGES = ((-1.0, 0.3), (0.3, 0.5), (0.5, 1.0))


@dataclass
class Metrics:
    h_at_1: float
    h_at_10: float
    mrr: float
    pair_count: int
    direction: str = "kg1_to_kg2"

    def validate(self) -> None:
        for name in ("h_at_1", "h_at_10", "mrr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")
        if self.h_at_1 > self.mrr + 1e-12 or self.h_at_1 > self.h_at_10 + 1e-12:
            raise ValueError("metric ordering violated: H@1 must not exceed MRR or H@10")


def rank_candidates(scores, candidate_ids, true_candidate: int) -> int:
    """1-based rank of the true candidate within a score row.

    rank = 1 + |strictly better| + |tied with smaller entity id|.
    """
    scores = np.asarray(scores, dtype=np.float64)
    cids = np.asarray(candidate_ids, dtype=np.int64)
    if scores.shape != cids.shape:
        raise ValueError("scores and candidate_ids must have matching shapes")
    pos = np.flatnonzero(cids == true_candidate)
    if pos.size == 0:
        raise ValueError(f"true candidate {true_candidate} not in candidate set")
    s = scores[pos[0]]
    greater = int((scores > s).sum())
    tied_before = int(((scores == s) & (cids < true_candidate)).sum())
    return 1 + greater + tied_before


def compute_metrics(ranks, direction: str = "kg1_to_kg2") -> Metrics:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("cannot compute metrics over an empty rank list")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    metrics = Metrics(
        h_at_1=float((ranks <= 1).mean()),
        h_at_10=float((ranks <= 10).mean()),
        mrr=float((1.0 / ranks).mean()),
        pair_count=int(ranks.size),
        direction=direction)
    metrics.validate()
    return metrics


def _candidate_ids(test_pairs, target_entity_count: int, candidates: str) -> np.ndarray:
    if candidates == "test":
        return np.asarray(test_pairs, dtype=np.int64)[:, 1]
    if candidates == "all":
        return np.arange(target_entity_count, dtype=np.int64)
    raise ValueError("candidates must be 'test' or 'all'")


def rank_test_pairs(emb_source: ModalityEmbeddings, emb_target: ModalityEmbeddings,
                    test_pairs, fusion: FusionParams, beta: float,
                    debias_target: str = "visual", candidates: str = "test") -> np.ndarray:
    """Debiased rank of each test pair's true counterpart (source -> target)."""
    test_pairs = np.asarray(test_pairs, dtype=np.int64)
    cand = _candidate_ids(test_pairs, emb_target.entity_count, candidates)
    m = score_matrix(emb_source, emb_target, fusion, beta=beta,
                     debias_target=debias_target,
                     query_ids=test_pairs[:, 0], candidate_ids=cand)
    return np.array([
        rank_candidates(m.tie[i], m.candidate_ids, int(test_pairs[i, 1]))
        for i in range(len(test_pairs))], dtype=np.int64)


def evaluate_alignment(emb1: ModalityEmbeddings, emb2: ModalityEmbeddings,
                       test_pairs, fusion: FusionParams, beta: float,
                       debias_target: str = "visual", candidates: str = "test",
                       direction: str = "kg1_to_kg2"):
    """Metrics plus the per-pair ranks (kg1->kg2 ranks when averaging)."""
    test_pairs = np.asarray(test_pairs, dtype=np.int64)
    if direction == "kg1_to_kg2":
        ranks = rank_test_pairs(emb1, emb2, test_pairs, fusion, beta, debias_target, candidates)
        return compute_metrics(ranks, direction), ranks
    if direction == "kg2_to_kg1":
        ranks = rank_test_pairs(emb2, emb1, test_pairs[:, ::-1], fusion, beta,
                                debias_target, candidates)
        return compute_metrics(ranks, direction), ranks
    if direction == "averaged":
        fwd, ranks = evaluate_alignment(emb1, emb2, test_pairs, fusion, beta,
                                        debias_target, candidates, "kg1_to_kg2")
        bwd, _ = evaluate_alignment(emb1, emb2, test_pairs, fusion, beta,
                                    debias_target, candidates, "kg2_to_kg1")
        avg = Metrics(h_at_1=(fwd.h_at_1 + bwd.h_at_1) / 2,
                      h_at_10=(fwd.h_at_10 + bwd.h_at_10) / 2,
                      mrr=(fwd.mrr + bwd.mrr) / 2,
                      pair_count=fwd.pair_count, direction="averaged")
        return avg, ranks
    raise ValueError("direction must be kg1_to_kg2, kg2_to_kg1, or averaged")


# --- image-similarity buckets ------------------------------------------------

@dataclass
class BucketRow:
    low: float
    high: float
    pair_count: int
    imputed_count: int
    metrics: Metrics | None


@dataclass
class BucketReport:
    rows: list[BucketRow]

    @property
    def total_pairs(self) -> int:
        return sum(row.pair_count for row in self.rows)


def pair_image_cosines(test_pairs, kg1: Mmkg, kg2: Mmkg) -> np.ndarray:
    """Cosine similarity of the raw (pre-projection) image features per pair."""
    test_pairs = np.asarray(test_pairs, dtype=np.int64)
    f1 = kg1.image_features[test_pairs[:, 0]].astype(np.float64)
    f2 = kg2.image_features[test_pairs[:, 1]].astype(np.float64)
    n1 = np.linalg.norm(f1, axis=1)
    n2 = np.linalg.norm(f2, axis=1)
    denom = np.where((n1 == 0) | (n2 == 0), 1.0, n1 * n2)
    cos = (f1 * f2).sum(axis=1) / denom
    return np.clip(cos, -1.0, 1.0)


def bucket_report(test_pairs, kg1: Mmkg, kg2: Mmkg, ranks) -> BucketReport:
    """Per-bucket metrics over test pairs grouped by raw image similarity.

    Ranks must be aligned with test_pairs (computed against the full
    candidate set first, then restricted here). Pairs with an imputed image
    on either side stay in their similarity bucket and are counted in
    imputed_count.
    """
    test_pairs = np.asarray(test_pairs, dtype=np.int64)
    ranks = np.asarray(ranks, dtype=np.int64)
    if len(ranks) != len(test_pairs):
        raise ValueError("ranks and test_pairs must align")
    cos = pair_image_cosines(test_pairs, kg1, kg2)
    imputed = (kg1.image_imputed[test_pairs[:, 0]]
               | kg2.image_imputed[test_pairs[:, 1]])
    rows = []
    for i, (low, high) in enumerate(BUCKET_EDGES):
        last = i == len(BUCKET_EDGES) - 1
        mask = (cos >= low) & ((cos <= high) if last else (cos < high))
        metrics = compute_metrics(ranks[mask]) if mask.any() else None
        rows.append(BucketRow(low=low, high=high, pair_count=int(mask.sum()),
                              imputed_count=int(imputed[mask].sum()), metrics=metrics))
    report = BucketReport(rows=rows)
    assert report.total_pairs == len(test_pairs)
    return report


# --- sweeps ------------------------------------------------------------------

def beta_sweep(emb1: ModalityEmbeddings, emb2: ModalityEmbeddings, test_pairs,
               fusion: FusionParams, betas, debias_target: str = "visual",
               candidates: str = "test", direction: str = "kg1_to_kg2"):
    """Re-score the same embeddings at each beta; returns [(beta, Metrics)]."""
    rows = []
    for beta in betas:
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta values must lie in [0, 1]")
        metrics, _ = evaluate_alignment(emb1, emb2, test_pairs, fusion, beta,
                                        debias_target, candidates, direction)
        rows.append((float(beta), metrics))
    return rows


@dataclass
class NoiseSweepRow:
    rate: float
    metrics: Metrics  # debiased inference at config.beta
    metrics_te: Metrics  # plain total-effect inference (beta = 0)
    noised_metrics: Metrics | None  # restricted to pairs with an imputed image
    noised_metrics_te: Metrics | None


def noise_sweep(spec: SyntheticSpec, rates, config: TrainConfig,
                seed_ratio: float = 0.3) -> list[NoiseSweepRow]:
    """Regenerate, retrain, and evaluate at each image-noise rate.

    Each row reports overall and noised-subset metrics under both debiased
    (config.beta) and plain (beta = 0) inference, so the debiasing benefit
    is measurable per rate. Deterministic for fixed spec/config seeds.
    """
    rows = []
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise ValueError("noise rates must lie in [0, 1)")
        kg1, kg2, seeds = generate_synthetic_pair(replace(spec, image_noise_rate=float(rate)),
                                                  seed_ratio=seed_ratio)
        result = train(kg1, kg2, seeds, config)
        gt1, gt2 = prepare_pair(kg1, kg2)
        emb1 = result.model.modality_embeddings(gt1)
        emb2 = result.model.modality_embeddings(gt2)
        fusion = result.model.fusion_params()
        test_pairs = seeds.test_pairs
        metrics, ranks = evaluate_alignment(emb1, emb2, test_pairs, fusion, config.beta)
        metrics_te, ranks_te = evaluate_alignment(emb1, emb2, test_pairs, fusion, 0.0)
        noised = (kg1.image_imputed[test_pairs[:, 0]]
                  | kg2.image_imputed[test_pairs[:, 1]])
        noised_m = compute_metrics(ranks[noised]) if noised.any() else None
        noised_te = compute_metrics(ranks_te[noised]) if noised.any() else None
        rows.append(NoiseSweepRow(rate=float(rate), metrics=metrics, metrics_te=metrics_te,
                                  noised_metrics=noised_m, noised_metrics_te=noised_te))
    return rows


# --- output helpers ----------------------------------------------------------

def format_metrics(metrics: Metrics) -> str:
    return (f"{metrics.direction}: H@1 {metrics.h_at_1:.4f}  H@10 {metrics.h_at_10:.4f}  "
            f"MRR {metrics.mrr:.4f}  ({metrics.pair_count} pairs)")


def write_metrics_tsv(path, metrics: Metrics) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"h_at_1\t{metrics.h_at_1:.17g}\n")
        fh.write(f"h_at_10\t{metrics.h_at_10:.17g}\n")
        fh.write(f"mrr\t{metrics.mrr:.17g}\n")
        fh.write(f"pair_count\t{metrics.pair_count}\n")
        fh.write(f"direction\t{metrics.direction}\n")


def _metrics_cells(metrics: Metrics | None) -> str:
    if metrics is None:
        return "\t\t"
    return f"{metrics.h_at_1:.6g}\t{metrics.h_at_10:.6g}\t{metrics.mrr:.6g}"


def write_bucket_tsv(path, report: BucketReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("low\thigh\tpairs\timputed\th_at_1\th_at_10\tmrr\n")
        for row in report.rows:
            fh.write(f"{row.low:.6g}\t{row.high:.6g}\t{row.pair_count}\t"
                     f"{row.imputed_count}\t{_metrics_cells(row.metrics)}\n")


def write_beta_sweep_tsv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("beta\th_at_1\th_at_10\tmrr\n")
        for beta, metrics in rows:
            fh.write(f"{beta:.6g}\t{_metrics_cells(metrics)}\n")


def write_noise_sweep_tsv(path, rows: list[NoiseSweepRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rate\th_at_1\th_at_10\tmrr\tte_h_at_1\tte_h_at_10\tte_mrr\t"
                 "noised_h_at_1\tnoised_te_h_at_1\n")
        for row in rows:
            noised = f"{row.noised_metrics.h_at_1:.6g}" if row.noised_metrics else ""
            noised_te = f"{row.noised_metrics_te.h_at_1:.6g}" if row.noised_metrics_te else ""
            fh.write(f"{row.rate:.6g}\t{_metrics_cells(row.metrics)}\t"
                     f"{_metrics_cells(row.metrics_te)}\t{noised}\t{noised_te}\n")


def plot_sweep(path, xs, metrics_list, xlabel: str) -> None:
    """Score-vs-parameter line plot as a deterministic SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "cdmea"}):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(xs, [m.h_at_1 for m in metrics_list], marker="o", label="H@1")
        ax.plot(xs, [m.mrr for m in metrics_list], marker="s", label="MRR")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("score")
        ax.set_ylim(0.0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
