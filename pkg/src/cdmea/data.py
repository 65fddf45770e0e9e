"""Data model for paired multi-modal knowledge graphs.

A dataset directory holds two graphs plus their ground-truth alignment:

    triples_1.tsv / triples_2.tsv   head_id<TAB>rel_id<TAB>tail_id
    attrs_1.tsv / attrs_2.tsv       ent_id<TAB>attr_id,attr_id,...
    img_features_1.tsv / _2.tsv     ent_id<TAB>f1 f2 ... fD
    alignments.tsv                  ent_id_kg1<TAB>ent_id_kg2
    meta.tsv                        key<TAB>value

Entities whose image-feature line is absent get a moment-matched Gaussian
vector drawn from a stream seeded by (rng_seed, graph index, entity id),
and are flagged as imputed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

# Published alignment-pair counts for the cross-KG benchmarks; used by the
# loader self-check when meta.tsv declares one of these dataset names.
KNOWN_BENCHMARK_PAIR_COUNTS = {
    "FB-DB15K": 128_486,
    "FB-YG15K": 11_199,
}


class DataError(Exception):
    """Base class for dataset loading/validation failures."""


class LoadError(DataError):
    """A required dataset file is missing or unreadable."""


class ValidationError(DataError):
    """Dataset contents violate a structural invariant."""


@dataclass
class Mmkg:
    """One multi-modal knowledge graph.

    Attributes:
        entity_count: number of entities (ids 0..entity_count-1).
        relation_count: number of relations (ids 0..relation_count-1).
        triples: int64 array of shape (T, 3), rows (head, relation, tail).
        attribute_bags: per-entity tuple of sorted attribute ids drawn from
            a vocabulary shared with the paired graph.
        attribute_dim: size of the shared attribute vocabulary.
        image_features: float32 array (entity_count, image_dim).
        image_imputed: bool array (entity_count,); True where the feature
            row was generated rather than observed.
    """

    entity_count: int
    relation_count: int
    triples: np.ndarray
    attribute_bags: list[tuple[int, ...]]
    attribute_dim: int
    image_features: np.ndarray
    image_imputed: np.ndarray

    @property
    def image_dim(self) -> int:
        return self.image_features.shape[1]

    def attribute_matrix(self) -> np.ndarray:
        """Dense binary bag-of-attributes matrix, shape (N, attribute_dim)."""
        mat = np.zeros((self.entity_count, self.attribute_dim), dtype=np.float32)
        for ent, bag in enumerate(self.attribute_bags):
            if bag:
                mat[ent, list(bag)] = 1.0
        return mat

    def validate(self, label: str = "graph") -> None:
        if self.entity_count < 0 or self.relation_count < 0:
            raise ValidationError(f"{label}: negative entity or relation count")
        t = np.asarray(self.triples)
        if t.size and (t.ndim != 2 or t.shape[1] != 3):
            raise ValidationError(f"{label}: triples must have shape (T, 3)")
        if t.size:
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= self.entity_count:
                raise ValidationError(f"{label}: triple entity id out of range")
            if t[:, 1].min() < 0 or t[:, 1].max() >= self.relation_count:
                raise ValidationError(f"{label}: triple relation id out of range")
        if len(self.attribute_bags) != self.entity_count:
            raise ValidationError(f"{label}: attribute bag count != entity count")
        for ent, bag in enumerate(self.attribute_bags):
            for a in bag:
                if not 0 <= a < self.attribute_dim:
                    raise ValidationError(
                        f"{label}: attribute id {a} out of range for entity {ent}"
                    )
        feats = self.image_features
        if feats.shape[0] != self.entity_count:
            raise ValidationError(f"{label}: image feature row count != entity count")
        if feats.size and not np.isfinite(feats).all():
            raise ValidationError(f"{label}: non-finite image feature value")
        if self.image_imputed.shape != (self.entity_count,):
            raise ValidationError(f"{label}: imputed flag count != entity count")


@dataclass
class SeedAlignments:
    """Train/test split of the ground-truth cross-graph entity pairs."""

    train_pairs: np.ndarray  # int64 (k, 2), columns (kg1 entity, kg2 entity)
    test_pairs: np.ndarray  # int64 (m, 2)
    seed_ratio: float
    split_seed: int = 0  # seed that reproduces this split from the full pair set

    @property
    def all_pairs(self) -> np.ndarray:
        return np.concatenate([self.train_pairs, self.test_pairs], axis=0)

    def validate(self) -> None:
        if not 0.0 < self.seed_ratio < 1.0:
            raise ValidationError("seed_ratio must lie in (0, 1)")
        pairs = self.all_pairs
        if pairs.size == 0:
            raise ValidationError("alignment set is empty")
        for side in (0, 1):
            col = pairs[:, side]
            if len(np.unique(col)) != len(col):
                raise ValidationError(f"entity repeated on side {side + 1} of alignments")
        total = len(pairs)
        if abs(len(self.train_pairs) - self.seed_ratio * total) > 1.0:
            raise ValidationError("train fraction deviates from seed_ratio by more than one pair")


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic graph pair with controlled perturbations.

    KG2 starts as a copy of KG1 and is degraded: edges dropped at
    `edge_dropout`, attribute bits flipped at `attribute_noise`, the image
    features of a `visual_bias_fraction` of aligned pairs replaced by
    adversarial vectors (cosine to the KG1 counterpart < 0.3 by
    construction), and an `image_noise_rate` fraction of entities in each
    graph get imputation noise instead of their real features.
    """

    entity_count: int
    relation_count: int
    triple_count: int
    edge_dropout: float = 0.0
    attribute_noise: float = 0.0
    visual_bias_fraction: float = 0.0
    image_noise_rate: float = 0.0
    rng_seed: int = 0
    attribute_dim: int = 40
    image_dim: int = 64

    def validate(self) -> None:
        if self.entity_count < 2:
            raise ValueError("entity_count must be at least 2")
        if self.triple_count < 1:
            raise ValueError("triple_count must be at least 1")
        if self.relation_count < 1:
            raise ValueError("relation_count must be at least 1")
        for name in ("edge_dropout", "attribute_noise", "image_noise_rate"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.visual_bias_fraction <= 1.0:
            raise ValueError("visual_bias_fraction must lie in [0, 1]")


def split_seed_alignments(all_pairs, seed_ratio: float, rng_seed: int) -> SeedAlignments:
    """Split the full pair set into train/test seeds, deterministically.

    Pairs are canonicalized (sorted) before the seeded shuffle, so the split
    depends only on the pair set, the ratio, and the seed - not on input order.
    """
    if not 0.0 < seed_ratio < 1.0:
        raise ValueError("seed_ratio must lie in (0, 1)")
    pairs = np.asarray(all_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("cannot split an empty pair list")
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(len(pairs))
    n_train = int(round(seed_ratio * len(pairs)))
    n_train = min(max(n_train, 1), max(len(pairs) - 1, 1))
    train = pairs[perm[:n_train]]
    test = pairs[perm[n_train:]]
    return SeedAlignments(train_pairs=train, test_pairs=test,
                          seed_ratio=seed_ratio, split_seed=rng_seed)


def _impute_missing_features(features, missing, rng_seed: int, graph_index: int):
    """Fill absent rows with per-dimension moment-matched Gaussian noise.

    Each missing entity draws from its own stream seeded by
    (rng_seed, graph_index, entity id), so imputation is reproducible and
    independent of which other rows are missing.
    """
    observed = features[~missing]
    if observed.size:
        mean = observed.astype(np.float64).mean(axis=0)
        std = observed.astype(np.float64).std(axis=0)
    else:
        mean = np.zeros(features.shape[1])
        std = np.ones(features.shape[1])
    for ent in np.flatnonzero(missing):
        rng = np.random.default_rng([rng_seed, graph_index, int(ent)])
        features[ent] = (mean + std * rng.standard_normal(features.shape[1])).astype(np.float32)
    return features


def _read_meta(path: str) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"meta.tsv line {lineno}: expected key<TAB>value")
            meta[parts[0]] = parts[1]
    return meta


def _require(path: str) -> str:
    if not os.path.isfile(path):
        raise LoadError(f"missing dataset file: {os.path.basename(path)}")
    return path


def _load_graph(data_dir: str, index: int, attribute_dim: int, image_dim: int,
                entity_count: int, relation_count: int, rng_seed: int) -> Mmkg:
    label = f"graph {index}"
    triples = []
    with open(_require(os.path.join(data_dir, f"triples_{index}.tsv")), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValidationError(f"triples_{index}.tsv line {lineno}: expected 3 fields")
            h, r, t = (int(p) for p in parts)
            if not (0 <= h < entity_count and 0 <= t < entity_count):
                raise ValidationError(f"triples_{index}.tsv line {lineno}: entity id out of range")
            if not 0 <= r < relation_count:
                raise ValidationError(f"triples_{index}.tsv line {lineno}: relation id out of range")
            triples.append((h, r, t))
    if not triples:
        raise ValidationError(f"{label} has no triples")

    bags: list[tuple[int, ...]] = [() for _ in range(entity_count)]
    with open(_require(os.path.join(data_dir, f"attrs_{index}.tsv")), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"attrs_{index}.tsv line {lineno}: expected 2 fields")
            ent = int(parts[0])
            if not 0 <= ent < entity_count:
                raise ValidationError(f"attrs_{index}.tsv line {lineno}: entity id out of range")
            attrs = tuple(sorted(int(a) for a in parts[1].split(",") if a))
            for a in attrs:
                if not 0 <= a < attribute_dim:
                    raise ValidationError(f"attrs_{index}.tsv line {lineno}: attribute id out of range")
            bags[ent] = attrs

    features = np.zeros((entity_count, image_dim), dtype=np.float32)
    missing = np.ones(entity_count, dtype=bool)
    with open(_require(os.path.join(data_dir, f"img_features_{index}.tsv")), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"img_features_{index}.tsv line {lineno}: expected 2 fields")
            ent = int(parts[0])
            if not 0 <= ent < entity_count:
                raise ValidationError(f"img_features_{index}.tsv line {lineno}: entity id out of range")
            row = np.array([np.float32(v) for v in parts[1].split(" ") if v], dtype=np.float32)
            if row.shape[0] != image_dim:
                raise ValidationError(
                    f"img_features_{index}.tsv line {lineno}: expected {image_dim} values, got {row.shape[0]}"
                )
            if not np.isfinite(row).all():
                raise ValidationError(f"img_features_{index}.tsv line {lineno}: non-finite feature value")
            features[ent] = row
            missing[ent] = False
    features = _impute_missing_features(features, missing, rng_seed, index)

    kg = Mmkg(
        entity_count=entity_count,
        relation_count=relation_count,
        triples=np.array(triples, dtype=np.int64),
        attribute_bags=bags,
        attribute_dim=attribute_dim,
        image_features=features,
        image_imputed=missing,
    )
    kg.validate(label)
    return kg


def load_mmkg_pair(data_dir, seed_ratio=None, rng_seed=None):
    """Load a dataset directory into (Mmkg, Mmkg, SeedAlignments).

    seed_ratio / rng_seed override the split parameters recorded in
    meta.tsv; rng_seed also drives missing-image imputation.
    """
    data_dir = str(data_dir)
    meta = _read_meta(_require(os.path.join(data_dir, "meta.tsv")))
    try:
        attribute_dim = int(meta["attribute_dim"])
        image_dim = int(meta["image_dim"])
        counts = {
            (1, "ent"): int(meta["entity_count_1"]),
            (2, "ent"): int(meta["entity_count_2"]),
            (1, "rel"): int(meta["relation_count_1"]),
            (2, "rel"): int(meta["relation_count_2"]),
        }
    except KeyError as exc:
        raise ValidationError(f"meta.tsv missing required key: {exc.args[0]}") from None
    if seed_ratio is None:
        seed_ratio = float(meta.get("split_ratio", 0.3))
    if rng_seed is None:
        rng_seed = int(meta.get("rng_seed", 0))

    kg1 = _load_graph(data_dir, 1, attribute_dim, image_dim,
                      counts[(1, "ent")], counts[(1, "rel")], rng_seed)
    kg2 = _load_graph(data_dir, 2, attribute_dim, image_dim,
                      counts[(2, "ent")], counts[(2, "rel")], rng_seed)

    pairs = []
    with open(_require(os.path.join(data_dir, "alignments.tsv")), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"alignments.tsv line {lineno}: expected 2 fields")
            e1, e2 = int(parts[0]), int(parts[1])
            if not 0 <= e1 < kg1.entity_count:
                raise ValidationError(f"alignments.tsv line {lineno}: kg1 entity id out of range")
            if not 0 <= e2 < kg2.entity_count:
                raise ValidationError(f"alignments.tsv line {lineno}: kg2 entity id out of range")
            pairs.append((e1, e2))
    if not pairs:
        raise ValidationError("alignments.tsv contains no pairs")

    dataset_name = meta.get("dataset_name")
    if dataset_name:
        verify_benchmark_pair_count(dataset_name, len(pairs))

    seeds = split_seed_alignments(np.array(pairs, dtype=np.int64), seed_ratio, rng_seed)
    seeds.validate()
    return kg1, kg2, seeds


def verify_benchmark_pair_count(dataset_name: str, pair_count: int) -> None:
    """Cross-check a loaded pair count against the published benchmark size."""
    expected = KNOWN_BENCHMARK_PAIR_COUNTS.get(dataset_name)
    if expected is not None and pair_count != expected:
        raise ValidationError(
            f"{dataset_name} declares {expected} labeled pairs but {pair_count} were loaded"
        )


def _format_features(row: np.ndarray) -> str:
    # %.9g round-trips float32 exactly
    return " ".join(f"{float(v):.9g}" for v in row)


def save_mmkg_pair(data_dir, kg1: Mmkg, kg2: Mmkg, seeds: SeedAlignments,
                   dataset_name: str | None = None,
                   extra_meta: dict | None = None) -> None:
    """Write the dataset directory layout (see module docstring).

    Imputed image-feature rows are omitted so that reloading regenerates
    them (and their flags) from the recorded rng_seed. extra_meta keys are
    appended to meta.tsv (e.g. the synthetic generation recipe).
    """
    data_dir = str(data_dir)
    os.makedirs(data_dir, exist_ok=True)
    if kg1.attribute_dim != kg2.attribute_dim:
        raise ValidationError("paired graphs must share the attribute vocabulary")
    if kg1.image_dim != kg2.image_dim:
        raise ValidationError("paired graphs must share the image feature dimension")

    for index, kg in ((1, kg1), (2, kg2)):
        with open(os.path.join(data_dir, f"triples_{index}.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            for h, r, t in kg.triples:
                fh.write(f"{h}\t{r}\t{t}\n")
        with open(os.path.join(data_dir, f"attrs_{index}.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            for ent, bag in enumerate(kg.attribute_bags):
                if bag:
                    fh.write(f"{ent}\t{','.join(str(a) for a in bag)}\n")
        with open(os.path.join(data_dir, f"img_features_{index}.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            for ent in range(kg.entity_count):
                if not kg.image_imputed[ent]:
                    fh.write(f"{ent}\t{_format_features(kg.image_features[ent])}\n")

    with open(os.path.join(data_dir, "alignments.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        pairs = seeds.all_pairs
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        for e1, e2 in pairs[order]:
            fh.write(f"{e1}\t{e2}\n")

    meta = {
        "attribute_dim": kg1.attribute_dim,
        "image_dim": kg1.image_dim,
        "entity_count_1": kg1.entity_count,
        "entity_count_2": kg2.entity_count,
        "relation_count_1": kg1.relation_count,
        "relation_count_2": kg2.relation_count,
        "split_ratio": seeds.seed_ratio,
        "rng_seed": seeds.split_seed,
    }
    if dataset_name:
        meta["dataset_name"] = dataset_name
    if extra_meta:
        meta.update(extra_meta)
    with open(os.path.join(data_dir, "meta.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(meta):
            fh.write(f"{key}\t{meta[key]}\n")


def _sample_distinct_triples(rng, entity_count, relation_count, triple_count):
    seen = set()
    triples = []
    attempts = 0
    while len(triples) < triple_count:
        attempts += 1
        if attempts > 100 * triple_count + 1000:
            raise ValueError("cannot place the requested number of distinct triples")
        h = int(rng.integers(entity_count))
        t = int(rng.integers(entity_count))
        if h == t:
            continue
        r = int(rng.integers(relation_count))
        if (h, r, t) in seen:
            continue
        seen.add((h, r, t))
        triples.append((h, r, t))
    return np.array(triples, dtype=np.int64)


def _adversarial_feature(counterpart, decoy, rng, residual=0.1):
    """Replacement image vector: close to the decoy, near-orthogonal to the counterpart.

    The decoy direction is orthogonalized against the counterpart and a small
    residual along the counterpart is added back, pinning the pair's cosine at
    residual/sqrt(1+residual^2) ~= 0.0995, well under the 0.3 ceiling.
    """
    f = counterpart.astype(np.float64)
    f_hat = f / np.linalg.norm(f)
    base = decoy.astype(np.float64)
    base = base - (base @ f_hat) * f_hat
    norm = np.linalg.norm(base)
    if norm < 1e-9:  # decoy was parallel to the counterpart; fall back to noise
        base = rng.standard_normal(f.shape[0])
        base = base - (base @ f_hat) * f_hat
        norm = np.linalg.norm(base)
    base = base / norm
    adv = base + residual * f_hat
    adv = adv / np.linalg.norm(adv) * np.linalg.norm(f)
    return adv.astype(np.float32)


def generate_synthetic_pair(spec: SyntheticSpec, seed_ratio: float = 0.3):
    """Generate a perturbed twin pair with identity ground truth.

    Entity i of KG1 aligns to entity i of KG2. Deterministic for a fixed
    spec: every perturbation draws from its own stream derived from
    spec.rng_seed.
    """
    spec.validate()
    n, a_dim, d_img = spec.entity_count, spec.attribute_dim, spec.image_dim

    def stream(tag: int):
        return np.random.default_rng([spec.rng_seed, tag])

    triples1 = _sample_distinct_triples(stream(0), n, spec.relation_count, spec.triple_count)

    rng_attr = stream(1)
    bags1 = []
    for _ in range(n):
        k = int(rng_attr.integers(1, min(6, a_dim + 1)))
        bags1.append(tuple(sorted(rng_attr.choice(a_dim, size=k, replace=False).tolist())))

    features1 = stream(2).standard_normal((n, d_img)).astype(np.float32)

    # KG2 perturbations
    if spec.edge_dropout > 0.0:
        keep = stream(3).random(len(triples1)) >= spec.edge_dropout
        triples2 = triples1[keep]
        if len(triples2) == 0:
            raise ValueError("edge_dropout left graph 2 with no triples")
    else:
        triples2 = triples1.copy()

    bags2 = list(bags1)
    if spec.attribute_noise > 0.0:
        rng_flip = stream(4)
        flips = rng_flip.random((n, a_dim)) < spec.attribute_noise
        dense = np.zeros((n, a_dim), dtype=bool)
        for ent, bag in enumerate(bags1):
            dense[ent, list(bag)] = True
        dense ^= flips
        bags2 = [tuple(np.flatnonzero(dense[ent]).tolist()) for ent in range(n)]

    features2 = features1.copy()
    rng_bias = stream(5)
    n_biased = int(round(spec.visual_bias_fraction * n))
    biased = np.sort(rng_bias.permutation(n)[:n_biased])
    for pos, ent in enumerate(biased):
        decoy_ent = biased[(pos + 1) % len(biased)]
        decoy = features1[decoy_ent] if decoy_ent != ent else rng_bias.standard_normal(d_img)
        features2[ent] = _adversarial_feature(features1[ent], np.asarray(decoy), rng_bias)

    imputed1 = np.zeros(n, dtype=bool)
    imputed2 = np.zeros(n, dtype=bool)
    if spec.image_noise_rate > 0.0:
        for graph_index, (feats, flags) in enumerate(((features1, imputed1), (features2, imputed2)), start=1):
            rng_noise = stream(6 + graph_index)
            count = int(round(spec.image_noise_rate * n))
            chosen = rng_noise.permutation(n)[:count]
            flags[chosen] = True
            # reuse the loader's imputation so save->load round-trips exactly
            feats[:] = _impute_missing_features(feats, flags, spec.rng_seed, graph_index)

    kg1 = Mmkg(n, spec.relation_count, triples1, bags1, a_dim, features1, imputed1)
    kg2 = Mmkg(n, spec.relation_count, triples2, bags2, a_dim, features2, imputed2)
    kg1.validate("graph 1")
    kg2.validate("graph 2")

    identity = np.stack([np.arange(n), np.arange(n)], axis=1).astype(np.int64)
    seeds = split_seed_alignments(identity, seed_ratio, spec.rng_seed)
    return kg1, kg2, seeds


def mmkg_equal(a: Mmkg, b: Mmkg) -> bool:
    """Field-for-field equality of two graphs."""
    return (
        a.entity_count == b.entity_count
        and a.relation_count == b.relation_count
        and a.attribute_dim == b.attribute_dim
        and np.array_equal(a.triples, b.triples)
        and a.attribute_bags == b.attribute_bags
        and np.array_equal(a.image_features, b.image_features)
        and np.array_equal(a.image_imputed, b.image_imputed)
    )
