"""Contrastive training of the alignment model over seed entity pairs.

All four objective terms are in-batch InfoNCE losses: one on the fused
prediction score and one per modality branch, each symmetrized over both
alignment directions. Optimization uses decoupled weight decay; relation
embeddings are rescaled to unit norm after every step. Optional iterative
pseudo-labeling periodically adds mutual-nearest-neighbor pairs from the
unaligned entity pools as extra seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import __version__
from .data import Mmkg, SeedAlignments
from .encoders import AlignmentModel, GraphTensors, prepare_pair
from .scoring import score_matrix


class DivergenceError(Exception):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1000
    learning_rate: float = 5e-4
    temperature: float = 0.1
    beta: float = 0.2
    weight_decay: float = 0.01
    iterative_every: int = 10  # epochs between pseudo-label refreshes; 0 disables
    hidden_dim: int = 300
    layer_count: int = 2
    visual_dim: int = 100
    loss_fused: bool = True
    loss_v: bool = True
    loss_g: bool = True
    loss_m: bool = True
    use_visual: bool = True
    use_graph: bool = True
    use_fused: bool = True
    # literal-form contrastive denominator (negatives only, may go negative)
    exclude_positive_denominator: bool = False
    validation_fraction: float = 0.05
    rng_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.weight_decay < 0.0 or self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.iterative_every < 0:
            raise ValueError("iterative_every must be non-negative")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.hidden_dim < 1 or self.layer_count < 1 or self.visual_dim < 1:
            raise ValueError("model dimensions must be positive")
        if not any(self.effective_loss_toggles().values()):
            raise ValueError("no loss terms enabled")

    def effective_loss_toggles(self) -> dict[str, bool]:
        """Per-term switches with disabled branches forcing their loss off."""
        return {
            "fused": self.loss_fused,
            "v": self.loss_v and self.use_visual,
            "g": self.loss_g and self.use_graph,
            "m": self.loss_m and self.use_fused,
        }


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def infonce_loss(scores_row, positive_index: int, tau: float,
                 include_positive: bool = True) -> torch.Tensor:
    """Contrastive loss for one row of candidate scores.

    -log softmax(scores / tau) at the positive entry. With
    include_positive=False the denominator sums over negatives only, which
    permits negative losses.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    row = torch.as_tensor(scores_row)
    if row.ndim != 1:
        raise ValueError("scores_row must be 1-D")
    if not 0 <= positive_index < row.numel():
        raise ValueError("positive_index out of range")
    logits = row / tau
    if include_positive:
        denom = torch.logsumexp(logits, dim=0)
    else:
        if row.numel() < 2:
            raise ValueError("need at least one negative score")
        keep = torch.ones_like(logits, dtype=torch.bool)
        keep[positive_index] = False
        denom = torch.logsumexp(logits[keep], dim=0)
    return denom - logits[positive_index]


def _nce_matrix(scores: torch.Tensor, tau: float, include_positive: bool) -> torch.Tensor:
    """Batch InfoNCE with positives on the diagonal, averaged over both directions."""
    logits = scores / tau
    if include_positive:
        denom_rows = torch.logsumexp(logits, dim=1)
        denom_cols = torch.logsumexp(logits, dim=0)
    else:
        off = logits.masked_fill(torch.eye(logits.shape[0], dtype=torch.bool), float("-inf"))
        denom_rows = torch.logsumexp(off, dim=1)
        denom_cols = torch.logsumexp(off, dim=0)
    pos = logits.diagonal()
    return 0.5 * ((denom_rows - pos).mean() + (denom_cols - pos).mean())


def batch_scores(z1, z2, batch_pairs) -> dict[str, torch.Tensor]:
    """Per-branch score matrices for a batch of aligned pairs."""
    pairs = torch.as_tensor(np.asarray(batch_pairs, dtype=np.int64))
    left, right = pairs[:, 0], pairs[:, 1]
    return {key: z1[i][left] @ z2[i][right].T
            for i, key in enumerate(("v", "g", "m"))}


def total_loss(z1, z2, batch_pairs, fusion_weights: torch.Tensor,
               config: TrainConfig):
    """Sum of the enabled InfoNCE terms for one batch.

    Returns (total, per-term dict). z1/z2 are the (z_v, z_g, z_m) tuples of
    the two graphs; fusion_weights is the softmax of the fusion logits and
    carries their gradient through the fused term.
    """
    if len(batch_pairs) < 2:
        raise ValueError("InfoNCE needs at least one in-batch negative (batch of 2 or more)")
    toggles = config.effective_loss_toggles()
    if not any(toggles.values()):
        raise ValueError("no loss terms enabled")
    sims = batch_scores(z1, z2, batch_pairs)
    include = not config.exclude_positive_denominator
    terms = {}
    if toggles["fused"]:
        fused = (fusion_weights[0] * sims["v"] + fusion_weights[1] * sims["g"]
                 + fusion_weights[2] * sims["m"])
        terms["fused"] = _nce_matrix(fused, config.temperature, include)
    for key in ("v", "g", "m"):
        if toggles[key]:
            terms[key] = _nce_matrix(sims[key], config.temperature, include)
    return sum(terms.values()), terms


def split_validation(train_pairs, fraction: float, rng_seed: int):
    """Hold out a validation slice of the train seeds for the convergence trace.

    Degenerate seed sets (holdout would leave fewer than 2 training pairs)
    validate on the training pairs themselves.
    """
    pairs = np.asarray(train_pairs, dtype=np.int64)
    k = int(round(fraction * len(pairs)))
    if k < 1 or len(pairs) - k < 2:
        return pairs, pairs
    perm = np.random.default_rng([rng_seed, 23]).permutation(len(pairs))
    return pairs[perm[k:]], pairs[perm[:k]]


def iterative_expand_seeds(original_pairs, scores, left_pool, right_pool):
    """Add mutual-nearest-neighbor pseudo pairs to the original seeds.

    scores[i, j] is the factual fused score between left_pool[i] and
    right_pool[j]; both pools must exclude already-seeded entities. Pseudo
    pairs are those where row and column argmax agree. Returns the originals
    unchanged when nothing qualifies.
    """
    original = np.asarray(original_pairs, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores)
    left_pool = np.asarray(left_pool, dtype=np.int64)
    right_pool = np.asarray(right_pool, dtype=np.int64)
    if scores.size == 0:
        return original
    if scores.shape != (len(left_pool), len(right_pool)):
        raise ValueError("score matrix shape does not match the candidate pools")
    row_best = scores.argmax(axis=1)
    col_best = scores.argmax(axis=0)
    mutual = np.flatnonzero(col_best[row_best] == np.arange(len(left_pool)))
    if mutual.size == 0:
        return original
    pseudo = np.stack([left_pool[mutual], right_pool[row_best[mutual]]], axis=1)
    return np.concatenate([original, pseudo], axis=0)


@dataclass
class TraceRow:
    epoch: int
    loss: float
    val_h1: float


@dataclass
class TrainResult:
    model: AlignmentModel
    config: TrainConfig
    trace: list[TraceRow] = field(default_factory=list)
    final_train_pairs: np.ndarray | None = None
    val_pairs: np.ndarray | None = None
    optimizer: object | None = None


def write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in trace:
            fh.write(f"{row.epoch}\t{row.loss:.17g}\t{row.val_h1:.17g}\n")


@torch.no_grad()
def _validation_h1(model, gt1: GraphTensors, gt2: GraphTensors, val_pairs, beta: float) -> float:
    emb1 = model.modality_embeddings(gt1)
    emb2 = model.modality_embeddings(gt2)
    m = score_matrix(emb1, emb2, model.fusion_params(), beta=beta,
                     query_ids=val_pairs[:, 0])
    pred = m.tie.argmax(axis=1)
    return float((m.candidate_ids[pred] == val_pairs[:, 1]).mean())


@torch.no_grad()
def _refresh_pseudo_seeds(model, gt1, gt2, base_pairs, all_seed_pairs):
    left_pool = np.setdiff1d(np.arange(gt1.entity_count), all_seed_pairs[:, 0])
    right_pool = np.setdiff1d(np.arange(gt2.entity_count), all_seed_pairs[:, 1])
    if left_pool.size == 0 or right_pool.size == 0:
        return base_pairs
    emb1 = model.modality_embeddings(gt1)
    emb2 = model.modality_embeddings(gt2)
    m = score_matrix(emb1, emb2, model.fusion_params(), beta=0.0,
                     query_ids=left_pool, candidate_ids=right_pool)
    return iterative_expand_seeds(base_pairs, m.te, left_pool, right_pool)


def train(kg1: Mmkg, kg2: Mmkg, seeds: SeedAlignments, config: TrainConfig) -> TrainResult:
    """Run the full optimization loop; deterministic for a fixed config."""
    config.validate()
    if len(seeds.train_pairs) < 2:
        raise ValueError("need at least 2 train seed pairs")
    gt1, gt2 = prepare_pair(kg1, kg2)
    shared_rel = max(kg1.relation_count, kg2.relation_count)
    model = AlignmentModel(
        attribute_dim=kg1.attribute_dim, image_dim=kg1.image_dim,
        relation_count=shared_rel, hidden_dim=config.hidden_dim,
        layer_count=config.layer_count, visual_dim=config.visual_dim,
        use_visual=config.use_visual, use_graph=config.use_graph,
        use_fused=config.use_fused, rng_seed=config.rng_seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng([config.rng_seed, 17])
    train_pairs, val_pairs = split_validation(
        seeds.train_pairs, config.validation_fraction, config.rng_seed)

    current = train_pairs
    trace: list[TraceRow] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(current))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(current), config.batch_size):
            batch = current[order[start:start + config.batch_size]]
            if len(batch) < 2:  # trailing remainder cannot form negatives
                continue
            optimizer.zero_grad()
            z1 = model.embed(gt1)
            z2 = model.embed(gt2)
            loss, terms = total_loss(z1, z2, batch, model.fusion_weights(), config)
            for name, term in terms.items():
                if not torch.isfinite(term):
                    raise DivergenceError(
                        f"loss term '{name}' became non-finite at epoch {epoch}")
            loss.backward()
            optimizer.step()
            model.renormalize_relations()
            epoch_loss += float(loss.detach())
            batches += 1
        mean_loss = epoch_loss / max(batches, 1)
        val_h1 = _validation_h1(model, gt1, gt2, val_pairs, config.beta)
        trace.append(TraceRow(epoch=epoch, loss=mean_loss, val_h1=val_h1))
        if (config.iterative_every and (epoch + 1) % config.iterative_every == 0
                and epoch + 1 < config.epochs):
            current = _refresh_pseudo_seeds(model, gt1, gt2, train_pairs, seeds.train_pairs)
    return TrainResult(model=model, config=config, trace=trace,
                       final_train_pairs=current, val_pairs=val_pairs,
                       optimizer=optimizer)


# --- checkpointing ---------------------------------------------------------

def save_checkpoint(path, model: AlignmentModel, optimizer, epoch: int,
                    config: TrainConfig) -> None:
    """Write a self-describing npz container of all parameter blocks.

    Parameter tensors are stored under param/<name>, optimizer moments under
    opt/<index>/<slot>, and a JSON metadata record (epoch, config, config
    hash, model dims, tool version) under meta.
    """
    arrays: dict[str, np.ndarray] = {}
    names = []
    for name, p in model.named_parameters():
        names.append(name)
        arrays[f"param/{name}"] = p.detach().numpy(force=True)
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for idx, slots in state.items():
            for slot, value in slots.items():
                arrays[f"opt/{idx}/{slot}"] = np.asarray(
                    value.numpy(force=True) if torch.is_tensor(value) else value)
    meta = {
        "epoch": epoch,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "version": __version__,
        "param_names": names,
        "model": {
            "attribute_dim": model.attribute_dim,
            "image_dim": model.image_dim,
            "relation_count": model.relation_count,
            "visual_dim": model.visual.visual_dim,
        },
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path, verify_hash: bool = True):
    """Rebuild (model, optimizer, epoch, config) from a checkpoint file."""
    with np.load(path, allow_pickle=False) as payload:
        meta = json.loads(str(payload["meta"]))
        arrays = {key: payload[key] for key in payload.files if key != "meta"}
    config = TrainConfig(**meta["config"])
    if verify_hash and config_hash(config) != meta["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    dims = meta["model"]
    model = AlignmentModel(
        attribute_dim=dims["attribute_dim"], image_dim=dims["image_dim"],
        relation_count=dims["relation_count"], hidden_dim=config.hidden_dim,
        layer_count=config.layer_count, visual_dim=dims["visual_dim"],
        use_visual=config.use_visual, use_graph=config.use_graph,
        use_fused=config.use_fused, rng_seed=config.rng_seed)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name in meta["param_names"]:
            params[name].copy_(torch.from_numpy(arrays[f"param/{name}"]))
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    state = {}
    for idx in range(len(meta["param_names"])):
        slots = {}
        for slot in ("step", "exp_avg", "exp_avg_sq"):
            key = f"opt/{idx}/{slot}"
            if key in arrays:
                slots[slot] = torch.from_numpy(np.asarray(arrays[key]))
        if slots:
            state[idx] = slots
    if state:
        base = optimizer.state_dict()
        base["state"] = state
        optimizer.load_state_dict(base)
    return model, optimizer, int(meta["epoch"]), config
