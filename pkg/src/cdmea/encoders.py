"""Modality encoders: visual projection and relational-reflection graph attention.

The graph encoder aggregates neighbor states through per-relation Householder
reflections I - 2 h_r h_r^T (orthogonal, norm-preserving) with attention
weights softmax-normalized per center entity from the relation embeddings
alone. Both graphs of a pair are encoded with the same parameter objects;
relation ids must therefore live in a vocabulary shared by the pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Mmkg, ValidationError
from .scoring import FusionParams


def l2_normalize_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-normalize; rows with norm below eps are left untouched (zero stays zero)."""
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / torch.where(norms < eps, torch.ones_like(norms), norms)


def reflection_matrix(axis) -> torch.Tensor:
    """Householder reflection I - 2 v v^T for a unit vector v."""
    v = torch.as_tensor(axis)
    if not v.is_floating_point():
        v = v.to(torch.get_default_dtype())
    if v.ndim != 1:
        raise ValueError("reflection axis must be a 1-D vector")
    norm = float(torch.linalg.vector_norm(v))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"reflection axis must be unit-norm (got {norm:.6g})")
    eye = torch.eye(v.shape[0], dtype=v.dtype)
    return eye - 2.0 * torch.outer(v, v)


def segment_softmax(logits: torch.Tensor, segments: torch.Tensor,
                    num_segments: int) -> torch.Tensor:
    """Softmax over entries sharing a segment id; sums to 1 per non-empty segment."""
    top = torch.full((num_segments,), float("-inf"),
                     dtype=logits.dtype, device=logits.device)
    top = top.scatter_reduce(0, segments, logits, reduce="amax", include_self=True).detach()
    ex = torch.exp(logits - top[segments])
    denom = torch.zeros(num_segments, dtype=logits.dtype, device=logits.device)
    denom = denom.index_add(0, segments, ex)
    return ex / denom[segments]


@dataclass
class Incidence:
    """Message-passing edge list: entity `dst` aggregates from `src` via `rel`."""

    dst: torch.Tensor
    src: torch.Tensor
    rel: torch.Tensor
    num_entities: int
    num_relations: int  # size of the expanded relation table


def expanded_relation_count(relation_count: int) -> int:
    """Forward + inverse relations plus one shared self-loop relation."""
    return 2 * relation_count + 1


def build_incidence(kg: Mmkg, shared_relation_count: int | None = None) -> Incidence:
    """Materialize both edge directions plus per-entity self-loops.

    A triple (h, r, t) yields (h <- t via r) and (t <- h via r + R); every
    entity gets a self-loop under the shared relation id 2R. R is the
    relation vocabulary size shared by the graph pair.
    """
    r_count = shared_relation_count if shared_relation_count is not None else kg.relation_count
    if kg.relation_count > r_count:
        raise ValueError("graph relation ids exceed the shared vocabulary")
    heads = kg.triples[:, 0] if len(kg.triples) else np.zeros(0, dtype=np.int64)
    rels = kg.triples[:, 1] if len(kg.triples) else np.zeros(0, dtype=np.int64)
    tails = kg.triples[:, 2] if len(kg.triples) else np.zeros(0, dtype=np.int64)
    loop = np.arange(kg.entity_count, dtype=np.int64)
    dst = np.concatenate([heads, tails, loop])
    src = np.concatenate([tails, heads, loop])
    rel = np.concatenate([rels, rels + r_count, np.full(kg.entity_count, 2 * r_count)])
    return Incidence(
        dst=torch.from_numpy(dst), src=torch.from_numpy(src), rel=torch.from_numpy(rel),
        num_entities=kg.entity_count,
        num_relations=expanded_relation_count(r_count))


def _uniform(shape, fan_in, generator, dtype):
    bound = 1.0 / float(np.sqrt(fan_in))
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound


class RelationalReflectionEncoder(nn.Module):
    """Stacked reflection-attention layers; output concatenates all layer states."""

    def __init__(self, in_dim: int, hidden_dim: int, num_relations: int,
                 layer_count: int = 2, generator=None, dtype=torch.float32):
        super().__init__()
        if layer_count < 1:
            raise ValueError("layer_count must be positive")
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.layer_count = layer_count
        self.num_relations = num_relations
        self.input_projection = nn.Parameter(_uniform((in_dim, hidden_dim), in_dim, generator, dtype))
        rel = _uniform((num_relations, hidden_dim), hidden_dim, generator, dtype)
        self.relation_embeddings = nn.Parameter(l2_normalize_rows(rel))
        self.attention_vector = nn.Parameter(_uniform((hidden_dim,), hidden_dim, generator, dtype))

    @property
    def out_dim(self) -> int:
        return self.hidden_dim * (self.layer_count + 1)

    def attention_weights(self, incidence: Incidence) -> torch.Tensor:
        logits = self.relation_embeddings[incidence.rel] @ self.attention_vector
        return segment_softmax(logits, incidence.dst, incidence.num_entities)

    def forward(self, incidence: Incidence, features: torch.Tensor) -> torch.Tensor:
        if features.shape[0] != incidence.num_entities:
            raise ValueError("feature rows do not match the incidence entity count")
        if features.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim}-dim input features, got {features.shape[1]}")
        if incidence.num_relations > self.num_relations:
            raise ValueError("incidence relation ids exceed the relation table")
        h = features @ self.input_projection
        rel = self.relation_embeddings[incidence.rel]
        alpha = self.attention_weights(incidence).unsqueeze(1)
        states = [h]
        for _ in range(self.layer_count):
            src_h = h[incidence.src]
            # reflection applied without materializing I - 2 r r^T
            msg = src_h - 2.0 * rel * (rel * src_h).sum(dim=1, keepdim=True)
            agg = torch.zeros_like(h).index_add(0, incidence.dst, alpha * msg)
            h = torch.tanh(agg)
            states.append(h)
        return torch.cat(states, dim=1)

    @torch.no_grad()
    def renormalize_relations(self, eps: float = 1e-12) -> None:
        self.relation_embeddings.copy_(l2_normalize_rows(self.relation_embeddings, eps))


class VisualProjection(nn.Module):
    """Linear map from precomputed image features to the visual embedding space."""

    def __init__(self, image_dim: int, visual_dim: int, generator=None, dtype=torch.float32):
        super().__init__()
        self.image_dim = image_dim
        self.visual_dim = visual_dim
        self.projection = nn.Parameter(_uniform((image_dim, visual_dim), image_dim, generator, dtype))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.image_dim:
            raise ValueError(f"expected {self.image_dim}-dim image features, got {features.shape[1]}")
        return features @ self.projection


def encode_graph(graph: "GraphTensors", encoder: RelationalReflectionEncoder) -> torch.Tensor:
    """Attribute-seeded graph embedding rows, L2-normalized."""
    return l2_normalize_rows(encoder(graph.incidence, graph.attributes))


def encode_fused(graph: "GraphTensors", encoder: RelationalReflectionEncoder) -> torch.Tensor:
    """Image-seeded graph embedding rows (cross-modal fusion), L2-normalized."""
    return l2_normalize_rows(encoder(graph.incidence, graph.images))


def encode_visual(graph: "GraphTensors", visual: VisualProjection) -> torch.Tensor:
    """Projected image embedding rows, L2-normalized."""
    return l2_normalize_rows(visual(graph.images))


@dataclass
class GraphTensors:
    """One graph's incidence structure and initial node features as tensors."""

    incidence: Incidence
    attributes: torch.Tensor
    images: torch.Tensor

    @property
    def entity_count(self) -> int:
        return self.incidence.num_entities


def graph_tensors(kg: Mmkg, shared_relation_count: int | None = None,
                  dtype=torch.float32) -> GraphTensors:
    return GraphTensors(
        incidence=build_incidence(kg, shared_relation_count),
        attributes=torch.from_numpy(kg.attribute_matrix()).to(dtype),
        images=torch.from_numpy(kg.image_features).to(dtype))


def prepare_pair(kg1: Mmkg, kg2: Mmkg, dtype=torch.float32):
    """Tensors for both graphs over the shared relation/attribute vocabulary."""
    if kg1.attribute_dim != kg2.attribute_dim:
        raise ValidationError("paired graphs must share the attribute vocabulary")
    if kg1.image_dim != kg2.image_dim:
        raise ValidationError("paired graphs must share the image feature dimension")
    shared = max(kg1.relation_count, kg2.relation_count)
    return graph_tensors(kg1, shared, dtype), graph_tensors(kg2, shared, dtype)


@dataclass
class ModalityEmbeddings:
    """Frozen per-entity embeddings for one graph (rows unit-norm or zero)."""

    z_v: np.ndarray
    z_g: np.ndarray
    z_m: np.ndarray

    @property
    def entity_count(self) -> int:
        return self.z_v.shape[0]

    def validate(self, tol: float = 1e-6) -> None:
        for name in ("z_v", "z_g", "z_m"):
            z = getattr(self, name)
            if not np.isfinite(z).all():
                raise ValidationError(f"{name} contains non-finite values")
            norms = np.linalg.norm(z, axis=1)
            bad = ~((np.abs(norms - 1.0) <= tol) | (norms <= tol))
            if bad.any():
                raise ValidationError(f"{name} has rows that are neither unit-norm nor zero")


class AlignmentModel(nn.Module):
    """All trainable state: two reflection encoders, the visual projection,
    and the score-fusion logits phi. Branches disabled by the toggles emit
    zero embeddings, which score 0 against everything."""

    def __init__(self, attribute_dim: int, image_dim: int, relation_count: int,
                 hidden_dim: int = 300, layer_count: int = 2, visual_dim: int = 100,
                 use_visual: bool = True, use_graph: bool = True, use_fused: bool = True,
                 rng_seed: int = 0, dtype=torch.float32):
        super().__init__()
        generator = torch.Generator().manual_seed(rng_seed)
        num_rel = expanded_relation_count(relation_count)
        self.attribute_dim = attribute_dim
        self.image_dim = image_dim
        self.relation_count = relation_count
        self.use_visual = use_visual
        self.use_graph = use_graph
        self.use_fused = use_fused
        self.graph_encoder = RelationalReflectionEncoder(
            attribute_dim, hidden_dim, num_rel, layer_count, generator, dtype)
        self.fused_encoder = RelationalReflectionEncoder(
            image_dim, hidden_dim, num_rel, layer_count, generator, dtype)
        self.visual = VisualProjection(image_dim, visual_dim, generator, dtype)
        self.phi = nn.Parameter(torch.zeros(3, dtype=dtype))

    def fusion_weights(self) -> torch.Tensor:
        return torch.softmax(self.phi, dim=0)

    def fusion_params(self) -> FusionParams:
        return FusionParams(*(float(p) for p in self.phi.detach()))

    def embed(self, graph: GraphTensors):
        """Differentiable (z_v, z_g, z_m) for one graph."""
        n = graph.entity_count
        dtype = self.phi.dtype
        if self.use_visual:
            z_v = encode_visual(graph, self.visual)
        else:
            z_v = torch.zeros((n, self.visual.visual_dim), dtype=dtype)
        if self.use_graph:
            z_g = encode_graph(graph, self.graph_encoder)
        else:
            z_g = torch.zeros((n, self.graph_encoder.out_dim), dtype=dtype)
        if self.use_fused:
            z_m = encode_fused(graph, self.fused_encoder)
        else:
            z_m = torch.zeros((n, self.fused_encoder.out_dim), dtype=dtype)
        return z_v, z_g, z_m

    @torch.no_grad()
    def modality_embeddings(self, graph: GraphTensors) -> ModalityEmbeddings:
        """Frozen numpy snapshot of embed() for scoring and evaluation."""
        z_v, z_g, z_m = self.embed(graph)
        return ModalityEmbeddings(z_v=z_v.numpy().copy(), z_g=z_g.numpy().copy(),
                                  z_m=z_m.numpy().copy())

    @torch.no_grad()
    def renormalize_relations(self) -> None:
        self.graph_encoder.renormalize_relations()
        self.fused_encoder.renormalize_relations()
