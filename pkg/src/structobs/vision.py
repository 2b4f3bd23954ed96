"""Patch embedding, structure-query cross-attention, and top-K patch selection."""

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Array, ShapeError


class ParameterError(ValueError):
    pass


@dataclass
class PatchGrid:
    """Per-volume patch embeddings with their spatial grid extents."""

    subject: str
    features: Array  # (n_patches, d_v)
    grid: tuple


def extract_patches(volume, patch_extents):
    """Flatten non-overlapping patches of a 3-D volume into rows.

    Patches are ordered x-major (x, then y, then z block index); voxels
    inside each patch are flattened in C order. Volume extents must be
    divisible by the patch extents.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ShapeError(f"expected a 3-D volume, got shape {volume.shape}")
    px, py, pz = patch_extents
    vx, vy, vz = volume.shape
    if vx % px or vy % py or vz % pz:
        raise ShapeError(f"volume extents {volume.shape} not divisible by patch extents {tuple(patch_extents)}")
    gx, gy, gz = vx // px, vy // py, vz // pz
    blocks = volume.reshape(gx, px, gy, py, gz, pz)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(gx * gy * gz, px * py * pz), (gx, gy, gz)


class PatchEmbedder:
    """Trainable affine map from flattened voxel patches to d_v features."""

    def __init__(self, patch_extents, d_v, seed=0, init_scale=0.02):
        self.patch_extents = tuple(int(p) for p in patch_extents)
        self.d_v = int(d_v)
        pvol = int(np.prod(self.patch_extents))
        rng = np.random.Generator(np.random.PCG64(seed))
        self.weight = engine.parameter(rng.standard_normal((pvol, d_v)) * init_scale, name="patch/weight")
        self.bias = engine.parameter(np.zeros(d_v), name="patch/bias")

    def params(self):
        return {"patch/weight": self.weight, "patch/bias": self.bias}

    def set_trainable(self, flag):
        for p in self.params().values():
            p.requires_grad = bool(flag)

    def embed_volume(self, subject, volume):
        patches, grid = extract_patches(volume, self.patch_extents)
        feats = engine.add(engine.matmul(Array(patches), self.weight), self.bias)
        return PatchGrid(subject=subject, features=feats, grid=grid)

    def embed_patches(self, subject, patches, grid=None):
        """Embed pre-flattened patch rows (used when patches are cached)."""
        feats = engine.add(engine.matmul(Array(patches), self.weight), self.bias)
        return PatchGrid(subject=subject, features=feats, grid=grid or (patches.shape[0], 1, 1))


class StructureQuerySet:
    """Learnable per-structure visual queries and their score/value projections."""

    def __init__(self, n_structures, d_q, d_v, d_a, d_o, seed=0, init_scale=0.02):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.queries = engine.parameter(rng.standard_normal((n_structures, d_q)) * init_scale, name="query/queries")
        self.w_query = engine.parameter(rng.standard_normal((d_q, d_a)) * init_scale, name="query/w_query")
        self.w_key = engine.parameter(rng.standard_normal((d_v, d_a)) * init_scale, name="query/w_key")
        self.w_value = engine.parameter(rng.standard_normal((d_v, d_o)) * init_scale, name="query/w_value")

    @property
    def n_structures(self):
        return self.queries.shape[0]

    def params(self):
        return {p.name: p for p in (self.queries, self.w_query, self.w_key, self.w_value)}

    def set_trainable(self, flag):
        for p in self.params().values():
            p.requires_grad = bool(flag)


@dataclass
class AttentionResult:
    weights: Array  # (n_structures, n_patches); rows are distributions
    tokens: Array  # (n_structures, d_o) pooled per-structure observations


@dataclass
class SelectedPatches:
    features: Array  # (k * n_structures, d_v)
    provenance: list  # (structure index, patch index), descending weight per structure


def observe(grid, queries):
    """Cross-attend structure queries over patch features.

    weights = softmax_rows(Q Wq (F Wk)^T), tokens = weights (F Wv).
    """
    scores = engine.matmul(
        engine.matmul(queries.queries, queries.w_query),
        engine.transpose(engine.matmul(grid.features, queries.w_key)),
    )
    weights = engine.softmax_rows(scores)
    tokens = engine.matmul(weights, engine.matmul(grid.features, queries.w_value))
    return AttentionResult(weights=weights, tokens=tokens)


def select_patches(result, grid, k):
    """Keep the k highest-attention patches per structure.

    Ties break toward the lower patch index; within a structure the
    selected patches are ordered by descending weight.
    """
    n_patches = grid.features.shape[0]
    if not 1 <= k <= n_patches:
        raise ParameterError(f"k={k} outside [1, {n_patches}]")
    indices = []
    provenance = []
    for s, row in enumerate(result.weights.data):
        order = np.argsort(-row, kind="stable")[:k]
        indices.extend(int(j) for j in order)
        provenance.extend((s, int(j)) for j in order)
    features = engine.take_rows(grid.features, np.array(indices, dtype=np.intp))
    return SelectedPatches(features=features, provenance=provenance)
