"""CAD model selection: score-weighted voting, embedding lookup, shape IoU."""

from __future__ import annotations

import numpy as np

from .datamodel import CadModel
from .errors import DimensionMismatchError, NoVotesError


def vote_model(observations) -> str:
    """Model id with the highest score-weighted vote; ties break
    lexicographically by id."""
    tally: dict[str, float] = {}
    for obs in observations:
        if obs.model_vote is None:
            continue
        mid = obs.model_vote.cad_model_id
        tally[mid] = tally.get(mid, 0.0) + obs.score
    if not tally:
        raise NoVotesError("no observation carries a model vote")
    return min(tally, key=lambda mid: (-tally[mid], mid))


def cosine_distance(a, b) -> float:
    """1 - cosine similarity; zero-norm vectors get the maximum distance 2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 2.0
    return 1.0 - float(a @ b) / (na * nb)


def nearest_model(embedding, cad_db) -> str:
    """Model id whose embedding is closest in cosine distance; deterministic
    tie break by id."""
    embedding = np.asarray(embedding, dtype=float)
    candidates = [m for m in cad_db if m.embedding is not None]
    if not candidates:
        raise DimensionMismatchError("database carries no embeddings")
    for m in candidates:
        if m.embedding.shape != embedding.shape:
            raise DimensionMismatchError(
                f"model {m.id}: embedding length {m.embedding.size} != "
                f"query length {embedding.size}")
    return min(candidates,
               key=lambda m: (cosine_distance(embedding, m.embedding), m.id)).id


def voxel_occupancy(model: CadModel, resolution: int) -> np.ndarray:
    """Solid occupancy of the model over the unit canonical cube.

    Vertex-only models carry no faces, so occupancy is the convex fill of
    the vertex cloud: a voxel is occupied when its center lies inside the
    Delaunay tessellation (equivalently, the convex hull).
    """
    from scipy.spatial import Delaunay

    axis = (np.arange(resolution) + 0.5) / resolution - 0.5
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    tess = Delaunay(model.vertices)
    inside = tess.find_simplex(centers) >= 0
    return inside.reshape(resolution, resolution, resolution)


def retrieval_iou(model_a: CadModel, model_b: CadModel, resolution: int = 32) -> float:
    """Voxel IoU of two canonical-space models (symmetric in arguments)."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    occ_a = voxel_occupancy(model_a, resolution)
    occ_b = voxel_occupancy(model_b, resolution)
    union = int(np.sum(occ_a | occ_b))
    if union == 0:
        return 0.0
    return float(np.sum(occ_a & occ_b)) / union
