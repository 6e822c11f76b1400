"""Per-object hit maps, phrase/cluster matching and the cross-modal graph."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .chunker import NounPhrase


class MatchingError(ValueError):
    pass


def decouple_hitmap(hitmap, buffer, labels, n_clusters: int) -> np.ndarray:
    """Split a hit map into one mask per cluster.

    ``labels`` holds one cluster id per hit pixel in row-major scan order.
    Returns a boolean array (k, H, W) of disjoint masks whose union is ``hitmap``.
    """
    hitmap = np.asarray(hitmap, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    flat = np.flatnonzero(hitmap.reshape(-1))
    if buffer is not None and not np.array_equal(np.asarray(buffer.hit, dtype=bool), hitmap):
        raise ValueError("hit map does not match the intersection buffer")
    if len(labels) != len(flat):
        raise ValueError(f"{len(labels)} labels for {len(flat)} hit pixels")
    masks = np.zeros((n_clusters,) + hitmap.shape, dtype=bool)
    masks.reshape(n_clusters, -1)[labels, flat] = True
    return masks


@dataclass(frozen=True)
class ObjectAssignment:
    cluster_of_point: np.ndarray
    phrase_of_cluster: np.ndarray
    object_hitmaps: np.ndarray = None


def solve_assignment(similarity) -> Tuple[np.ndarray, float]:
    """Bijective phrase->cluster assignment maximising total similarity.

    ``similarity[p, c]`` scores phrase p against cluster c.  Exhaustive search
    for k <= 6 (first optimum in lexicographic order wins), greedy above.
    Returns ``(phrase_of_cluster, total)``.
    """
    sim = np.asarray(similarity, dtype=np.float64)
    k = sim.shape[0]
    if sim.shape != (k, k):
        raise MatchingError(f"similarity must be square, got {sim.shape}")
    if k <= 6:
        best, best_total = None, -np.inf
        for perm in itertools.permutations(range(k)):
            total = sum(sim[p, c] for p, c in enumerate(perm))
            if total > best_total + 1e-12:
                best, best_total = perm, total
        cluster_of_phrase = np.array(best)
    else:
        cluster_of_phrase = -np.ones(k, dtype=np.int64)
        work = sim.copy()
        for _ in range(k):
            p, c = np.unravel_index(np.argmax(work), work.shape)
            cluster_of_phrase[p] = c
            work[p, :] = -np.inf
            work[:, c] = -np.inf
    phrase_of_cluster = np.empty(k, dtype=np.int64)
    phrase_of_cluster[cluster_of_phrase] = np.arange(k)
    total = float(sum(sim[p, c] for p, c in enumerate(cluster_of_phrase)))
    return phrase_of_cluster, total


def similarity_matrix(phrases: Sequence[NounPhrase], object_hitmaps, rendered_neutral_views, provider,
                      background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Cosine between each phrase's text embedding and each object's masked renders.

    ``object_hitmaps`` is (V, k, H, W) and ``rendered_neutral_views`` (V, H, W, 3).
    An object's image embedding is the mean over views in which it is visible.
    """
    masks = np.asarray(object_hitmaps, dtype=bool)
    views = np.asarray(rendered_neutral_views, dtype=np.float64)
    if masks.ndim == 3:
        masks, views = masks[None], views[None]
    k = masks.shape[1]
    bg = np.asarray(background, dtype=np.float64)
    obj_emb = []
    for c in range(k):
        visible = [v for v in range(len(views)) if masks[v, c].any()]
        if not visible:
            raise MatchingError(f"cluster {c} is not visible in any matching view")
        imgs = np.where(masks[visible, c][..., None], views[visible], bg)
        feats = provider.image_features(imgs).data
        obj_emb.append(feats.mean(axis=0))
    obj_emb = np.array(obj_emb)
    txt_emb = np.array([np.asarray(provider.global_text(p.text)) for p in phrases])
    obj_emb /= np.linalg.norm(obj_emb, axis=1, keepdims=True)
    txt_emb /= np.linalg.norm(txt_emb, axis=1, keepdims=True)
    return txt_emb @ obj_emb.T


def match_phrases_to_clusters(phrases: Sequence[NounPhrase], object_hitmaps, rendered_neutral_views,
                              provider, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """phrase_of_cluster maximising total phrase/object similarity."""
    masks = np.asarray(object_hitmaps)
    k = masks.shape[-3]
    if len(phrases) != k:
        raise MatchingError(f"{len(phrases)} noun phrases but {k} clusters")
    if k == 1:
        return np.zeros(1, dtype=np.int64)
    sim = similarity_matrix(phrases, object_hitmaps, rendered_neutral_views, provider, background)
    return solve_assignment(sim)[0]


@dataclass(frozen=True)
class CrossModalGraph:
    """Bipartite graph between surface-point nodes and prompt-word nodes.

    ``edges`` is an (E, 2) array of (point_index, word_index) pairs.
    """

    n_points: int
    n_words: int
    edges: np.ndarray

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_points, self.n_words), dtype=bool)
        if len(self.edges):
            adj[self.edges[:, 0], self.edges[:, 1]] = True
        return adj

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @classmethod
    def from_adjacency(cls, adj) -> "CrossModalGraph":
        adj = np.asarray(adj, dtype=bool)
        return cls(adj.shape[0], adj.shape[1], np.argwhere(adj).astype(np.int64))

    @classmethod
    def complete(cls, n_points: int, n_words: int) -> "CrossModalGraph":
        """Every point linked to every word (attention without scene parsing)."""
        return cls.from_adjacency(np.ones((n_points, n_words), dtype=bool))


def phrase_word_mask(phrases: Sequence[NounPhrase], n_words: int) -> np.ndarray:
    """(n_phrases, n_words) membership of prompt words in each phrase."""
    mask = np.zeros((len(phrases), n_words), dtype=bool)
    for p in phrases:
        if p.span[1] >= n_words:
            raise ValueError(f"phrase span {p.span} exceeds {n_words} prompt words")
        mask[p.phrase_id, p.span[0]:p.span[1] + 1] = True
    return mask


def build_graph(assignment: ObjectAssignment, phrases: Sequence[NounPhrase], n_words: int = None) -> CrossModalGraph:
    """Link each point to every word of the phrase matched to its cluster."""
    poc = np.asarray(assignment.phrase_of_cluster, dtype=np.int64)
    if sorted(poc.tolist()) != list(range(len(poc))):
        raise MatchingError("phrase_of_cluster is not a bijection")
    if n_words is None:
        n_words = max(p.span[1] for p in phrases) + 1
    table = phrase_word_mask(phrases, n_words)
    labels = np.asarray(assignment.cluster_of_point, dtype=np.int64)
    return CrossModalGraph.from_adjacency(table[poc[labels]])


def words_of_points(phrase_of_cluster, labels, phrases: Sequence[NounPhrase], n_words: int) -> np.ndarray:
    """Dense adjacency of the cross-modal graph without materialising edges."""
    table = phrase_word_mask(phrases, n_words)
    return table[np.asarray(phrase_of_cluster)[np.asarray(labels)]]
