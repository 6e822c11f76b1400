import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from temo.embed import ColorSemanticsProvider
from temo.geometry import CameraPose, render_geometry_pass
from temo.scenes import two_sphere_mesh
from temo.sceneparse import (CrossModalGraph, GaussianMixture, GmmModel, MatchingError, NounPhraseChunker,
                             ObjectAssignment, PromptParseError, assign_clusters, build_graph, decouple_hitmap,
                             extract_noun_phrases, gmm_fit, match_phrases_to_clusters, solve_assignment,
                             tokenize)
from temo.sceneparse.graph import similarity_matrix

CORPUS = json.loads((Path(__file__).parent / "data" / "phrase_corpus.json").read_text())


# -- chunker ------------------------------------------------------------------


@pytest.mark.parametrize("case", CORPUS, ids=[c["prompt"] for c in CORPUS])
def test_golden_corpus(case):
    got = [[list(p.adjectives), p.head_noun] for p in extract_noun_phrases(case["prompt"])]
    assert got == case["phrases"]


def test_spans_and_ids():
    ps = extract_noun_phrases("a red sphere and a blue sphere")
    assert [p.span for p in ps] == [(1, 2), (5, 6)]
    assert [p.phrase_id for p in ps] == [0, 1]
    assert ps[0].text == "red sphere"


def test_attachment_kept_in_span():
    (p,) = extract_noun_phrases("a crystal skull on a stone table")
    assert p.span == (1, 6)
    assert p.attachment == ("on", "a", "stone", "table")


@pytest.mark.parametrize("prompt", ["", "   ", "a the and", ", ;"])
def test_no_phrase(prompt):
    with pytest.raises(PromptParseError):
        extract_noun_phrases(prompt)


def test_tokenize_matches_whitespace_count():
    prompt = "A Red, sphere; and a BLUE sphere."
    assert tokenize(prompt) == ["a", "red", "sphere", "and", "a", "blue", "sphere"]


def test_chunker_transformer():
    out = NounPhraseChunker().fit_transform(["a dragon", "a red cube and a cat"])
    assert [len(x) for x in out] == [1, 2]


WORD = st.sampled_from(["red", "wooden", "tiny", "glass", "old", "cat", "vase", "lamp", "horse", "robot"])


@given(st.lists(WORD, min_size=0, max_size=3), WORD, st.lists(WORD, min_size=0, max_size=3), WORD)
def test_two_phrase_roundtrip(adj1, n1, adj2, n2):
    prompt = " ".join(["a"] + adj1 + [n1, "and", "a"] + adj2 + [n2])
    ps = extract_noun_phrases(prompt)
    assert [p.as_tuple() for p in ps] == [(adj1, n1), (adj2, n2)]
    assert ps[0].span[1] < ps[1].span[0]


# -- gmm ------------------------------------------------------------------------


def blobs(seed):
    r = np.random.default_rng(seed)
    a = r.normal(0, 0.1, (100, 3)) + [-5, 0, 0]
    b = r.normal(0, 0.1, (100, 3)) + [5, 0, 0]
    return np.vstack([a, b])


@pytest.mark.parametrize("seed", range(10))
def test_two_blobs_match_nearest_centroid(seed):
    X = blobs(seed)
    model = gmm_fit(X, 2, rng_seed=seed)
    labels = assign_clusters(model, X)
    oracle = np.argmin(((X[:, None] - model.means[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(labels, oracle)
    assert len(set(labels[:100])) == 1 and labels[0] != labels[-1]


@pytest.mark.parametrize("seed", range(5))
def test_log_likelihood_non_decreasing(seed):
    X = np.random.default_rng(seed).normal(size=(150, 3)) * [1, 2, 0.5]
    ll = gmm_fit(X, 3, rng_seed=seed).log_likelihoods
    assert np.all(np.diff(ll) >= -1e-9)


def test_identical_points_single_component():
    X = np.tile([1.0, 2.0, 3.0], (10, 1))
    m = gmm_fit(X, 1)
    np.testing.assert_allclose(m.means[0], [1, 2, 3])
    np.testing.assert_allclose(np.linalg.eigvalsh(m.covariances[0]), 1e-6, rtol=1e-6)


def test_too_many_components():
    with pytest.raises(ValueError):
        gmm_fit(np.zeros((2, 3)), 3)


def test_model_invariants():
    m = gmm_fit(blobs(0), 2)
    assert abs(m.weights.sum() - 1) < 1e-9 and np.all(m.weights >= 0)
    for c in m.covariances:
        np.testing.assert_allclose(c, c.T)
        assert np.linalg.eigvalsh(c).min() >= 1e-6 * (1 - 1e-9)


def test_assign_against_density_oracle(rng):
    model = GmmModel(np.array([[0, 0, 0], [1, 1, 0], [0, 2, 1.0]]),
                     np.stack([np.eye(3) * s for s in (0.5, 1.0, 0.3)]), np.array([0.2, 0.5, 0.3]))
    X = rng.normal(size=(200, 3)) + 0.5
    dens = np.stack([w * multivariate_normal(m, c).pdf(X)
                     for m, c, w in zip(model.means, model.covariances, model.weights)], axis=1)
    assert np.array_equal(assign_clusters(model, X), np.argmax(dens, axis=1))


def test_assign_point_at_mean_and_tie():
    model = GmmModel(np.array([[-1.0, 0, 0], [1.0, 0, 0]]), np.stack([np.eye(3)] * 2), np.array([0.5, 0.5]))
    assert assign_clusters(model, [[1.0, 0, 0]])[0] == 1
    assert assign_clusters(model, [[0.0, 0.3, 0]])[0] == 0


def test_estimator_wrapper():
    est = GaussianMixture(n_components=2, random_state=3).fit(blobs(3))
    assert est.get_params()["n_components"] == 2
    np.testing.assert_array_equal(est.predict(blobs(3)), est.labels_)
    assert est.score_samples(blobs(3)).shape == (200,)


def test_gmm_model_roundtrip():
    m = gmm_fit(blobs(1), 2)
    back = GmmModel.from_dict(json.loads(json.dumps(m.to_dict())))
    np.testing.assert_array_equal(back.means, m.means)


# -- hit map decoupling and matching -----------------------------------------


def two_sphere_view(res=32):
    return render_geometry_pass(two_sphere_mesh(), CameraPose([0, 0, 3.0]), (res, res))


def test_decouple_left_right_by_column():
    buf, hit = two_sphere_view()
    labels = (buf.hit_points()[:, 0] > 0).astype(int)
    masks = decouple_hitmap(hit, buf, labels, 2)
    assert not (masks[0] & masks[1]).any()
    np.testing.assert_array_equal(masks[0] | masks[1], hit)
    cols = np.arange(hit.shape[1])[None, :].repeat(hit.shape[0], 0)
    assert cols[masks[0]].max() < hit.shape[1] / 2 <= cols[masks[1]].min()


def test_decouple_single_cluster_and_empty():
    buf, hit = two_sphere_view(8)
    np.testing.assert_array_equal(decouple_hitmap(hit, buf, np.zeros(buf.n_hits, int), 1)[0], hit)
    empty = decouple_hitmap(np.zeros((4, 4), bool), None, [], 3)
    assert empty.shape == (3, 4, 4) and not empty.any()


def test_decouple_label_count_mismatch():
    buf, hit = two_sphere_view(8)
    with pytest.raises(ValueError):
        decouple_hitmap(hit, buf, np.zeros(buf.n_hits + 1, int), 2)


def test_solve_assignment_example():
    poc, total = solve_assignment([[0.9, 0.1], [0.2, 0.8]])
    assert poc.tolist() == [0, 1] and total == pytest.approx(1.7)


@given(st.integers(2, 5), st.integers(0, 10_000))
def test_solve_assignment_is_optimal(k, seed):
    sim = np.random.default_rng(seed).uniform(-1, 1, (k, k))
    best = max(sum(sim[p, c] for p, c in enumerate(perm)) for perm in itertools.permutations(range(k)))
    poc, total = solve_assignment(sim)
    assert sorted(poc.tolist()) == list(range(k))
    assert total == pytest.approx(best)


def test_match_colored_objects():
    provider = ColorSemanticsProvider(0)
    buf, hit = two_sphere_view()
    labels = (buf.hit_points()[:, 0] > 0).astype(int)  # 0 = left
    masks = decouple_hitmap(hit, buf, labels, 2)
    img = np.zeros(hit.shape + (3,))
    img[masks[0]] = [1, 0, 0]
    img[masks[1]] = [0, 0, 1]
    phrases = extract_noun_phrases("a red sphere and a blue sphere")
    sim = similarity_matrix(phrases, masks, img, provider)
    # oracle: direct cosines of the same masked images against phrase text vectors
    feats = provider.image_features(np.stack([np.where(masks[c][..., None], img, 0) for c in range(2)])).data
    txt = np.stack([provider.global_text(p) for p in ("red sphere", "blue sphere")])
    ref = (txt / np.linalg.norm(txt, axis=1, keepdims=True)) @ (feats / np.linalg.norm(feats, axis=1, keepdims=True)).T
    np.testing.assert_allclose(sim, ref, atol=1e-12)
    assert sim[0, 0] > sim[0, 1] and sim[1, 1] > sim[1, 0]
    assert match_phrases_to_clusters(phrases, masks, img, provider).tolist() == [0, 1]
    swapped = match_phrases_to_clusters(phrases, masks[::-1], img, provider)
    assert swapped.tolist() == [1, 0]


def test_match_count_mismatch_and_single():
    phrases = extract_noun_phrases("a dragon")
    masks = np.zeros((2, 4, 4), bool)
    with pytest.raises(MatchingError, match="1 noun phrases but 2 clusters"):
        match_phrases_to_clusters(phrases, masks, np.zeros((4, 4, 3)), None)
    assert match_phrases_to_clusters(phrases, masks[:1], np.zeros((4, 4, 3)), None).tolist() == [0]


# -- cross-modal graph --------------------------------------------------------


def test_graph_complete_bipartite_single_cluster():
    phrases = extract_noun_phrases("a red dragon")
    g = build_graph(ObjectAssignment(np.zeros(3, int), np.array([0])), phrases)
    assert g.n_edges == 6


def test_graph_edge_count_two_clusters():
    phrases = extract_noun_phrases("a red cat and a big old dog")  # 2 and 3 words
    labels = np.array([0, 0, 0, 1, 1, 1, 1])
    g = build_graph(ObjectAssignment(labels, np.array([0, 1])), phrases, n_words=8)
    assert g.n_edges == 3 * 2 + 4 * 3


def test_graph_rejects_non_bijection():
    phrases = extract_noun_phrases("a red cat and a dog")
    with pytest.raises(MatchingError):
        build_graph(ObjectAssignment(np.zeros(2, int), np.array([0, 0])), phrases)


@given(st.lists(st.integers(0, 2), min_size=1, max_size=30), st.permutations([0, 1, 2]))
def test_graph_edge_rule(labels, perm):
    phrases = extract_noun_phrases("a red cat, a blue old dog and a horse")
    n_words = len(tokenize("a red cat, a blue old dog and a horse"))
    labels = np.array(labels)
    g = build_graph(ObjectAssignment(labels, np.array(perm)), phrases, n_words)
    adj = g.adjacency()
    for i, j in itertools.product(range(len(labels)), range(n_words)):
        p = phrases[perm[labels[i]]]
        assert adj[i, j] == (j in p.word_indices)
    # bipartite by construction: edges only between point and word index ranges
    assert np.all(g.edges[:, 0] < g.n_points) and np.all(g.edges[:, 1] < g.n_words)
    assert g.n_edges == sum(phrases[perm[c]].n_words for c in labels)


def test_complete_graph():
    g = CrossModalGraph.complete(4, 3)
    assert g.n_edges == 12 and g.adjacency().all()
