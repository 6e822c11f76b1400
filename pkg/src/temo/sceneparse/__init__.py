"""Prompt chunking, point clustering and phrase/object alignment."""
from .chunker import NounPhrase, NounPhraseChunker, PromptParseError, extract_noun_phrases, tokenize
from .gmm import GaussianMixture, GmmModel, assign_clusters, gmm_fit
from .graph import (CrossModalGraph, MatchingError, ObjectAssignment, build_graph, decouple_hitmap,
                    match_phrases_to_clusters, phrase_word_mask, solve_assignment, words_of_points)

__all__ = ["NounPhrase", "NounPhraseChunker", "PromptParseError", "extract_noun_phrases", "tokenize",
           "GaussianMixture", "GmmModel", "assign_clusters", "gmm_fit",
           "CrossModalGraph", "MatchingError", "ObjectAssignment", "build_graph", "decouple_hitmap",
           "match_phrases_to_clusters", "phrase_word_mask", "solve_assignment", "words_of_points"]
