"""
Tests for vocabulary, embeddings and weighted text vectors.
"""

import math
import os
import tempfile
import unittest

import numpy as np

from core.text_repr import (
    EmbeddingError, EmbeddingMatrix, EmptyCorpusError, Vocabulary, Weighting, build_vocab, fallback_embeddings,
    fallback_vector, load_embeddings, make_encoder, represent, sat_doc_average, token_weights,
)


class TestVocabulary(unittest.TestCase):

    def setUp(self):
        self.corpus = [("cherry", "pie", "cherry"), ("cherry", "tree"), ("apple",)]
        self.vocab = build_vocab(self.corpus)

    def test_dense_sorted_index(self):
        self.assertEqual(self.vocab.words(), ["apple", "cherry", "pie", "tree"])
        self.assertEqual(sorted(self.vocab.index.values()), [0, 1, 2, 3])
        self.assertEqual(self.vocab.df["cherry"], 2)
        self.assertEqual(self.vocab.n_docs, 3)

    def test_idf(self):
        self.assertAlmostEqual(self.vocab.idf("cherry"), math.log(4 / 3) + 1, places=12)
        self.assertAlmostEqual(self.vocab.idf("unseen"), math.log(4) + 1, places=12)

    def test_min_count(self):
        vocab = build_vocab(self.corpus, min_count=2)
        self.assertEqual(vocab.words(), ["cherry"])

    def test_empty_corpus(self):
        with self.assertRaises(EmptyCorpusError):
            build_vocab([])

    def test_tsv_roundtrip_and_hash(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "vocab.tsv")
            self.vocab.to_tsv(path)
            again = Vocabulary.from_tsv(path)
        self.assertEqual(dict(again.index), dict(self.vocab.index))
        self.assertEqual(again.n_docs, 3)
        self.assertEqual(again.content_hash(), self.vocab.content_hash())
        self.assertNotEqual(build_vocab(self.corpus[:2]).content_hash(), self.vocab.content_hash())


class TestEmbeddings(unittest.TestCase):

    def setUp(self):
        self.vocab = build_vocab([("cherry", "pie"), ("tree",)])

    def test_fallback_vector_is_stable(self):
        a = fallback_vector("cherry", 8)
        np.testing.assert_array_equal(a, fallback_vector("cherry", 8))
        self.assertFalse(np.allclose(a, fallback_vector("pie", 8)))
        self.assertLess(np.abs(a).max(), 1.0)

    def test_load_word2vec_text(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "vectors.txt")
            with open(path, "w", encoding="utf-8") as f:
                f.write("3 2\n")
                f.write("cherry 1.0 2.0\n")
                f.write("pie 0.5 -1.5\n")
                f.write("other 9 9\n")
            emb = load_embeddings(path, self.vocab, dim=2)
        self.assertEqual(emb.n_from_file, 2)
        np.testing.assert_allclose(emb.matrix[self.vocab.index["cherry"]], [1.0, 2.0])
        np.testing.assert_allclose(emb.matrix[self.vocab.index["tree"]], fallback_vector("tree", 2))

    def test_dimension_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "vectors.txt")
            with open(path, "w", encoding="utf-8") as f:
                f.write("1 3\ncherry 1 2 3\n")
            with self.assertRaises(EmbeddingError):
                load_embeddings(path, self.vocab, dim=2)

    def test_matrix_is_read_only(self):
        emb = fallback_embeddings(self.vocab, 4)
        with self.assertRaises(ValueError):
            emb.matrix[0, 0] = 1.0


class TestRepresentation(unittest.TestCase):

    def setUp(self):
        self.vocab = build_vocab([("cherry", "pie"), ("cherry", "tree"), ("stone",)])
        matrix = np.zeros((len(self.vocab), 3))
        for word, row in {"cherry": [1, 0, 0], "pie": [0, 1, 0], "tree": [0, 0, 1], "stone": [1, 1, 1]}.items():
            matrix[self.vocab.index[word]] = row
        self.emb = EmbeddingMatrix(matrix)

    def test_empty_and_oov_give_zero(self):
        np.testing.assert_array_equal(represent((), self.vocab, self.emb), np.zeros(3))
        np.testing.assert_array_equal(represent(("zzz",), self.vocab, self.emb), np.zeros(3))

    def test_single_word_is_its_embedding(self):
        np.testing.assert_allclose(represent(("pie", "zzz"), self.vocab, self.emb), [0, 1, 0])

    def test_tfidf_weights(self):
        weights = token_weights(("cherry", "cherry", "pie"), self.vocab, Weighting.TFIDF)
        self.assertAlmostEqual(weights["cherry"], 2 * self.vocab.idf("cherry"))
        vec = represent(("cherry", "cherry", "pie"), self.vocab, self.emb)
        total = weights["cherry"] + weights["pie"]
        np.testing.assert_allclose(vec, [weights["cherry"] / total, weights["pie"] / total, 0.0])

    def test_repeating_the_text_changes_nothing(self):
        for tokens in (("cherry", "pie"), ("cherry", "cherry", "tree", "zzz"), ("stone", "pie", "tree")):
            for weighting in Weighting:
                np.testing.assert_allclose(represent(tokens + tokens, self.vocab, self.emb, weighting),
                                           represent(tokens, self.vocab, self.emb, weighting), atol=1e-12)

    def test_uniform_and_idf_weighting(self):
        uniform = represent(("cherry", "pie"), self.vocab, self.emb, Weighting.UNIFORM)
        np.testing.assert_allclose(uniform, [0.5, 0.5, 0.0])
        idf = token_weights(("cherry", "cherry"), self.vocab, Weighting.IDF)
        self.assertAlmostEqual(idf["cherry"], self.vocab.idf("cherry"))

    def test_sat_doc_average(self):
        np.testing.assert_array_equal(sat_doc_average([], 3), np.zeros(3))
        avg = sat_doc_average([np.array([1.0, 0, 0]), np.array([0, 1.0, 0])], 3)
        np.testing.assert_allclose(avg, [0.5, 0.5, 0.0])

    def test_encoder_caches_and_handles_unknown_docs(self):
        docs = {"d1": ("cherry", "pie"), "d2": ("tree",)}
        encoder = make_encoder(docs, dim=5)
        self.assertIs(encoder.doc_vector("d1"), encoder.doc_vector("d1"))
        np.testing.assert_array_equal(encoder.doc_vector("missing"), np.zeros(5))
        self.assertEqual(encoder.doc_matrix(["d1", "d2", "missing"]).shape, (3, 5))
        np.testing.assert_allclose(encoder.sat_vector(["d2"]), encoder.doc_vector("d2"))
        self.assertEqual(encoder.dim, 5)


if __name__ == "__main__":
    unittest.main()
