"""Synthetic tasks: determinism, label structure, splits and the binary cache."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmfuse import binfmt, synth
from ssmfuse.config import RunConfig
from ssmfuse.errors import ConfigError, SchemaError, ValidationError
from ssmfuse.qa import MASK_ID, PAD_ID

FACTORED = RunConfig(mode="factored")
COMPOSED = RunConfig(mode="composed")


def within_3_sigma(counts, p):
    n = counts.sum()
    sigma = np.sqrt(n * p * (1 - p))
    return np.all(np.abs(counts - n * p) <= 3 * sigma)


def table_classifier_accuracy(feature_train, label_train, feature_test, label_test, n_feat, n_lab):
    """Bayes-optimal lookup from a discrete feature to the majority label, fit on train."""
    table = np.zeros((n_feat, n_lab))
    np.add.at(table, (feature_train, label_train), 1)
    return float((table.argmax(axis=1)[feature_test] == label_test).mean())


@pytest.fixture(scope="module")
def factored_10k():
    return synth.gen_split(3, 10_000, FACTORED)


@pytest.fixture(scope="module")
def composed_10k():
    return synth.gen_split(3, 10_000, COMPOSED)


class TestGenSample:
    @pytest.mark.parametrize("mode", ["factored", "composed"])
    def test_deterministic(self, mode):
        cfg = RunConfig(mode=mode)
        a, b = synth.gen_sample(42, cfg), synth.gen_sample(42, cfg)
        np.testing.assert_array_equal(a.x_V, b.x_V)
        np.testing.assert_array_equal(a.tokens_T, b.tokens_T)
        assert (a.verb_label, a.noun_label) == (b.verb_label, b.noun_label)

    def test_noise_free_full_coverage(self):
        cfg = RunConfig(mode="factored", noise=0.0, k_v=32)
        s = synth.gen_sample(5, cfg)
        proto = synth.task_assets(cfg).codebook[s.verb_label]
        np.testing.assert_array_equal(s.x_V, np.tile(proto, (32, 1)))

    def test_prototype_count(self):
        cfg = RunConfig(mode="factored", noise=0.0, k_v=4)
        s = synth.gen_sample(6, cfg)
        assert np.sum(np.any(s.x_V != 0, axis=1)) == 4

    def test_composed_label_rule(self):
        for seed in range(200):
            s = synth.gen_sample(seed, COMPOSED)
            assert s.verb_label == (s.v_latent + s.noun_label) % COMPOSED.n_verbs

    def test_invalid_mode(self):
        cfg = RunConfig()
        object.__setattr__(cfg, "mode", "tangled")
        with pytest.raises(ConfigError):
            synth.gen_sample(0, cfg)
        with pytest.raises(ConfigError):
            RunConfig(mode="tangled")

    def test_composed_needs_enough_nouns(self):
        with pytest.raises(ConfigError):
            synth.gen_sample(0, RunConfig(mode="composed", n_verbs=8, n_nouns=5))

    def test_text_carries_noun_not_verb(self):
        cfg = FACTORED
        assets = synth.task_assets(cfg)
        s = synth.gen_sample(8, cfg)
        words = [assets.vocab.token(int(i)) for i in s.tokens_T if i != PAD_ID]
        assert synth.noun_names(cfg.n_nouns)[s.noun_label] in words
        assert not set(synth.verb_names(cfg.n_verbs)) & set(words)
        assert s.tokens_T.shape == (cfg.text_len,)

    def test_noun_texts_distinct(self):
        toks = synth.task_assets(FACTORED).noun_tokens
        assert len({tuple(t) for t in toks}) == FACTORED.n_nouns

    def test_embedding_pad_row_zero(self):
        emb = synth.task_assets(FACTORED).embedding
        assert np.all(emb[PAD_ID] == 0) and np.any(emb[MASK_ID] != 0)


class TestMarginals:
    def test_factored_uniform(self, factored_10k):
        assert within_3_sigma(np.bincount(factored_10k.verbs, minlength=8), 1 / 8)
        assert within_3_sigma(np.bincount(factored_10k.nouns, minlength=12), 1 / 12)

    def test_composed_verbs_uniform(self, composed_10k):
        assert within_3_sigma(np.bincount(composed_10k.verbs, minlength=8), 1 / 8)

    def test_composed_noun_residues_uniform(self, composed_10k):
        # residue r is uniform over 8 classes; nouns sharing a residue split its mass
        assert within_3_sigma(np.bincount(composed_10k.nouns % 8, minlength=8), 1 / 8)
        p = np.array([1 / 16] * 4 + [1 / 8] * 4 + [1 / 16] * 4)
        counts = np.bincount(composed_10k.nouns, minlength=12)
        n = counts.sum()
        assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


class TestInformationPlacement:
    @staticmethod
    def halves(ds):
        idx = np.arange(len(ds))
        return idx[:8000], idx[8000:]

    def test_factored_text_says_nothing_about_verb(self, factored_10k):
        tr, te = self.halves(factored_10k)
        ds = factored_10k
        acc = table_classifier_accuracy(ds.nouns[tr], ds.verbs[tr], ds.nouns[te], ds.verbs[te], 12, 8)
        assert acc <= 1 / 8 + 0.05

    def test_factored_video_says_nothing_about_noun(self, factored_10k):
        tr, te = self.halves(factored_10k)
        ds = factored_10k
        # the verb label is the video's full information content in this mode
        acc = table_classifier_accuracy(ds.verbs[tr], ds.nouns[tr], ds.verbs[te], ds.nouns[te], 8, 12)
        assert acc <= 1 / 12 + 0.05

    def test_composed_neither_modality_predicts_verb(self):
        samples = [synth.gen_sample(np.random.SeedSequence([9, i]), COMPOSED) for i in range(10_000)]
        v = np.array([s.v_latent for s in samples])
        n = np.array([s.noun_label for s in samples])
        y = np.array([s.verb_label for s in samples])
        assert table_classifier_accuracy(v[:8000], y[:8000], v[8000:], y[8000:], 8, 8) <= 1 / 8 + 0.05
        assert table_classifier_accuracy(n[:8000], y[:8000], n[8000:], y[8000:], 12, 8) <= 1 / 8 + 0.05
        # both together determine it
        assert table_classifier_accuracy(v * 12 + n, y, v * 12 + n, y, 96, 8) == 1.0


class TestSplit:
    def test_90_10(self):
        ds = synth.gen_split(0, 100, FACTORED)
        assert len(ds.split("train")) == 90 and len(ds.split("val")) == 10
        assert not set(ds.ids[ds.split("train")]) & set(ds.ids[ds.split("val")])
        assert len(set(ds.ids)) == 100

    def test_minimum_size(self):
        with pytest.raises(ValidationError):
            synth.gen_split(0, 1, FACTORED)
        assert len(synth.gen_split(0, 2, FACTORED).split("val")) == 1

    def test_unknown_split(self):
        with pytest.raises(ValidationError):
            synth.gen_split(0, 10, FACTORED).split("test")

    @pytest.mark.parametrize("field, k", [("verbs", 8), ("nouns", 12)])
    def test_val_labels_match_train(self, field, k):
        # one chi-square test at alpha 0.01 on counts pooled over 5 regenerations
        scipy_stats = pytest.importorskip("scipy.stats")
        table = np.zeros((2, k), dtype=np.int64)
        for seed in range(5):
            ds = synth.gen_split(seed, 3000, COMPOSED)
            labels = getattr(ds, field)
            for row, name in enumerate(("train", "val")):
                table[row] += np.bincount(labels[ds.split(name)], minlength=k)
        _, p, _, _ = scipy_stats.chi2_contingency(table)
        assert p > 0.01

    def test_sample_seeds_independent_of_n(self):
        a = synth.gen_split(4, 20, FACTORED)
        b = synth.gen_split(4, 30, FACTORED)
        np.testing.assert_array_equal(a.x_V, b.x_V[:20])


class TestCache:
    def test_round_trip(self, tmp_path):
        ds = synth.gen_split(1, 50, COMPOSED)
        path = tmp_path / "d.ssmf"
        ds.save(path)
        assert path.read_bytes()[:4] == b"SSMF"
        back = synth.SynthDataset.load(path, COMPOSED.replace(seed=1, n_samples=50))
        for f in ("x_V", "tokens", "verbs", "nouns", "ids", "is_val"):
            np.testing.assert_array_equal(getattr(back, f), getattr(ds, f))
        assert back.to_bytes() == ds.to_bytes()

    def test_config_mismatch(self, tmp_path):
        path = tmp_path / "d.ssmf"
        synth.gen_split(1, 20, COMPOSED).save(path)
        with pytest.raises(ValidationError, match="different configuration"):
            synth.SynthDataset.load(path, COMPOSED.replace(seed=1, n_samples=20, noise=0.1))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.ssmf"
        path.write_bytes(b"SSMC" + synth.gen_split(1, 5, COMPOSED).to_bytes()[4:])
        with pytest.raises(SchemaError, match="magic"):
            synth.SynthDataset.load(path)

    def test_version_check(self):
        blob = binfmt.pack(synth.MAGIC, 99, "h", {"x": np.zeros(1)})
        with pytest.raises(SchemaError, match="version"):
            synth.SynthDataset.from_bytes(blob)

    def test_dataset_for_prefers_file(self, tmp_path):
        cfg = COMPOSED.replace(n_samples=20, seed=2)
        path = tmp_path / "d.ssmf"
        synth.gen_split(2, 20, cfg).save(path)
        assert synth.dataset_for(cfg.replace(data=str(path))).to_bytes() == synth.dataset_for(cfg).to_bytes()


class TestBinfmt:
    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           st.tuples(st.lists(st.integers(0, 3), max_size=3), st.booleans()), max_size=4),
           st.text(alphabet="0123456789abcdef", max_size=64))
    def test_round_trip(self, layout, h):
        rng = np.random.default_rng(0)
        arrays = {k: (rng.integers(-5, 5, size=shape) if ints else rng.normal(size=shape))
                  for k, (shape, ints) in layout.items()}
        blob = binfmt.pack(b"TEST", 3, h, arrays)
        version, h2, back = binfmt.unpack(blob, b"TEST")
        assert (version, h2) == (3, h) and list(back) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
            assert back[k].dtype.kind == ("i" if layout[k][1] else "f")

    def test_truncated(self):
        blob = binfmt.pack(b"TEST", 1, "h", {"a": np.arange(10.0)})
        with pytest.raises(SchemaError, match="truncated"):
            binfmt.unpack(blob[:-3], b"TEST")

    def test_trailing_bytes(self):
        blob = binfmt.pack(b"TEST", 1, "h", {"a": np.arange(3)})
        with pytest.raises(SchemaError):
            binfmt.unpack(blob + b"\0", b"TEST")

    def test_unsupported_dtype(self):
        with pytest.raises(SchemaError):
            binfmt.pack(b"TEST", 1, "h", {"s": np.array(["x"])})
