import math

import numpy as np
import pytest

from structobs import synth
from structobs.parsing import parse_report, split_sentences
from structobs.synth import (chest_catalog, desk_catalog, generate_corpus, label_report,
                             load_corpus, load_volume, make_catalog, make_taxonomy,
                             save_corpus, save_volume)
from structobs.vision import ParameterError, PatchEmbedder

from conftest import rng


def binom_interval_99(n, p):
    """Exact central 99% interval of Binomial(n, p) by CDF enumeration."""
    probs = []
    log_fact = np.cumsum(np.concatenate([[0.0], np.log(np.arange(1, n + 1))]))
    for k in range(n + 1):
        lp = log_fact[n] - log_fact[k] - log_fact[n - k] + k * math.log(p) + (n - k) * math.log(1 - p)
        probs.append(math.exp(lp))
    cdf = np.cumsum(probs)
    lo = int(np.searchsorted(cdf, 0.005))
    hi = int(np.searchsorted(cdf, 0.995))
    return lo, hi


class TestGenerator:
    def test_same_seed_bitwise_identical(self):
        a = generate_corpus(n=12, seed=3)
        b = generate_corpus(n=12, seed=3)
        for ca, cb in zip(a, b):
            assert ca.report == cb.report
            assert np.array_equal(ca.labels, cb.labels)
            assert np.array_equal(ca.volume, cb.volume)
            assert ca.split == cb.split

    def test_zero_prevalence_all_normal(self):
        cases = generate_corpus(n=8, seed=4, prevalence=0.0)
        for case in cases:
            assert not case.labels.any()
            assert all(s is None for s in case.states)

    def test_n_zero_rejected(self):
        with pytest.raises(ParameterError):
            generate_corpus(n=0, seed=0)

    def test_abnormal_counts_within_binomial_99(self):
        n, prevalence = 256, 0.3
        cases = generate_corpus(n=n, seed=5, prevalence=prevalence)
        lo, hi = binom_interval_99(n, prevalence)
        for s in range(4):
            count = sum(case.states[s] is not None for case in cases)
            assert lo <= count <= hi, f"structure {s}: {count} outside [{lo}, {hi}]"

    def test_split_ratios(self):
        cases = generate_corpus(n=100, seed=6)
        counts = {"train": 0, "val": 0, "test": 0}
        for c in cases:
            counts[c.split] += 1
        assert counts == {"train": 60, "val": 20, "test": 20}

    def test_explicit_counts(self):
        cases = generate_corpus(seed=7, counts=(10, 4, 4))
        assert len(cases) == 18
        assert sum(c.split == "train" for c in cases) == 10

    def test_sentence_count_matches_structures(self):
        cases = generate_corpus(n=3, seed=8, n_content=9, extents=(36, 32, 16))
        for case in cases:
            assert len(split_sentences(case.report)) == 10

    def test_each_sentence_buckets_to_its_structure(self):
        catalog = make_catalog(4)
        for case in generate_corpus(n=20, seed=9):
            parsed = parse_report(case.case_id, case.report, catalog)
            for bucket_sentences in parsed.buckets:
                assert len(bucket_sentences) == 1


class TestLabeler:
    def test_positive_phrase(self):
        taxonomy = make_taxonomy(4)
        labels = label_report("There is a small pulmonary nodule.", taxonomy)
        assert labels[list(taxonomy.names).index("lung_nodule")] == 1
        assert labels.sum() == 1

    def test_negated_phrase_clear(self):
        taxonomy = make_taxonomy(4)
        assert not label_report("No pleural effusion is seen.", taxonomy).any()
        assert not label_report("The heart appears normal without pericardial effusion.", taxonomy).any()

    def test_negation_is_per_sentence(self):
        taxonomy = make_taxonomy(4)
        text = "No pneumothorax is seen. There is a small pleural effusion."
        labels = label_report(text, taxonomy)
        assert labels[list(taxonomy.names).index("pleura_effusion")] == 1
        assert labels[list(taxonomy.names).index("pleura_pneumothorax")] == 0

    def test_round_trip_over_corpus(self):
        taxonomy = make_taxonomy(4)
        for case in generate_corpus(n=64, seed=10, prevalence=0.5):
            assert np.array_equal(label_report(case.report, taxonomy), case.labels)

    def test_round_trip_full_structure_bank(self):
        taxonomy = make_taxonomy(synth.MAX_CONTENT_STRUCTURES)
        cases = generate_corpus(n=32, seed=11, n_content=synth.MAX_CONTENT_STRUCTURES,
                                prevalence=0.6, extents=(36, 32, 16))
        for case in cases:
            assert np.array_equal(label_report(case.report, taxonomy), case.labels)


class TestCatalogs:
    def test_desk_catalog_shape(self):
        cat = desk_catalog()
        assert len(cat) == 5 and cat.names[-1] == "others"

    def test_chest_catalog_has_ten_structures(self):
        assert len(chest_catalog()) == 10

    def test_taxonomy_two_types_per_structure(self):
        assert len(make_taxonomy(4)) == 8
        assert len(set(make_taxonomy(9).phrases)) == 18


class TestImprints:
    def test_abnormal_region_is_shifted(self):
        cases = generate_corpus(n=40, seed=12, prevalence=0.5)
        extents = (32, 32, 16)
        for case in cases:
            for s, state in enumerate(case.states):
                if state is None:
                    band = case.volume[s * 8:(s + 1) * 8]
                    assert abs(band.mean()) < 0.1
                else:
                    t, sev = state
                    xs, ys, zs = synth._imprint_region(s, t, extents, 4)
                    inside = case.volume[xs, ys, zs]
                    assert abs(inside.mean() - synth._imprint_magnitude(sev)) < 0.1
                    other_ys = slice(16, 32) if t == 0 else slice(0, 16)
                    assert abs(case.volume[xs, other_ys, zs].mean()) < 0.1

    def test_linear_probe_separates_abnormal(self):
        """Least-squares probe on mean patch features of an untrained embedder."""
        cases = generate_corpus(n=120, seed=13, prevalence=0.5)
        emb = PatchEmbedder((8, 8, 8), d_v=16, seed=99)
        feats = np.stack([
            emb.embed_volume(case.case_id, case.volume).features.data.mean(axis=0)
            for case in cases])
        design = np.hstack([feats, np.ones((len(cases), 1))])
        train, test = slice(0, 80), slice(80, 120)
        for s in range(4):
            y = np.array([case.states[s] is not None for case in cases], dtype=float)
            w, *_ = np.linalg.lstsq(design[train], 2.0 * y[train] - 1.0, rcond=None)
            pred = design[test] @ w > 0.0
            accuracy = float(np.mean(pred == y[test].astype(bool)))
            assert accuracy >= 0.8, f"structure {s}: probe accuracy {accuracy}"


class TestPersistence:
    def test_volume_round_trip(self, tmp_path):
        vol = rng(14).standard_normal((8, 8, 4))
        path = tmp_path / "v.vol"
        save_volume(path, vol)
        assert np.array_equal(load_volume(path), vol)
        header = path.read_bytes().split(b"\n", 1)[0]
        assert header == b"structobs-volume v1 f8le 8 8 4"

    def test_corpus_round_trip(self, tmp_path):
        cases = generate_corpus(n=6, seed=15)
        save_corpus(tmp_path, cases, make_catalog(4), make_taxonomy(4))
        loaded, catalog, taxonomy = load_corpus(tmp_path)
        assert len(loaded) == 6
        assert catalog == make_catalog(4)
        assert taxonomy == make_taxonomy(4)
        for a, b in zip(loaded, cases):
            assert a.report == b.report
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.volume, b.volume)
            assert a.split == b.split
