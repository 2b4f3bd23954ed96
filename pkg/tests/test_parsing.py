import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structobs.parsing import CatalogError, StructureCatalog, bucket, parse_report, split_sentences


@pytest.fixture
def catalog():
    return StructureCatalog(
        names=("lung", "heart", "pleura", "others"),
        keywords=(("lung", "pulmonary"), ("heart", "cardiac", "cardiomegaly"), ("pleura", "pleural"), ()),
    )


class TestSplitSentences:
    def test_two_sentences(self):
        out = split_sentences("Lung parenchyma is normal. Heart size is normal.")
        assert out == ["Lung parenchyma is normal", "Heart size is normal"]

    def test_trailing_newline(self):
        assert split_sentences("No pleural effusion.\n") == ["No pleural effusion"]

    def test_empty_report(self):
        assert split_sentences("   \n ") == []

    def test_all_terminators(self):
        assert len(split_sentences("one. two! three? four\nfive.")) == 5


class TestBucket:
    def test_keyword_goes_to_structure(self, catalog):
        out = bucket(["There is a small pleural effusion"], catalog)
        assert out[2] == ["There is a small pleural effusion"]
        assert out[3] == []

    def test_no_keyword_goes_to_others(self, catalog):
        out = bucket(["Patient is supine"], catalog)
        assert out[3] == ["Patient is supine"]
        assert all(not out[i] for i in range(3))

    def test_multi_match_duplicates(self, catalog):
        sentence = "Cardiomegaly and pulmonary edema are noted"
        out = bucket([sentence], catalog)
        assert out[0] == [sentence] and out[1] == [sentence]
        assert out[3] == []

    def test_case_insensitive(self, catalog):
        out = bucket(["PLEURAL thickening is seen"], catalog)
        assert out[2] != []

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from([
        "The lung is clear", "Heart is normal", "Pleural effusion present",
        "Patient is supine", "Cardiomegaly with pulmonary edema",
    ]), min_size=1, max_size=6))
    def test_completeness(self, sentences):
        catalog = StructureCatalog(
            names=("lung", "heart", "pleura", "others"),
            keywords=(("lung", "pulmonary"), ("heart", "cardiac", "cardiomegaly"), ("pleura", "pleural"), ()),
        )
        out = bucket(sentences, catalog)
        total = sum(len(b) for b in out)
        assert total >= len(sentences)
        unmatched = [s for s in sentences if not any(
            kw in s.lower() for kws in catalog.keywords[:-1] for kw in kws)]
        assert out[-1] == unmatched

    def test_determinism(self, catalog):
        text = "The lung is clear. Patient is supine. Cardiomegaly noted."
        a = parse_report("s1", text, catalog)
        b = parse_report("s1", text, catalog)
        assert a.buckets == b.buckets


class TestCatalog:
    def test_last_entry_must_be_empty(self):
        with pytest.raises(CatalogError):
            StructureCatalog(("a", "b"), (("x",), ("y",)))

    def test_non_last_needs_keywords(self):
        with pytest.raises(CatalogError):
            StructureCatalog(("a", "b", "others"), (("x",), (), ()))

    def test_unique_names(self):
        with pytest.raises(CatalogError):
            StructureCatalog(("a", "a", "others"), (("x",), ("y",), ()))

    def test_file_round_trip(self, tmp_path, catalog):
        path = tmp_path / "catalog.txt"
        catalog.save(path)
        loaded = StructureCatalog.load(path)
        assert loaded == catalog

    def test_load_skips_comments(self, tmp_path):
        path = tmp_path / "catalog.txt"
        path.write_text("# comment\nlung: lung\nothers:\n")
        loaded = StructureCatalog.load(path)
        assert loaded.names == ("lung", "others")
