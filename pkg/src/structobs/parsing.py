"""Report sentence splitting and keyword-based structure bucketing."""

import re
from dataclasses import dataclass

_TERMINATORS = re.compile(r"[.!?\n]")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class StructureCatalog:
    """Ordered anatomical structures with their matching keywords.

    The last entry is the catch-all bucket for sentences matching no
    keyword; its keyword list must be empty, all other lists non-empty.
    """

    names: tuple
    keywords: tuple

    def __post_init__(self):
        if len(self.names) != len(self.keywords):
            raise CatalogError("names and keyword lists differ in length")
        if len(self.names) < 2:
            raise CatalogError("catalog needs at least one structure plus the catch-all")
        if len(set(self.names)) != len(self.names):
            raise CatalogError("structure names must be unique")
        if self.keywords[-1]:
            raise CatalogError("last (catch-all) entry must have no keywords")
        for name, kws in zip(self.names[:-1], self.keywords[:-1]):
            if not kws:
                raise CatalogError(f"structure {name!r} has an empty keyword list")
            if any(kw != kw.lower() for kw in kws):
                raise CatalogError(f"keywords for {name!r} must be lowercase")

    def __len__(self):
        return len(self.names)

    @property
    def others_index(self):
        return len(self.names) - 1

    @classmethod
    def load(cls, path):
        """Parse a catalog file of ``name: kw1, kw2, ...`` lines."""
        names, keywords = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if ":" not in line:
                    raise CatalogError(f"malformed catalog line: {line!r}")
                name, _, rest = line.partition(":")
                kws = tuple(k.strip().lower() for k in rest.split(",") if k.strip())
                names.append(name.strip())
                keywords.append(kws)
        return cls(tuple(names), tuple(keywords))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for name, kws in zip(self.names, self.keywords):
                fh.write(f"{name}: {', '.join(kws)}\n")


@dataclass
class ParsedReport:
    """Per-structure sentence buckets extracted from one report."""

    subject: str
    buckets: list
    text: str


def split_sentences(text):
    """Split on '.', '!', '?', or newline; spans are stripped, empties dropped."""
    return [s.strip() for s in _TERMINATORS.split(text) if s.strip()]


def bucket(sentences, catalog):
    """Assign each sentence to every structure whose keyword it contains.

    Matching is case-insensitive substring containment. A sentence with no
    match lands only in the catch-all bucket.
    """
    buckets = [[] for _ in catalog.names]
    for sentence in sentences:
        low = sentence.lower()
        matched = False
        for i, kws in enumerate(catalog.keywords[:-1]):
            if any(kw in low for kw in kws):
                buckets[i].append(sentence)
                matched = True
        if not matched:
            buckets[catalog.others_index].append(sentence)
    return buckets


def parse_report(subject, text, catalog):
    return ParsedReport(subject=subject, buckets=bucket(split_sentences(text), catalog), text=text)
