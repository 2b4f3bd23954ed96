"""Deterministic paired (volume, report, labels) corpus generator.

Each case carries one templated sentence per structure plus a catch-all
sentence. Abnormal structures add a constant block of state-specific
magnitude to a designated x-band of the volume, so the abnormality state
is linearly recoverable from flattened patches; severity shows up both in
the sentence wording and in the imprint magnitude. Template pools are
deliberately small so the corpus is rich in duplicate and near-duplicate
sentences across subjects.
"""

import json
import os
import re
from dataclasses import dataclass

import numpy as np

from .decoder import tokenize
from .parsing import StructureCatalog
from .vision import ParameterError

NEGATION_CUES = ("no", "without")

# name, keywords, normal templates, two abnormality types
# (label name, label phrase, severity words, two sentence templates).
_STRUCTURE_BANK = [
    (
        "lung", ("lung", "pulmonary"),
        ("The lungs are clear.", "Lung parenchyma is normal.", "Both lungs appear normal."),
        (
            ("lung_nodule", "pulmonary nodule", ("tiny", "small", "large"),
             ("A {sev} pulmonary nodule is seen.", "There is a {sev} pulmonary nodule.")),
            ("lung_opacity", "opacity", ("faint", "patchy", "dense"),
             ("A {sev} opacity is present in the left lung.", "There is a {sev} opacity in the left lung.")),
        ),
    ),
    (
        "heart", ("heart", "cardiac", "cardiomegaly", "pericardial"),
        ("The heart size is normal.", "Cardiac silhouette is unremarkable.",
         "The heart appears normal without pericardial effusion."),
        (
            ("heart_cardiomegaly", "cardiomegaly", ("mild", "moderate", "severe"),
             ("There is {sev} cardiomegaly.", "The heart shows {sev} cardiomegaly.")),
            ("heart_pericardial_effusion", "pericardial effusion", ("trace", "small", "large"),
             ("A {sev} pericardial effusion is present.", "There is a {sev} pericardial effusion.")),
        ),
    ),
    (
        "pleura", ("pleura", "pleural", "pneumothorax"),
        ("No pleural effusion is seen.", "The pleural spaces are clear.",
         "No pneumothorax or pleural effusion is identified."),
        (
            ("pleura_effusion", "pleural effusion", ("trace", "small", "large"),
             ("A {sev} pleural effusion is present.", "There is a {sev} pleural effusion.")),
            ("pleura_pneumothorax", "pneumothorax", ("tiny", "small", "large"),
             ("A {sev} pneumothorax is noted.", "There is a {sev} pneumothorax.")),
        ),
    ),
    (
        "bone", ("bone", "osseous", "rib", "fracture", "lytic"),
        ("The osseous structures are intact.", "No bone lesion is seen.", "Bones are unremarkable."),
        (
            ("bone_fracture", "fracture", ("subtle", "displaced", "comminuted"),
             ("A {sev} rib fracture is seen.", "There is a {sev} rib fracture.")),
            ("bone_lytic_lesion", "lytic lesion", ("small", "moderate", "large"),
             ("A {sev} lytic lesion is seen in a bone.", "There is a {sev} lytic lesion in a bone.")),
        ),
    ),
    (
        "trachea", ("trachea", "tracheal", "bronch"),
        ("The trachea is patent.", "Trachea and bronchi are unremarkable.", "The tracheal lumen is normal."),
        (
            ("trachea_narrowing", "tracheal narrowing", ("mild", "moderate", "severe"),
             ("There is {sev} tracheal narrowing.", "The airway shows {sev} tracheal narrowing.")),
            ("trachea_wall_thickening", "bronchial wall thickening", ("mild", "moderate", "severe"),
             ("There is {sev} bronchial wall thickening.", "The scan shows {sev} bronchial wall thickening.")),
        ),
    ),
    (
        "esophagus", ("esophag",),
        ("The esophagus is unremarkable.", "The esophagus appears normal.", "No esophageal abnormality is seen."),
        (
            ("esophagus_thickening", "esophageal thickening", ("mild", "moderate", "severe"),
             ("There is {sev} esophageal thickening.", "The scan shows {sev} esophageal thickening.")),
            ("esophagus_hiatal_hernia", "hiatal hernia", ("small", "moderate", "large"),
             ("A {sev} hiatal hernia is seen at the esophagus.", "There is a {sev} hiatal hernia at the esophagus.")),
        ),
    ),
    (
        "thyroid", ("thyroid",),
        ("The thyroid is unremarkable.", "The thyroid gland appears normal.", "No thyroid lesion is seen."),
        (
            ("thyroid_nodule", "thyroid nodule", ("tiny", "small", "large"),
             ("A {sev} thyroid nodule is present.", "There is a {sev} thyroid nodule.")),
            ("thyroid_goiter", "goiter", ("small", "moderate", "large"),
             ("A {sev} goiter is seen in the thyroid.", "There is a {sev} goiter of the thyroid.")),
        ),
    ),
    (
        "breast", ("breast",),
        ("The breasts are unremarkable.", "Breast tissue appears normal.", "No breast lesion is seen."),
        (
            ("breast_mass", "breast mass", ("small", "moderate", "large"),
             ("A {sev} breast mass is seen.", "There is a {sev} breast mass.")),
            ("breast_calcification", "breast calcification", ("scattered", "clustered", "coarse"),
             ("There is {sev} breast calcification.", "The scan shows {sev} breast calcification.")),
        ),
    ),
    (
        "abdomen", ("abdomen", "abdominal", "liver", "renal"),
        ("The visualized abdomen is unremarkable.", "Upper abdominal organs appear normal.",
         "No abdominal abnormality is seen."),
        (
            ("abdomen_liver_lesion", "liver lesion", ("small", "moderate", "large"),
             ("A {sev} liver lesion is seen in the abdomen.", "There is a {sev} liver lesion in the abdomen.")),
            ("abdomen_renal_cyst", "renal cyst", ("small", "moderate", "large"),
             ("A {sev} renal cyst is seen in the abdomen.", "There is a {sev} renal cyst in the abdomen.")),
        ),
    ),
]

OTHERS_TEMPLATES = (
    "The exam is otherwise unremarkable.",
    "No additional finding is identified.",
    "The study quality is adequate.",
)

MAX_CONTENT_STRUCTURES = len(_STRUCTURE_BANK)
N_SEVERITIES = 3


@dataclass(frozen=True)
class AbnormalityTaxonomy:
    """Label names with the report phrases the rule labeler looks for."""

    names: tuple
    phrases: tuple

    def __len__(self):
        return len(self.names)


@dataclass
class SyntheticCase:
    case_id: str
    report: str
    labels: np.ndarray  # multi-hot over the taxonomy
    split: str
    volume: np.ndarray
    states: tuple  # per content structure: None or (type index, severity index)


def make_catalog(n_content=4):
    """Catalog over the first n_content bank structures plus the catch-all."""
    if not 1 <= n_content <= MAX_CONTENT_STRUCTURES:
        raise ParameterError(f"n_content={n_content} outside [1, {MAX_CONTENT_STRUCTURES}]")
    names = tuple(s[0] for s in _STRUCTURE_BANK[:n_content]) + ("others",)
    keywords = tuple(s[1] for s in _STRUCTURE_BANK[:n_content]) + ((),)
    return StructureCatalog(names, keywords)


def desk_catalog():
    return make_catalog(4)


def chest_catalog():
    return make_catalog(MAX_CONTENT_STRUCTURES)


def make_taxonomy(n_content=4):
    names, phrases = [], []
    for _, _, _, types in _STRUCTURE_BANK[:n_content]:
        for name, phrase, _, _ in types:
            names.append(name)
            phrases.append(phrase)
    return AbnormalityTaxonomy(tuple(names), tuple(phrases))


def _imprint_magnitude(severity_idx):
    return 0.8 + 0.8 * severity_idx


def _imprint_region(structure_idx, type_idx, extents, n_content):
    """Constant-block region for one (structure, type) imprint.

    Structure fixes the x-band and a structure-specific z-depth; the type
    selects a y-half. The varying depth leaves each structure a distinct
    within-patch footprint, so imprints stay linearly tellable apart even
    after patch features are pooled.
    """
    band = extents[0] // n_content
    xs = slice(structure_idx * band, (structure_idx + 1) * band)
    half = extents[1] // 2
    ys = slice(0, half) if type_idx == 0 else slice(half, extents[1])
    depth = min(extents[2], 4 + 2 * structure_idx)
    return xs, ys, slice(0, depth)


def _case_rng(seed, idx):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, idx])))


def _render_case(idx, rng, n_content, extents, prevalence, noise_sigma):
    states = []
    sentences = []
    for name, _, normals, types in _STRUCTURE_BANK[:n_content]:
        if rng.random() < prevalence:
            t = int(rng.integers(len(types)))
            s = int(rng.integers(N_SEVERITIES))
            _, _, sevs, templates = types[t]
            template = templates[int(rng.integers(len(templates)))]
            sentences.append(template.format(sev=sevs[s]))
            states.append((t, s))
        else:
            sentences.append(normals[int(rng.integers(len(normals)))])
            states.append(None)
    sentences.append(OTHERS_TEMPLATES[int(rng.integers(len(OTHERS_TEMPLATES)))])

    volume = rng.normal(0.0, noise_sigma, extents)
    for i, state in enumerate(states):
        if state is not None:
            t, s = state
            xs, ys, zs = _imprint_region(i, t, extents, n_content)
            volume[xs, ys, zs] += _imprint_magnitude(s)

    labels = np.zeros(2 * n_content, dtype=np.int8)
    for i, state in enumerate(states):
        if state is not None:
            labels[2 * i + state[0]] = 1
    return SyntheticCase(
        case_id=f"case{idx:05d}",
        report=" ".join(sentences),
        labels=labels,
        split="",
        volume=volume,
        states=tuple(states),
    )


def generate_corpus(n=None, seed=0, n_content=4, prevalence=0.3, extents=(32, 32, 16),
                    noise_sigma=0.05, counts=None):
    """Generate n cases (or explicit (train, val, test) counts), deterministically.

    Without explicit counts the split is 60/20/20 by subject over a seeded
    permutation.
    """
    if counts is not None:
        n = sum(counts)
    if n is None or n < 1:
        raise ParameterError(f"corpus size must be >= 1, got {n}")
    if extents[0] % n_content:
        raise ParameterError(f"x extent {extents[0]} not divisible by {n_content} structures")
    cases = [
        _render_case(i, _case_rng(seed, i), n_content, tuple(extents), prevalence, noise_sigma)
        for i in range(n)
    ]
    if counts is None:
        counts = (int(n * 0.6), int(n * 0.2), n - int(n * 0.6) - int(n * 0.2))
    # split stream lives at an index no case stream can reach
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2 ** 63]))).permutation(n)
    splits = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    for pos, case_idx in enumerate(perm):
        cases[case_idx].split = splits[pos]
    return cases


def label_report(report, taxonomy):
    """Multi-hot labels: a bit is set when its phrase occurs without a
    preceding negation cue ("no", "without") in the same sentence."""
    labels = np.zeros(len(taxonomy), dtype=np.int8)
    sentences = re.split(r"[.!?\n]", report)
    for sentence in sentences:
        low = sentence.lower()
        for j, phrase in enumerate(taxonomy.phrases):
            pos = low.find(phrase)
            if pos < 0:
                continue
            prefix_words = set(tokenize(low[:pos]))
            if not prefix_words.intersection(NEGATION_CUES):
                labels[j] = 1
    return labels


# ---------------------------------------------------------------------------
# Persistence: corpus.jsonl + raw volumes with a small text header.

VOLUME_MAGIC = "structobs-volume v1 f8le"


def save_volume(path, volume):
    volume = np.asarray(volume, dtype="<f8")
    header = f"{VOLUME_MAGIC} {' '.join(str(d) for d in volume.shape)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(volume).tobytes())


def load_volume(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        if not header.startswith(VOLUME_MAGIC):
            raise ValueError(f"not a volume file: {path}")
        extents = tuple(int(d) for d in header[len(VOLUME_MAGIC):].split())
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(extents).astype(np.float64)


def save_corpus(directory, cases, catalog, taxonomy):
    os.makedirs(os.path.join(directory, "volumes"), exist_ok=True)
    catalog.save(os.path.join(directory, "catalog.txt"))
    with open(os.path.join(directory, "corpus.jsonl"), "w", encoding="utf-8") as fh:
        meta = {
            "kind": "meta",
            "structures": list(catalog.names),
            "abnormalities": list(taxonomy.names),
            "phrases": list(taxonomy.phrases),
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for case in cases:
            vol_rel = os.path.join("volumes", case.case_id + ".vol")
            save_volume(os.path.join(directory, vol_rel), case.volume)
            rec = {
                "id": case.case_id,
                "report": case.report,
                "labels": [int(v) for v in case.labels],
                "split": case.split,
                "volume": vol_rel,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(directory):
    catalog = StructureCatalog.load(os.path.join(directory, "catalog.txt"))
    cases = []
    with open(os.path.join(directory, "corpus.jsonl"), "r", encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        taxonomy = AbnormalityTaxonomy(tuple(meta["abnormalities"]), tuple(meta["phrases"]))
        for line in fh:
            rec = json.loads(line)
            cases.append(SyntheticCase(
                case_id=rec["id"],
                report=rec["report"],
                labels=np.array(rec["labels"], dtype=np.int8),
                split=rec["split"],
                volume=load_volume(os.path.join(directory, rec["volume"])),
                states=(),
            ))
    return cases, catalog, taxonomy
