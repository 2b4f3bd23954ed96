import numpy as np

from structobs import engine, vision
from structobs.align import ContrastBatch, DiversityQueue, ProjectionHeads
from structobs.engine import Array
from structobs.vision import PatchGrid, StructureQuerySet


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def random_unit(r, d):
    v = r.standard_normal(d)
    return v / np.linalg.norm(v)


def make_batch(seed, n_pairs=4, d_o=8, d_t=8, n_structures=3):
    r = rng(seed)
    pairs = [(f"s{i}", i % n_structures) for i in range(n_pairs)]
    visual = Array(r.standard_normal((n_pairs, d_o)))
    textual = np.stack([random_unit(r, d_t) for _ in range(n_pairs)])
    return ContrastBatch(pairs=pairs, visual=visual, textual=textual)


def filled_queue(seed, n_structures=3, per_structure=4, d_t=8):
    r = rng(seed)
    queue = DiversityQueue(n_structures, capacity=max(per_structure, 4))
    queue.update([(s, random_unit(r, d_t), f"q{s}_{j}")
                  for s in range(n_structures) for j in range(per_structure)])
    return queue


class TinyContrastSetup:
    """Full stage-1 path at the smallest useful size: 3 structures, 16 patches, d=8."""

    def __init__(self, seed=0, n_structures=3, n_patches=16, d=8, n_subjects=2):
        r = rng(seed)
        self.queries = StructureQuerySet(n_structures, d, d, d, d, seed=seed + 1, init_scale=0.3)
        self.heads = ProjectionHeads(d, d, d, seed=seed + 2, init_scale=0.4)
        self.features = [r.standard_normal((n_patches, d)) for _ in range(n_subjects)]
        self.text = [np.stack([random_unit(r, d) for _ in range(n_structures)])
                     for _ in range(n_subjects)]
        self.n_structures = n_structures
        self.queue = filled_queue(seed + 3, n_structures, per_structure=3, d_t=d)

    def batch(self):
        rows = []
        pairs = []
        texts = []
        for i, feats in enumerate(self.features):
            grid = PatchGrid(f"s{i}", Array(feats), (feats.shape[0], 1, 1))
            result = vision.observe(grid, self.queries)
            rows.append(result.tokens)
            pairs.extend((f"s{i}", s) for s in range(self.n_structures))
            texts.append(self.text[i])
        return ContrastBatch(pairs=pairs, visual=engine.concat_rows(rows), textual=np.concatenate(texts))

    def trainables(self):
        out = {}
        out.update(self.queries.params())
        out.update(self.heads.params())
        return out
