"""Cross-modal alignment losses and the diversity-enhanced negative queue.

Visual and textual per-structure observation tokens are mapped by two
trainable affine heads into a shared space and L2-normalized. For each
(subject, structure) pair the candidate set is the pair's own text token
followed by every queue token across all structures, in queue order; the
queue holds raw textual tokens and the current text head projects them at
every loss evaluation (as constants), while only the diversity scores are
cached. The image-to-text distribution softmaxes sim/tau over that set;
the soft target softmaxes text-text similarity over the identical set
(with the self slot fixed at similarity 1) and is treated as a constant by
the optimizer. The combined objective mixes the one-hot contrastive term
and the KL term with weight alpha.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Array, no_grad
from .vision import ParameterError

TAU_MIN = 0.01
TAU_MAX = 1.0


class ProjectionHeads:
    """Affine visual/text heads plus a learnable temperature stored as log(tau)."""

    def __init__(self, d_o, d_t, d_p, tau_init=0.07, seed=0, init_scale=0.05):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.gv_weight = engine.parameter(rng.standard_normal((d_o, d_p)) * init_scale, name="heads/gv_weight")
        self.gv_bias = engine.parameter(np.zeros(d_p), name="heads/gv_bias")
        self.gt_weight = engine.parameter(rng.standard_normal((d_t, d_p)) * init_scale, name="heads/gt_weight")
        self.gt_bias = engine.parameter(np.zeros(d_p), name="heads/gt_bias")
        self.log_tau = engine.parameter(math.log(tau_init), name="heads/log_tau")

    def params(self):
        return {p.name: p for p in (self.gv_weight, self.gv_bias, self.gt_weight, self.gt_bias, self.log_tau)}

    def set_trainable(self, flag):
        for p in self.params().values():
            p.requires_grad = bool(flag)

    def tau(self):
        return engine.exp(self.log_tau)

    def tau_value(self):
        return float(np.exp(self.log_tau.data))

    def clamp_tau(self):
        self.log_tau.data = np.clip(self.log_tau.data, math.log(TAU_MIN), math.log(TAU_MAX))

    def project_visual(self, x):
        return engine.l2_normalize(engine.add(engine.matmul(x, self.gv_weight), self.gv_bias))

    def project_text(self, x):
        return engine.l2_normalize(engine.add(engine.matmul(engine.as_array(x), self.gt_weight), self.gt_bias))


@dataclass
class QueueEntry:
    token: np.ndarray  # unit-norm textual observation token (pre-head)
    score: float  # sum of text-text similarities at enqueue time (never refreshed)
    subject: str


class DiversityQueue:
    """Per-structure negative store evicting the entry most similar to its peers.

    Tokens are stored raw (pre-head) so losses can project them with the
    current text head; only the diversity scores are cached. Below capacity
    every candidate is enqueued. At capacity a candidate whose summed
    similarity to the current members is smaller than the largest cached
    score replaces that entry (oldest such entry on ties); otherwise the
    candidate is discarded. Cached scores are computed once at enqueue time
    and deliberately left stale afterwards.
    """

    def __init__(self, n_structures, capacity):
        if capacity < 1:
            raise ParameterError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.slots = [[] for _ in range(n_structures)]

    def __len__(self):
        return sum(len(s) for s in self.slots)

    @property
    def n_structures(self):
        return len(self.slots)

    def update(self, candidates, project=None):
        """Apply the enqueue/evict rule to (structure, token, subject) candidates in order.

        `project` maps stacked raw tokens into the similarity space for
        scoring (identity when omitted, for pre-projected tokens).
        """
        for structure, token, subject in candidates:
            slot = self.slots[structure]
            token = np.array(token, dtype=np.float64)
            if slot:
                if project is None:
                    cand, members = token, [e.token for e in slot]
                else:
                    projected = project(np.vstack([[token], [e.token for e in slot]]))
                    cand, members = projected[0], projected[1:]
                score = float(sum(float(cand @ m) for m in members))
            else:
                score = 0.0
            if len(slot) < self.capacity:
                slot.append(QueueEntry(token, score, subject))
                continue
            worst = max(range(len(slot)), key=lambda i: (slot[i].score, -i))
            if score < slot[worst].score:
                slot.pop(worst)
                slot.append(QueueEntry(token, score, subject))

    def snapshot(self):
        """All stored tokens across structures as one matrix, in slot order."""
        tokens = [e.token for slot in self.slots for e in slot]
        if not tokens:
            return np.zeros((0, 0))
        return np.stack(tokens)

    def to_record(self):
        return {
            "kind": "diversity",
            "capacity": self.capacity,
            "slots": [
                [{"token": e.token.tolist(), "score": e.score, "subject": e.subject} for e in slot]
                for slot in self.slots
            ],
        }

    @classmethod
    def from_record(cls, rec):
        q = cls(len(rec["slots"]), rec["capacity"])
        for slot, entries in zip(q.slots, rec["slots"]):
            for e in entries:
                slot.append(QueueEntry(np.array(e["token"], dtype=np.float64), float(e["score"]), e["subject"]))
        return q


class FifoQueue:
    """Plain first-in-first-out negative store with the same interface."""

    def __init__(self, n_structures, capacity):
        if capacity < 1:
            raise ParameterError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.slots = [[] for _ in range(n_structures)]

    def __len__(self):
        return sum(len(s) for s in self.slots)

    @property
    def n_structures(self):
        return len(self.slots)

    def update(self, candidates, project=None):
        for structure, token, subject in candidates:
            slot = self.slots[structure]
            slot.append(QueueEntry(np.array(token, dtype=np.float64), 0.0, subject))
            if len(slot) > self.capacity:
                slot.pop(0)

    snapshot = DiversityQueue.snapshot

    def to_record(self):
        rec = DiversityQueue.to_record(self)
        rec["kind"] = "fifo"
        return rec

    @classmethod
    def from_record(cls, rec):
        q = cls(len(rec["slots"]), rec["capacity"])
        for slot, entries in zip(q.slots, rec["slots"]):
            for e in entries:
                slot.append(QueueEntry(np.array(e["token"], dtype=np.float64), float(e["score"]), e["subject"]))
        return q


def queue_from_record(rec):
    return {"diversity": DiversityQueue, "fifo": FifoQueue}[rec["kind"]].from_record(rec)


def queue_update(queue, candidates, project=None):
    queue.update(candidates, project)
    return queue


@dataclass
class ContrastBatch:
    """Aligned (subject, structure) pairs with projected observation tokens.

    `visual` and `textual` hold the un-projected per-pair tokens stacked
    row-wise; rows correspond to `pairs` entries.
    """

    pairs: list  # (subject, structure)
    visual: Array  # (n_pairs, d_o)
    textual: np.ndarray  # (n_pairs, d_t), frozen encoder output

    def __len__(self):
        return len(self.pairs)


def sim(u, w):
    """Inner product of two projected, normalized tokens."""
    return engine.matmul(u, w)


def image_to_text_dist(visual_proj, positive_proj, negatives, tau):
    """Softmax over sim/tau for {positive} followed by the queue snapshot rows."""
    logits = [engine.reshape(engine.matmul(positive_proj, visual_proj), (1,))]
    if negatives.shape[0]:
        logits.append(engine.matmul(Array(negatives), visual_proj))
    return engine.softmax_rows(engine.div(engine.concat_rows(logits), tau))


def soft_targets(text_proj, negatives, tau_value):
    """Text-text softmax over the same candidate set, gradient-free.

    Slot 0 is the pair's own token with its self-similarity pinned to 1.
    """
    t = text_proj.data if isinstance(text_proj, Array) else np.asarray(text_proj)
    sims = np.concatenate([[1.0], negatives @ t]) if negatives.shape[0] else np.array([1.0])
    z = sims / tau_value - (sims / tau_value).max()
    e = np.exp(z)
    return e / e.sum()


def _projected_batch(batch, heads):
    vis = heads.project_visual(batch.visual)
    txt = heads.project_text(batch.textual)
    return vis, txt


def _projected_negatives(queue, heads):
    """Queue snapshot mapped by the current text head, as constants."""
    raw = queue.snapshot()
    if raw.shape[0] == 0:
        return raw
    with no_grad():
        return heads.project_text(raw).data


def _v2t_matrix(vis, txt, negatives, tau):
    """Row i = image_to_text_dist for pair i, computed in one softmax."""
    pos_col = engine.reshape(engine.rowsum(engine.mul(vis, txt)), (len(vis.data), 1))
    cols = [pos_col]
    if negatives.shape[0]:
        cols.append(engine.matmul(vis, engine.transpose(Array(negatives))))
    return engine.softmax_rows(engine.div(engine.concat_cols(cols), tau))


def _t2t_matrix(txt, negatives, tau_value):
    with no_grad():
        rows = [soft_targets(Array(t), negatives, tau_value) for t in txt.data]
    return np.stack(rows)


def loss_so_itc(batch, queue, heads):
    """Mean one-hot cross-entropy of the image-to-text distributions."""
    if len(batch) == 0:
        raise ParameterError("contrastive loss needs a non-empty batch")
    vis, txt = _projected_batch(batch, heads)
    p = _v2t_matrix(vis, txt, _projected_negatives(queue, heads), heads.tau())
    picked = engine.take_per_row(p, np.zeros(len(batch), dtype=np.intp))
    return engine.neg(engine.mean(engine.log(engine.clamp_min(picked, engine.PROB_FLOOR))))


def loss_so_kl(batch, queue, heads):
    """Mean KL(soft target || image-to-text distribution) over the batch."""
    if len(batch) == 0:
        raise ParameterError("contrastive loss needs a non-empty batch")
    vis, txt = _projected_batch(batch, heads)
    negatives = _projected_negatives(queue, heads)
    p = _v2t_matrix(vis, txt, negatives, heads.tau())
    q = _t2t_matrix(txt, negatives, heads.tau_value())
    assert q.shape == p.shape, "soft targets and v2t distributions must share the candidate set"
    qlogq = np.where(q > engine.PROB_FLOOR, q * np.log(np.maximum(q, engine.PROB_FLOOR)), 0.0).sum(axis=1)
    cross = engine.rowsum(engine.mul(Array(q), engine.log(engine.clamp_min(p, engine.PROB_FLOOR))))
    return engine.mean(engine.sub(Array(qlogq), cross))


def loss_so_pre(batch, queue, heads, alpha):
    """(1 - alpha) * contrastive term + alpha * KL term."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha={alpha} outside [0, 1]")
    itc = loss_so_itc(batch, queue, heads)
    kl = loss_so_kl(batch, queue, heads)
    return engine.add(engine.mul(itc, 1.0 - alpha), engine.mul(kl, alpha))
