"""Word-level autoregressive report decoder with visual cross-attention."""

import re
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Array
from .vision import ParameterError

_TOKEN = re.compile(r"[a-z0-9']+|[.!?]")
NEG_MASK = -1e30  # additive mask value; underflows to exactly 0 after softmax


def tokenize(text):
    """Lowercased word and sentence-terminator tokens."""
    return _TOKEN.findall(text.lower())


def detokenize(tokens):
    out = []
    for tok in tokens:
        if tok in ".!?":
            if out:
                out[-1] += tok
            else:
                out.append(tok)
        else:
            out.append(tok)
    return " ".join(out)


class Vocab:
    """Bijective token <-> id table with reserved PAD/BOS/EOS/UNK ids."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    _SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, words):
        self.tokens = list(self._SPECIALS) + sorted(set(words) - set(self._SPECIALS))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_reports(cls, reports):
        words = set()
        for text in reports:
            words.update(tokenize(text))
        return cls(words)

    def encode(self, tokens):
        return [self.index.get(t, self.UNK) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def encode_report(self, text):
        return [self.BOS] + self.encode(tokenize(text)) + [self.EOS]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tuple(tokens[:4]) != cls._SPECIALS:
            raise ValueError(f"vocab file {path} missing reserved tokens")
        vocab = cls.__new__(cls)
        vocab.tokens = tokens
        vocab.index = {t: i for i, t in enumerate(tokens)}
        return vocab


@dataclass
class GenerationConfig:
    max_len: int = 128
    strategy: str = "greedy"
    eos_id: int = Vocab.EOS

    def __post_init__(self):
        if self.max_len < 1:
            raise ParameterError(f"max_len must be >= 1, got {self.max_len}")
        if self.strategy != "greedy":
            raise ParameterError(f"unsupported strategy {self.strategy!r}")


def _causal_mask(n):
    return Array(np.triu(np.full((n, n), NEG_MASK), k=1))


class DecoderModel:
    """Pre-norm transformer decoder over word ids, cross-attending to visual rows.

    Visual observation tokens (d_obs wide) and selected patch embeddings
    (d_patch wide) are mapped into the decoder width by two separate input
    projections and concatenated, observations first.
    """

    def __init__(self, vocab_size, d_obs, d_patch, width=64, blocks=2, heads=4,
                 ffn_mult=4, max_len=128, seed=0, init_scale=0.02):
        if width % heads:
            raise ParameterError(f"width {width} not divisible by heads {heads}")
        self.vocab_size = int(vocab_size)
        self.width = int(width)
        self.blocks = int(blocks)
        self.heads = int(heads)
        self.head_dim = width // heads
        self.max_len = int(max_len)
        rng = np.random.Generator(np.random.PCG64(seed))
        self._params = {}

        def mat(name, rows, cols):
            self._params[name] = engine.parameter(rng.standard_normal((rows, cols)) * init_scale, name=name)

        def vec(name, n, value=0.0):
            self._params[name] = engine.parameter(np.full(n, value), name=name)

        mat("dec/embed", vocab_size, width)
        mat("dec/pos", max_len, width)
        mat("dec/proj_obs/w", d_obs, width)
        vec("dec/proj_obs/b", width)
        mat("dec/proj_patch/w", d_patch, width)
        vec("dec/proj_patch/b", width)
        for b in range(blocks):
            for kind in ("self", "cross"):
                for h in range(heads):
                    for m in ("wq", "wk", "wv"):
                        mat(f"dec/block{b}/{kind}/h{h}/{m}", width, self.head_dim)
                mat(f"dec/block{b}/{kind}/wo", width, width)
                vec(f"dec/block{b}/{kind}/bo", width)
                vec(f"dec/block{b}/{kind}/ln_g", width, 1.0)
                vec(f"dec/block{b}/{kind}/ln_b", width)
            mat(f"dec/block{b}/ffn/w1", width, ffn_mult * width)
            vec(f"dec/block{b}/ffn/b1", ffn_mult * width)
            mat(f"dec/block{b}/ffn/w2", ffn_mult * width, width)
            vec(f"dec/block{b}/ffn/b2", width)
            vec(f"dec/block{b}/ffn/ln_g", width, 1.0)
            vec(f"dec/block{b}/ffn/ln_b", width)
        vec("dec/final/ln_g", width, 1.0)
        vec("dec/final/ln_b", width)
        mat("dec/out/w", width, vocab_size)
        vec("dec/out/b", vocab_size)

    def params(self):
        return dict(self._params)

    def set_trainable(self, flag):
        for p in self._params.values():
            p.requires_grad = bool(flag)

    def load_state(self, arrays):
        for name, p in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name} in checkpoint")
            if tuple(arrays[name].shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def project_visual(self, observations=None, patches=None):
        """Map raw visual rows into decoder width; None when both absent."""
        rows = []
        if observations is not None:
            rows.append(engine.add(engine.matmul(observations, self._params["dec/proj_obs/w"]),
                                   self._params["dec/proj_obs/b"]))
        if patches is not None:
            rows.append(engine.add(engine.matmul(patches, self._params["dec/proj_patch/w"]),
                                   self._params["dec/proj_patch/b"]))
        if not rows:
            return None
        return rows[0] if len(rows) == 1 else engine.concat_rows(rows)

    def _attention(self, prefix, q_input, kv_input, mask=None):
        p = self._params
        head_outs = []
        scale = engine.sqrt_scale(self.head_dim)
        for h in range(self.heads):
            q = engine.matmul(q_input, p[f"{prefix}/h{h}/wq"])
            k = engine.matmul(kv_input, p[f"{prefix}/h{h}/wk"])
            v = engine.matmul(kv_input, p[f"{prefix}/h{h}/wv"])
            scores = engine.mul(engine.matmul(q, engine.transpose(k)), scale)
            if mask is not None:
                scores = engine.add(scores, mask)
            head_outs.append(engine.matmul(engine.softmax_rows(scores), v))
        stacked = head_outs[0] if self.heads == 1 else engine.concat_cols(head_outs)
        return engine.add(engine.matmul(stacked, p[f"{prefix}/wo"]), p[f"{prefix}/bo"])

    def forward(self, token_ids, visual=None):
        """Logits (len(token_ids) x vocab) under teacher forcing."""
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.size == 0:
            raise ParameterError("decoder input is empty")
        if ids.size > self.max_len:
            raise ParameterError(f"sequence length {ids.size} exceeds max_len {self.max_len}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"unknown token id {int(ids.max())} for vocab of {self.vocab_size}")
        p = self._params
        x = engine.add(engine.take_rows(p["dec/embed"], ids),
                       engine.take_rows(p["dec/pos"], np.arange(ids.size)))
        mask = _causal_mask(ids.size)
        for b in range(self.blocks):
            pre = f"dec/block{b}"
            h = engine.layer_norm(x, p[f"{pre}/self/ln_g"], p[f"{pre}/self/ln_b"])
            x = engine.add(x, self._attention(f"{pre}/self", h, h, mask))
            if visual is not None:
                h = engine.layer_norm(x, p[f"{pre}/cross/ln_g"], p[f"{pre}/cross/ln_b"])
                x = engine.add(x, self._attention(f"{pre}/cross", h, visual))
            h = engine.layer_norm(x, p[f"{pre}/ffn/ln_g"], p[f"{pre}/ffn/ln_b"])
            h = engine.add(engine.matmul(engine.relu(
                engine.add(engine.matmul(h, p[f"{pre}/ffn/w1"]), p[f"{pre}/ffn/b1"])),
                p[f"{pre}/ffn/w2"]), p[f"{pre}/ffn/b2"])
            x = engine.add(x, h)
        x = engine.layer_norm(x, p["dec/final/ln_g"], p["dec/final/ln_b"])
        return engine.add(engine.matmul(x, p["dec/out/w"]), p["dec/out/b"])


def _validate_target(target_ids, model):
    ids = list(int(t) for t in target_ids)
    if len(ids) < 2:
        raise ParameterError("target must contain at least BOS and EOS")
    if ids[0] != Vocab.BOS or ids[-1] != Vocab.EOS:
        raise ParameterError("target must begin with BOS and end with EOS")
    if len(ids) > model.max_len + 1:
        raise ParameterError(f"target length {len(ids)} exceeds max_len {model.max_len}")
    for t in ids:
        if not 0 <= t < model.vocab_size:
            raise ValueError(f"unknown token id {t}")
    return ids


def loss_rg(model, visual, target_ids):
    """Summed next-token negative log-likelihood under teacher forcing.

    PAD positions in the shifted target contribute nothing.
    """
    ids = _validate_target(target_ids, model)
    inputs = np.array(ids[:-1], dtype=np.intp)
    targets = np.array(ids[1:], dtype=np.intp)
    logits = model.forward(inputs, visual)
    probs = engine.softmax_rows(logits)
    picked = engine.take_per_row(probs, targets)
    nll = engine.neg(engine.log(engine.clamp_min(picked, engine.PROB_FLOOR)))
    keep = (targets != Vocab.PAD).astype(np.float64)
    return engine.total(engine.mul(nll, Array(keep)))


def loss_rg_positions(model, visual, target_ids):
    """Per-position negative log-likelihoods as a plain vector (no gradients)."""
    ids = _validate_target(target_ids, model)
    with engine.no_grad():
        logits = model.forward(np.array(ids[:-1], dtype=np.intp), visual)
        probs = engine.softmax_rows(logits)
        picked = probs.data[np.arange(len(ids) - 1), np.array(ids[1:], dtype=np.intp)]
    return -np.log(np.maximum(picked, engine.PROB_FLOOR))


def generate(model, visual, config=None):
    """Greedy decoding from BOS until EOS or max length; returns the body ids."""
    config = config or GenerationConfig(max_len=model.max_len)
    ids = [Vocab.BOS]
    body = []
    with engine.no_grad():
        for _ in range(config.max_len):
            logits = model.forward(np.array(ids, dtype=np.intp), visual)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == config.eos_id:
                break
            body.append(nxt)
            ids.append(nxt)
            if len(ids) >= model.max_len:
                break
    return body
