"""Two-stage training loops, checkpoint assembly, and evaluation passes."""

import numpy as np

from . import align, checkpoint, decoder as dec, engine, metrics, optim, parsing, vision
from .align import ContrastBatch, DiversityQueue, FifoQueue, ProjectionHeads
from .config import NumericError
from .engine import Array, Tape, no_grad
from .synth import label_report
from .textenc import TextEmbedder
from .vision import PatchEmbedder, StructureQuerySet


class Stage1Model:
    """Patch embedder, structure queries, projection heads, frozen text encoder."""

    def __init__(self, cfg):
        d = cfg.dims
        n_structures = cfg.corpus.n_structures + 1  # content plus catch-all
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.patch_embedder = PatchEmbedder(d.patch_extents, d.d_v, seed=seeds[0])
        self.queries = StructureQuerySet(n_structures, d.d_q, d.d_v, d.d_a, d.d_o, seed=seeds[1])
        self.heads = ProjectionHeads(d.d_o, d.d_t, d.d_p, tau_init=cfg.align.tau_init, seed=seeds[2])
        self.text_embedder = TextEmbedder(dim=d.d_t, buckets=cfg.text.buckets, seed=cfg.text.seed)

    def params(self):
        out = {}
        out.update(self.patch_embedder.params())
        out.update(self.queries.params())
        out.update(self.heads.params())
        return out

    def set_trainable(self, flag):
        self.patch_embedder.set_trainable(flag)
        self.queries.set_trainable(flag)
        self.heads.set_trainable(flag)

    def state_arrays(self):
        arrays = {name: p.data for name, p in self.params().items()}
        arrays["textenc/projection"] = self.text_embedder.projection
        return arrays

    def load_state(self, arrays):
        for name, p in self.params().items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name} in checkpoint")
            p.data = np.array(arrays[name], dtype=np.float64)
        self.text_embedder.projection = np.array(arrays["textenc/projection"])
        self.text_embedder.projection.setflags(write=False)

    def frozen_hash(self):
        return checkpoint.array_table_hash(self.state_arrays())


def prepare_cases(model, cases, catalog):
    """Cache per-case flattened patches and frozen per-structure text tokens."""
    prepared = []
    for case in cases:
        patches, grid = vision.extract_patches(case.volume, model.patch_embedder.patch_extents)
        parsed = parsing.parse_report(case.case_id, case.report, catalog)
        text_tokens = model.text_embedder.embed_report(parsed)
        prepared.append({"case": case, "patches": patches, "grid": grid, "text": text_tokens})
    return prepared


def assemble_batch(model, prepared_batch):
    """ContrastBatch over every (subject, structure) pair with a text token."""
    visual_rows = []
    text_rows = []
    pairs = []
    for item in prepared_batch:
        grid = model.patch_embedder.embed_patches(item["case"].case_id, item["patches"], item["grid"])
        result = vision.observe(grid, model.queries)
        idx = [s for s, tok in enumerate(item["text"]) if tok is not None]
        if not idx:
            continue
        visual_rows.append(engine.take_rows(result.tokens, np.array(idx, dtype=np.intp)))
        text_rows.extend(item["text"][s] for s in idx)
        pairs.extend((item["case"].case_id, s) for s in idx)
    if not pairs:
        raise vision.ParameterError("batch contains no (subject, structure) pairs")
    return ContrastBatch(pairs=pairs, visual=engine.concat_rows(visual_rows), textual=np.stack(text_rows))


def make_queue(cfg):
    n_structures = cfg.corpus.n_structures + 1
    if cfg.queue.kind == "fifo":
        return FifoQueue(n_structures, cfg.queue.capacity)
    return DiversityQueue(n_structures, cfg.queue.capacity)


def pretrain(cfg, cases, catalog, log_hook=None):
    """Stage 1: train the visual path and heads against the frozen text encoder."""
    model = Stage1Model(cfg)
    queue = make_queue(cfg)
    prepared = prepare_cases(model, cases, catalog)
    params = model.params()
    no_decay = {n for n in params if n.endswith("bias") or n == "heads/log_tau"}
    # the temperature moves far slower than the heads, otherwise it bottoms
    # out on duplicate ties before any alignment is learned
    opt = optim.AdamW(params, lr=cfg.stage1.lr, weight_decay=cfg.stage1.weight_decay,
                      no_decay=no_decay, lr_scale={"heads/log_tau": 0.05})
    sched = optim.linear_schedule(cfg.stage1.steps, cfg.stage1.warmup_ratio)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    order = []
    log_rows = []

    for step in range(cfg.stage1.steps):
        if len(order) < cfg.stage1.batch_size:
            order.extend(rng.permutation(len(prepared)))
        batch_idx = [order.pop(0) for _ in range(min(cfg.stage1.batch_size, len(prepared)))]

        with Tape() as tape:
            batch = assemble_batch(model, [prepared[i] for i in batch_idx])
            itc = align.loss_so_itc(batch, queue, model.heads)
            kl = align.loss_so_kl(batch, queue, model.heads)
            if cfg.flags.itc and cfg.flags.kl:
                loss = align.loss_so_pre(batch, queue, model.heads, cfg.align.alpha)
            elif cfg.flags.itc:
                loss = itc
            elif cfg.flags.kl:
                loss = kl
            else:
                loss = Array(0.0)
            tau = model.heads.tau_value()
            vals = (float(itc.data), float(kl.data), float(loss.data))
            if not all(np.isfinite(v) for v in vals):
                raise NumericError(
                    f"non-finite loss at step {step}: itc={vals[0]}, kl={vals[1]}, "
                    f"pre={vals[2]}, tau={tau}")
            if loss.requires_grad:
                opt.zero_grad()
                tape.backward(loss)
                opt.step(sched(step))
                model.heads.clamp_tau()

        def project(tokens):
            with no_grad():
                return model.heads.project_text(tokens).data

        queue.update([(structure, batch.textual[i], subject)
                      for i, (subject, structure) in enumerate(batch.pairs)], project)
        row = (step, vals[0], vals[1], vals[2], model.heads.tau_value())
        log_rows.append(row)
        if log_hook:
            log_hook(row)
    return model, queue, log_rows


def case_visual_arrays(model, item, k_select):
    """Frozen observation tokens and selected patch rows for one case."""
    with no_grad():
        grid = model.patch_embedder.embed_patches(item["case"].case_id, item["patches"], item["grid"])
        result = vision.observe(grid, model.queries)
        selected = vision.select_patches(result, grid, k_select)
    return result.tokens.data.copy(), selected.features.data.copy()


def decoder_visual(dec_model, sv, ts, flags):
    obs = Array(sv) if flags.use_sv else None
    pat = Array(ts) if flags.use_ts else None
    return dec_model.project_visual(obs, pat)


def train_decoder(cfg, stage1, cases, catalog, log_hook=None):
    """Stage 2: train only the decoder on frozen visual inputs."""
    stage1.set_trainable(False)
    prepared = prepare_cases(stage1, cases, catalog)
    vocab = dec.Vocab.from_reports([c.report for c in cases])
    dec_model = dec.DecoderModel(
        vocab_size=len(vocab), d_obs=cfg.dims.d_o, d_patch=cfg.dims.d_v,
        width=cfg.decoder.width, blocks=cfg.decoder.blocks, heads=cfg.decoder.heads,
        ffn_mult=cfg.decoder.ffn_mult, max_len=cfg.decoder.max_len,
        seed=int(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0]))

    items = []
    for item in prepared:
        sv, ts = case_visual_arrays(stage1, item, cfg.align.k_select)
        items.append({"sv": sv, "ts": ts, "ids": vocab.encode_report(item["case"].report)})

    params = dec_model.params()
    no_decay = {n for n in params if n.endswith(("_b", "/b", "b1", "b2", "bo", "ln_g", "ln_b", "/bias"))}
    opt = optim.AdamW(params, lr=cfg.stage2.lr, weight_decay=cfg.stage2.weight_decay, no_decay=no_decay)
    sched = optim.linear_schedule(cfg.stage2.steps, cfg.stage2.warmup_ratio)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 3])))
    order = []
    log_rows = []

    for step in range(cfg.stage2.steps):
        if len(order) < cfg.stage2.batch_size:
            order.extend(rng.permutation(len(items)))
        batch = [items[order.pop(0)] for _ in range(min(cfg.stage2.batch_size, len(items)))]
        with Tape() as tape:
            seq_losses = []
            n_tokens = 0
            for it in batch:
                visual = decoder_visual(dec_model, it["sv"], it["ts"], cfg.flags)
                seq_losses.append(dec.loss_rg(dec_model, visual, it["ids"]))
                n_tokens += len(it["ids"]) - 1
            loss = engine.div(engine.concat_rows(
                [engine.reshape(l, (1,)) for l in seq_losses]), float(n_tokens))
            loss = engine.total(loss)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite decoder loss at step {step}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step(sched(step))
        log_rows.append((step, float(loss.data)))
        if log_hook:
            log_hook((step, float(loss.data)))
    return dec_model, vocab, log_rows


def generate_reports(cfg, stage1, dec_model, vocab, cases, catalog):
    """Greedy-decode one report per case; returns (id, reference, generated) rows."""
    stage1.set_trainable(False)
    dec_model.set_trainable(False)
    prepared = prepare_cases(stage1, cases, catalog)
    rows = []
    gen_cfg = dec.GenerationConfig(max_len=cfg.decoder.max_len)
    for item in prepared:
        sv, ts = case_visual_arrays(stage1, item, cfg.align.k_select)
        with no_grad():
            visual = decoder_visual(dec_model, sv, ts, cfg.flags)
            body = dec.generate(dec_model, visual, gen_cfg)
        rows.append((item["case"].case_id, item["case"].report, dec.detokenize(vocab.decode(body))))
    dec_model.set_trainable(True)
    return rows


def retrieval_tokens(cfg, stage1, cases, catalog):
    """Projected per-structure text queries and visual candidates for a split."""
    prepared = prepare_cases(stage1, cases, catalog)
    text_tokens = []
    volume_tokens = []
    with no_grad():
        for item in prepared:
            grid = stage1.patch_embedder.embed_patches(item["case"].case_id, item["patches"], item["grid"])
            result = vision.observe(grid, stage1.queries)
            volume_tokens.append(stage1.heads.project_visual(result.tokens).data.copy())
            query = {}
            for s, tok in enumerate(item["text"]):
                if tok is not None:
                    query[s] = stage1.heads.project_text(tok).data.copy()
            text_tokens.append(query)
    return text_tokens, volume_tokens


def evaluate_split(cfg, stage1, dec_model, vocab, cases, catalog, taxonomy):
    """Generate, score NLG + CE + retrieval; returns (MetricReport, prediction rows)."""
    if not cases:
        raise ValueError("cannot evaluate an empty split")
    rows = generate_reports(cfg, stage1, dec_model, vocab, cases, catalog)
    return score_predictions(cfg, stage1, cases, catalog, taxonomy, rows), rows


def score_predictions(cfg, stage1, cases, catalog, taxonomy, rows):
    hyps = [dec.tokenize(generated) for _, _, generated in rows]
    refs = [dec.tokenize(reference) for _, reference, _ in rows]
    pred_labels = np.stack([label_report(generated, taxonomy) for _, _, generated in rows])
    true_labels = np.stack([case.labels for case in cases])
    precision, recall, f1 = metrics.ce_metrics(pred_labels, true_labels)
    text_tokens, volume_tokens = retrieval_tokens(cfg, stage1, cases, catalog)
    recall_at = metrics.retrieval_recall(text_tokens, volume_tokens, ks=(1, 5, 10))
    return metrics.MetricReport(
        bleu1=metrics.corpus_bleu(hyps, [[r] for r in refs], 1),
        bleu4=metrics.corpus_bleu(hyps, [[r] for r in refs], 4),
        rouge_l=metrics.corpus_rouge_l(hyps, refs),
        ce_precision=precision, ce_recall=recall, ce_f1=f1,
        recall_at=recall_at, case_count=len(cases))
