"""Command-line front end: data generation, the two training stages, and reports."""

import json
import os
import sys
import time

import click
import numpy as np

from . import checkpoint, report, synth, train
from . import decoder as dec
from .config import (ConfigError, ContractError, NumericError, apply_override,
                     config_hash, load_config, resolve_out_dir, save_config)

VERSION = "0.1.0"


def _build_config(config_path, overrides, run_dir=None):
    cfg = load_config(config_path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        apply_override(cfg, key.strip(), value.strip())
    if run_dir:
        cfg.out_dir = run_dir
    resolve_out_dir(cfg)
    cfg.validate()
    return cfg


def _load_run(run_dir, overrides):
    """Reload the snapshot config of an existing run; overrides must not change it."""
    path = os.path.join(run_dir, "config.json")
    if not os.path.exists(path):
        raise ConfigError(f"{run_dir} has no config snapshot; run pretrain first")
    cfg = load_config(path)
    base_hash = config_hash(cfg)
    for item in overrides:
        key, _, value = item.partition("=")
        apply_override(cfg, key.strip(), value.strip())
    if config_hash(cfg) != base_hash:
        raise ContractError("overrides would change the run's resolved config; start a new run")
    manifest = _load_manifest(run_dir)
    if manifest.get("config_hash") != base_hash:
        raise ContractError(f"manifest config hash mismatch in {run_dir}")
    return cfg, base_hash, manifest


def _load_manifest(run_dir):
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _save_manifest(run_dir, manifest):
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_cases(cfg):
    if not cfg.corpus.path or not os.path.exists(os.path.join(cfg.corpus.path, "corpus.jsonl")):
        raise ConfigError(f"corpus not found at {cfg.corpus.path!r}; run gen-data first")
    cases, catalog, taxonomy = synth.load_corpus(cfg.corpus.path)
    if len(catalog) != cfg.corpus.n_structures + 1:
        raise ConfigError(
            f"corpus catalog has {len(catalog)} structures, config expects "
            f"{cfg.corpus.n_structures + 1}")
    by_split = {"train": [], "val": [], "test": []}
    for c in cases:
        by_split[c.split].append(c)
    return by_split, catalog, taxonomy


def _restore_stage1(cfg, run_dir, manifest):
    stage = manifest.get("stages", {}).get("stage1")
    if stage is None:
        raise ContractError(f"{run_dir} has no stage-1 checkpoint")
    path = os.path.join(run_dir, stage["params"])
    if checkpoint.file_sha256(path) != stage["sha256"]:
        raise ContractError(f"stage-1 checkpoint {path} does not match its manifest hash")
    arrays, _ = checkpoint.load_arrays(path)
    model = train.Stage1Model(cfg)
    model.load_state(arrays)
    model.set_trainable(False)
    if model.frozen_hash() != stage["frozen_sha256"]:
        raise ContractError("stage-1 parameter hash differs from the manifest record")
    return model


def _restore_stage2(cfg, run_dir, manifest, vocab_only=False):
    stage = manifest.get("stages", {}).get("stage2")
    if stage is None:
        raise ContractError(f"{run_dir} has no stage-2 checkpoint")
    vocab = dec.Vocab.load(os.path.join(run_dir, stage["vocab"]))
    if vocab_only:
        return None, vocab
    path = os.path.join(run_dir, stage["params"])
    if checkpoint.file_sha256(path) != stage["sha256"]:
        raise ContractError(f"stage-2 checkpoint {path} does not match its manifest hash")
    arrays, _ = checkpoint.load_arrays(path)
    model = dec.DecoderModel(
        vocab_size=len(vocab), d_obs=cfg.dims.d_o, d_patch=cfg.dims.d_v,
        width=cfg.decoder.width, blocks=cfg.decoder.blocks, heads=cfg.decoder.heads,
        ffn_mult=cfg.decoder.ffn_mult, max_len=cfg.decoder.max_len)
    model.load_state(arrays)
    return model, vocab


@click.group()
def cli():
    """Structure-wise image-text alignment and report generation."""


@cli.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True, help="Override config fields by dotted path.")
@click.option("--out", "out_path", default=None, help="Corpus directory (defaults to corpus.path).")
def gen_data(config_path, overrides, out_path):
    """Generate the synthetic paired corpus."""
    cfg = _build_config(config_path, overrides)
    directory = out_path or cfg.corpus.path
    if not directory:
        raise ConfigError("no corpus directory: set corpus.path or pass --out")
    cases = synth.generate_corpus(
        seed=cfg.corpus.gen_seed, n_content=cfg.corpus.n_structures,
        prevalence=cfg.corpus.prevalence, extents=cfg.corpus.extents,
        noise_sigma=cfg.corpus.noise_sigma,
        counts=(cfg.corpus.n_train, cfg.corpus.n_val, cfg.corpus.n_test))
    catalog = synth.make_catalog(cfg.corpus.n_structures)
    taxonomy = synth.make_taxonomy(cfg.corpus.n_structures)
    os.makedirs(directory, exist_ok=True)
    synth.save_corpus(directory, cases, catalog, taxonomy)
    click.echo(f"wrote {len(cases)} cases to {directory}")


def _start_run(cfg):
    run_dir = cfg.out_dir
    os.makedirs(run_dir, exist_ok=True)
    snap = os.path.join(run_dir, "config.json")
    if os.path.exists(snap):
        existing = load_config(snap)
        if config_hash(existing) != config_hash(cfg):
            raise ContractError(f"{run_dir} already holds a run with a different config")
    else:
        save_config(cfg, snap)
    manifest = _load_manifest(run_dir)
    manifest.setdefault("version", VERSION)
    manifest["config_hash"] = config_hash(cfg)
    return run_dir, manifest


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True)
@click.option("--run", "run_dir", default=None, help="Run directory (defaults to out_dir).")
def pretrain(config_path, overrides, run_dir):
    """Stage 1: structure-wise contrastive pretraining."""
    cfg = _build_config(config_path, overrides, run_dir)
    run_dir, manifest = _start_run(cfg)
    chash = config_hash(cfg)
    splits, catalog, _ = _load_cases(cfg)
    stage_dir = os.path.join(run_dir, "stage1")
    os.makedirs(stage_dir, exist_ok=True)

    t0 = time.perf_counter()
    model, queue, log_rows = train.pretrain(cfg, splits["train"], catalog)
    seconds = time.perf_counter() - t0

    params_path = os.path.join(stage_dir, "params.txt")
    checkpoint.save_arrays(params_path, model.state_arrays(), chash)
    with open(os.path.join(stage_dir, "queue.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": chash, "queue": queue.to_record()}, fh, sort_keys=True)
    report.write_table_tsv(os.path.join(stage_dir, "loss_log.tsv"),
                           ("step", "loss_itc", "loss_kl", "loss_pre", "tau"), log_rows, chash)
    report.loss_curve_png(os.path.join(stage_dir, "loss_curve.png"), log_rows, chash)
    manifest.setdefault("stages", {})["stage1"] = {
        "params": "stage1/params.txt",
        "sha256": checkpoint.file_sha256(params_path),
        "frozen_sha256": model.frozen_hash(),
        "seconds": round(seconds, 3),
    }
    _save_manifest(run_dir, manifest)
    click.echo(f"stage-1 checkpoint written to {params_path} ({seconds:.1f}s)")


@cli.command("train-decoder")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True)
def train_decoder_cmd(run_dir, overrides):
    """Stage 2: train the report decoder on the frozen stage-1 checkpoint."""
    cfg, chash, manifest = _load_run(run_dir, overrides)
    splits, catalog, _ = _load_cases(cfg)
    stage1 = _restore_stage1(cfg, run_dir, manifest)
    frozen_before = stage1.frozen_hash()
    stage_dir = os.path.join(run_dir, "stage2")
    os.makedirs(stage_dir, exist_ok=True)

    t0 = time.perf_counter()
    dec_model, vocab, log_rows = train.train_decoder(cfg, stage1, splits["train"], catalog)
    seconds = time.perf_counter() - t0

    if stage1.frozen_hash() != frozen_before:
        raise ContractError("stage-1 parameters changed during decoder training")
    params_path = os.path.join(stage_dir, "params.txt")
    checkpoint.save_arrays(params_path, {n: p.data for n, p in dec_model.params().items()}, chash)
    vocab.save(os.path.join(stage_dir, "vocab.txt"))
    report.write_table_tsv(os.path.join(stage_dir, "loss_log.tsv"),
                           ("step", "loss_rg_per_token"), log_rows, chash)
    report.decoder_curve_png(os.path.join(stage_dir, "loss_curve.png"), log_rows, chash)
    manifest["stages"]["stage2"] = {
        "params": "stage2/params.txt",
        "vocab": "stage2/vocab.txt",
        "sha256": checkpoint.file_sha256(params_path),
        "stage1_frozen_sha256": frozen_before,
        "seconds": round(seconds, 3),
    }
    _save_manifest(run_dir, manifest)
    click.echo(f"stage-2 checkpoint written to {params_path} ({seconds:.1f}s)")


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@click.option("--out", "out_path", default=None)
def generate(run_dir, split, out_path):
    """Emit one generated report per record with a provenance header."""
    cfg, chash, manifest = _load_run(run_dir, ())
    splits, catalog, _ = _load_cases(cfg)
    if not splits[split]:
        raise ConfigError(f"split {split!r} is empty")
    stage1 = _restore_stage1(cfg, run_dir, manifest)
    dec_model, vocab = _restore_stage2(cfg, run_dir, manifest)
    rows = train.generate_reports(cfg, stage1, dec_model, vocab, splits[split], catalog)
    out_path = out_path or os.path.join(run_dir, f"generated_{split}.tsv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash\t{chash}\n")
        fh.write(f"# checkpoint_sha256\t{manifest['stages']['stage2']['sha256']}\n")
        for case_id, _, generated in rows:
            fh.write(f"{case_id}\t{generated}\n")
    click.echo(f"wrote {len(rows)} reports to {out_path}")


@cli.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@click.option("--oracle", is_flag=True, help="Evaluate ground-truth reports as predictions.")
def eval_cmd(run_dir, split, oracle):
    """Generate on a split and write the metric file, predictions, and figure."""
    cfg, chash, manifest = _load_run(run_dir, ())
    splits, catalog, taxonomy = _load_cases(cfg)
    cases = splits[split]
    if not cases:
        raise ConfigError(f"split {split!r} is empty")
    stage1 = _restore_stage1(cfg, run_dir, manifest)
    eval_dir = os.path.join(run_dir, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    if oracle:
        rows = [(c.case_id, c.report, c.report) for c in cases]
        mrep = train.score_predictions(cfg, stage1, cases, catalog, taxonomy, rows)
    else:
        dec_model, vocab = _restore_stage2(cfg, run_dir, manifest)
        mrep, rows = train.evaluate_split(cfg, stage1, dec_model, vocab, cases, catalog, taxonomy)
    suffix = f"{split}_oracle" if oracle else split
    metrics_path = os.path.join(eval_dir, f"metrics_{suffix}.tsv")
    report.write_kv_tsv(metrics_path, mrep.rows(), chash)
    report.write_table_tsv(os.path.join(eval_dir, f"predictions_{suffix}.tsv"),
                           ("id", "reference", "generated"), rows, chash)
    report.metrics_bar_png(os.path.join(eval_dir, f"metrics_{suffix}.png"), mrep, chash)
    click.echo(f"wrote metrics to {metrics_path}")


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
def retrieve(run_dir, split):
    """Report-to-volume retrieval recall on a split from the stage-1 checkpoint."""
    cfg, chash, manifest = _load_run(run_dir, ())
    splits, catalog, _ = _load_cases(cfg)
    cases = splits[split]
    if not cases:
        raise ConfigError(f"split {split!r} is empty")
    stage1 = _restore_stage1(cfg, run_dir, manifest)
    from .metrics import retrieval_recall
    text_tokens, volume_tokens = train.retrieval_tokens(cfg, stage1, cases, catalog)
    recall_at = retrieval_recall(text_tokens, volume_tokens, ks=(1, 5, 10))
    out_dir = os.path.join(run_dir, "retrieve")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"recall_{split}.tsv")
    rows = [(f"recall_at_{k}", v) for k, v in sorted(recall_at.items())]
    rows.append(("case_count", len(cases)))
    report.write_kv_tsv(path, rows, chash)
    report.recall_png(os.path.join(out_dir, f"recall_{split}.png"), recall_at, chash)
    click.echo(f"wrote recall to {path}")


ROW_VARIANTS = [
    ("a", {"flags.itc": "false", "flags.kl": "false", "flags.use_ts": "false"}),
    ("b", {"flags.kl": "false", "flags.use_ts": "false"}),
    ("c", {"queue.kind": "fifo", "flags.use_ts": "false"}),
    ("d", {"flags.use_ts": "false"}),
    ("full", {}),
]


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True)
@click.option("--run", "run_dir", required=True, help="Parent directory for the variant runs.")
@click.option("--axis", type=click.Choice(["alpha", "k", "rows"]), default="alpha")
@click.option("--values", default=None, help="Comma-separated grid values for alpha/k axes.")
@click.option("--split", default="val", type=click.Choice(["train", "val", "test"]))
@click.pass_context
def ablate(ctx, config_path, overrides, run_dir, axis, values, split):
    """Run an ablation grid end to end and tabulate the metrics."""
    if axis == "alpha":
        grid = [("alpha_" + v, {"align.alpha": v})
                for v in (values or "0.0,0.1,0.2,0.3,0.4").split(",")]
        labels = [v for v in (values or "0.0,0.1,0.2,0.3,0.4").split(",")]
    elif axis == "k":
        grid = [("k_" + v, {"align.k_select": v}) for v in (values or "5,10,15,20").split(",")]
        labels = [v for v in (values or "5,10,15,20").split(",")]
    else:
        grid = [("row_" + name, dict(ov)) for name, ov in ROW_VARIANTS]
        labels = [name for name, _ in ROW_VARIANTS]
    os.makedirs(run_dir, exist_ok=True)
    table = []
    series = {"ce_f1": [], "bleu4": []}
    for (label, variant), short in zip(grid, labels):
        sub = os.path.join(run_dir, label)
        var_overrides = list(overrides) + [f"{k}={v}" for k, v in variant.items()]
        ctx.invoke(pretrain, config_path=config_path, overrides=tuple(var_overrides), run_dir=sub)
        ctx.invoke(train_decoder_cmd, run_dir=sub, overrides=())
        ctx.invoke(eval_cmd, run_dir=sub, split=split, oracle=False)
        kv = report.read_kv_tsv(os.path.join(sub, "eval", f"metrics_{split}.tsv"))
        table.append((label, kv["ce_precision"], kv["ce_recall"], kv["ce_f1"],
                      kv["bleu1"], kv["bleu4"], kv["rouge_l"]))
        series["ce_f1"].append(float(kv["ce_f1"]))
        series["bleu4"].append(float(kv["bleu4"]))
    header = ("variant", "ce_precision", "ce_recall", "ce_f1", "bleu1", "bleu4", "rouge_l")
    report.write_table_tsv(os.path.join(run_dir, f"ablation_{axis}.tsv"), header, table)
    report.ablation_png(os.path.join(run_dir, f"ablation_{axis}.png"), labels, series)
    click.echo(f"ablation grid written to {run_dir}")


def main():
    try:
        cli(standalone_mode=False)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except ContractError as exc:
        click.echo(f"contract violation: {exc}", err=True)
        sys.exit(3)
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(4)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)


if __name__ == "__main__":
    main()
