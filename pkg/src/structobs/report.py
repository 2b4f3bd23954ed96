"""Delimited output files and the figures rendered alongside them."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def write_kv_tsv(path, rows, config_hash):
    """Key/value metric file; every value is written with repr for exact round-trips."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"config_hash\t{config_hash}\n")
        for key, value in rows:
            fh.write(f"{key}\t{value!r}\n" if isinstance(value, float) else f"{key}\t{value}\n")


def read_kv_tsv(path):
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.rstrip("\n").partition("\t")
            rows[key] = value
    return rows


def write_table_tsv(path, header, rows, config_hash=None):
    with open(path, "w", encoding="utf-8") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash\t{config_hash}\n")
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _save(fig, path, config_hash):
    fig.savefig(path, dpi=110, metadata={"Software": f"structobs config={config_hash}"})
    plt.close(fig)


def loss_curve_png(path, log_rows, config_hash=""):
    """Stage-1 loss terms and temperature over training steps."""
    steps = [r[0] for r in log_rows]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax.plot(steps, [r[1] for r in log_rows], label="contrastive", lw=1)
    ax.plot(steps, [r[2] for r in log_rows], label="kl", lw=1)
    ax.plot(steps, [r[3] for r in log_rows], label="combined", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax2.plot(steps, [r[4] for r in log_rows], color="tab:red", lw=1)
    ax2.set_xlabel("step")
    ax2.set_ylabel("temperature")
    fig.tight_layout()
    _save(fig, path, config_hash)


def decoder_curve_png(path, log_rows, config_hash=""):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r[0] for r in log_rows], [r[1] for r in log_rows], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("next-token loss / token")
    fig.tight_layout()
    _save(fig, path, config_hash)


def metrics_bar_png(path, metric_report, config_hash=""):
    rows = [(k, v) for k, v in metric_report.rows() if k != "case_count"]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(range(len(rows)), [v for _, v in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([k for k, _ in rows], rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    fig.tight_layout()
    _save(fig, path, config_hash)


def recall_png(path, recall_at, config_hash=""):
    ks = sorted(recall_at)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(ks, [recall_at[k] for k in ks], marker="o")
    ax.set_xlabel("K")
    ax.set_ylabel("recall@K")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    _save(fig, path, config_hash)


def ablation_png(path, labels, series, config_hash=""):
    """Grouped metric curves across ablation variants."""
    fig, ax = plt.subplots(figsize=(6, 3.4))
    x = range(len(labels))
    for name, values in series.items():
        ax.plot(x, values, marker="o", label=name)
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(v) for v in labels], fontsize=8)
    ax.set_ylabel("score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)
