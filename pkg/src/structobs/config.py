"""Run configuration: defaults, JSON round-trip, dotted overrides, hashing."""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class ContractError(RuntimeError):
    """Violated artifact contract such as a hash or freeze mismatch (exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite loss or similar numeric failure (exit code 4)."""


@dataclass
class CorpusConfig:
    path: str = ""  # corpus directory; generated by gen-data
    n_train: int = 256
    n_val: int = 64
    n_test: int = 64
    n_structures: int = 4  # content structures; the catch-all is added on top
    prevalence: float = 0.7
    gen_seed: int = 7
    extents: tuple = (32, 32, 16)
    noise_sigma: float = 0.05


@dataclass
class DimsConfig:
    d_v: int = 64
    d_q: int = 64
    d_a: int = 64
    d_o: int = 64
    d_t: int = 64
    d_p: int = 32
    patch_extents: tuple = (8, 8, 8)


@dataclass
class TextConfig:
    buckets: int = 4096
    seed: int = 1234


@dataclass
class QueueConfig:
    capacity: int = 64
    kind: str = "diversity"  # or "fifo"


@dataclass
class AlignConfig:
    alpha: float = 0.2
    tau_init: float = 0.07
    k_select: int = 10


@dataclass
class OptimConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1


@dataclass
class FlagsConfig:
    itc: bool = True
    kl: bool = True
    use_sv: bool = True
    use_ts: bool = True


@dataclass
class DecoderConfig:
    blocks: int = 2
    heads: int = 4
    width: int = 64
    ffn_mult: int = 4
    max_len: int = 128


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    dims: DimsConfig = field(default_factory=DimsConfig)
    text: TextConfig = field(default_factory=TextConfig)
    queue: QueueConfig = field(default_factory=QueueConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    stage1: OptimConfig = field(default_factory=OptimConfig)
    stage2: OptimConfig = field(default_factory=lambda: OptimConfig(steps=1000, lr=2e-3))
    flags: FlagsConfig = field(default_factory=FlagsConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def n_patches(self):
        ext, pat = self.corpus.extents, self.dims.patch_extents
        if any(e % p for e, p in zip(ext, pat)):
            raise ConfigError(f"volume extents {ext} not divisible by patch extents {pat}")
        return (ext[0] // pat[0]) * (ext[1] // pat[1]) * (ext[2] // pat[2])

    def validate(self):
        if not 0.0 <= self.align.alpha <= 1.0:
            raise ConfigError(f"align.alpha={self.align.alpha} outside [0, 1]")
        if self.queue.capacity < 1:
            raise ConfigError(f"queue.capacity={self.queue.capacity} must be >= 1")
        if self.queue.kind not in ("diversity", "fifo"):
            raise ConfigError(f"queue.kind={self.queue.kind!r} not in (diversity, fifo)")
        for stage in (self.stage1, self.stage2):
            if stage.batch_size < 1:
                raise ConfigError("batch_size must be >= 1")
            if stage.steps < 0:
                raise ConfigError("steps must be >= 0")
        if not 1 <= self.align.k_select <= self.n_patches():
            raise ConfigError(
                f"align.k_select={self.align.k_select} outside [1, {self.n_patches()}]")
        if self.corpus.extents[0] % self.corpus.n_structures:
            raise ConfigError("x extent must be divisible by the content structure count")
        return self


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name not in ("seed", "out_dir")}


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["corpus"]["extents"] = list(d["corpus"]["extents"])
    d["dims"]["patch_extents"] = list(d["dims"]["patch_extents"])
    return d


def config_from_dict(d):
    cfg = RunConfig()
    for key, value in d.items():
        if key in ("seed", "out_dir"):
            setattr(cfg, key, value)
        elif key in _SECTIONS:
            section = getattr(cfg, key)
            for k, v in value.items():
                if not hasattr(section, k):
                    raise ConfigError(f"unknown config field {key}.{k}")
                if k in ("extents", "patch_extents"):
                    v = tuple(v)
                setattr(section, k, v)
        else:
            raise ConfigError(f"unknown config section {key!r}")
    return cfg


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return config_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg):
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(current, text):
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(int(v) for v in text.split(","))
    return text


def apply_override(cfg, dotted, text):
    """Set a config field by dotted path, e.g. align.alpha=0.5."""
    parts = dotted.split(".")
    obj = cfg
    try:
        for p in parts[:-1]:
            obj = getattr(obj, p)
        current = getattr(obj, parts[-1])
    except AttributeError as exc:
        raise ConfigError(f"unknown config field {dotted!r}") from exc
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{dotted!r} is a section, not a field")
    setattr(obj, parts[-1], _coerce(current, text))
    return cfg


def resolve_out_dir(cfg):
    """Environment override for output paths only."""
    env = os.environ.get("STRUCTOBS_OUT")
    if env:
        cfg.out_dir = os.path.join(env, os.path.basename(cfg.out_dir.rstrip("/")))
    return cfg.out_dir
