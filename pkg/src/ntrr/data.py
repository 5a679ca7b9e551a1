"""Data plumbing: CoNLL files, vocabularies, batches, checkpoints, configs.

Corpus files are one token and tag per line, whitespace separated, with
blank lines between sentences. Checkpoints are a small binary format
(magic "NTRR") holding a canonical-text config block and length-prefixed
named tensors; run configs are flat "key = value" text validated against
a single schema.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, ParseError
from .model import ModelConfig
from .rng import Rng
from .tagging import LabelSet, bio_to_bmes, split_tag, validate_bmes
from .tensor import Tensor
from .training import TrainConfig

PAD_ID = 0
UNK_ID = 1
SCHEMES = ("bio", "bmes")

CHECKPOINT_MAGIC = b"NTRR"
CHECKPOINT_VERSION = 1
_FLAG_FLOAT64 = 1


@dataclass
class Corpus:
    """Tagged sentences, always stored in BMES after reading."""

    sentences: list[tuple[list[str], list[str]]]
    label_set: LabelSet
    repair_count: int = 0
    warnings: list[str] = None

    def __post_init__(self):
        if self.warnings is None:
            self.warnings = []


def read_conll(path: str, scheme: str = "bmes") -> Corpus:
    """Parse a token/tag file. BIO input is converted to BMES (repairs
    counted); a tag outside the scheme is a hard parse error naming the
    line; lines that are not blank and not token+tag pairs are reported
    as warnings and skipped."""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme '{scheme}'")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read: {exc}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8 at byte {exc.start}") from None

    valid_prefixes = ("B", "I") if scheme == "bio" else ("B", "M", "E", "S")
    sentences: list[tuple[list[str], list[str]]] = []
    warnings: list[str] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if tokens:
            sentences.append((tokens.copy(), tags.copy()))
            tokens.clear()
            tags.clear()

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            flush()
            continue
        parts = stripped.split()
        if len(parts) != 2:
            warnings.append(f"{path}: line {lineno}: expected 'token tag', "
                            f"got {len(parts)} fields; skipped")
            continue
        token, tag = parts
        tp = split_tag(tag)
        if tp is None or (tp[0] != "O" and tp[0] not in valid_prefixes):
            raise ParseError(f"{path}: line {lineno}: tag '{tag}' is not valid "
                             f"{scheme.upper()}")
        tokens.append(token)
        tags.append(tag)
    flush()
    if not sentences:
        raise ParseError(f"{path}: no sentences found")

    repair_count = 0
    if scheme == "bio":
        converted = []
        for toks, tgs in sentences:
            bmes, repairs = bio_to_bmes(tgs)
            repair_count += repairs
            converted.append((toks, bmes))
        sentences = converted
    else:
        for si, (toks, tgs) in enumerate(sentences):
            bad = validate_bmes(tgs)
            if bad:
                warnings.append(f"{path}: sentence {si + 1}: ill-formed BMES at "
                                f"token offsets {bad}")
    all_tags = (t for _, tgs in sentences for t in tgs)
    return Corpus(sentences, LabelSet.from_tags(all_tags), repair_count, warnings)


def write_conll(path: str, sentences) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tokens, tags in sentences:
            for token, tag in zip(tokens, tags):
                fh.write(f"{token} {tag}\n")
            fh.write("\n")


@dataclass
class Vocab:
    """Token inventory: 0 is padding, 1 is unknown, the rest are corpus
    tokens by descending frequency, ties broken lexicographically."""

    itos: list[str]

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ContractError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK_ID) for t in tokens], dtype=np.int64)


def build_vocab(corpus: Corpus, min_freq: int = 1) -> Vocab:
    counts: dict[str, int] = {}
    for tokens, _ in corpus.sentences:
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocab(["<pad>", "<unk>"] + kept)


def save_vocab(path: str, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.itos:
            fh.write(tok + "\n")


def load_vocab(path: str) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        itos = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if len(itos) < 2 or itos[0] != "<pad>" or itos[1] != "<unk>":
        raise ParseError(f"{path}: not a vocabulary file")
    return Vocab(itos)


def sibling_vocab_path(checkpoint_path: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), "vocab.txt")


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, T) int64, padded with PAD_ID
    tag_ids: np.ndarray  # (B, T) int64, padding rows are PAD positions
    token_mask: np.ndarray  # (B, T) bool, True on real tokens
    lengths: list[int]


def make_batches(corpus: Corpus, vocab: Vocab, batch_size: int,
                 rng: Rng | None = None) -> list[Batch]:
    """Chunk the corpus into padded batches; a rng shuffles sentence
    order first (None keeps corpus order, for evaluation)."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    label_set = corpus.label_set
    n = len(corpus.sentences)
    order = rng.permutation(n) if rng is not None and n > 1 else np.arange(n)
    batches = []
    for start in range(0, n, batch_size):
        chunk = [corpus.sentences[i] for i in order[start:start + batch_size]]
        width = max(len(tokens) for tokens, _ in chunk)
        b = len(chunk)
        token_ids = np.full((b, width), PAD_ID, dtype=np.int64)
        tag_ids = np.zeros((b, width), dtype=np.int64)
        mask = np.zeros((b, width), dtype=bool)
        lengths = []
        for row, (tokens, tags) in enumerate(chunk):
            t = len(tokens)
            token_ids[row, :t] = vocab.encode(tokens)
            tag_ids[row, :t] = label_set.encode(tags)
            mask[row, :t] = True
            lengths.append(t)
        batches.append(Batch(token_ids, tag_ids, mask, lengths))
    return batches


# ------------------------------------------------------------------ configs

# key -> (python type or tuple of choices, default, doc)
_MODEL_KEYS = {
    "model_dim": (int, 64, "hidden width of every layer"),
    "ffn_dim": (int, 128, "inner width of the feed-forward sublayers"),
    "xlnet_layers": (int, 2, "blocks in the lower (pretrainable) stack"),
    "transformer_layers": (int, 2, "blocks in the upper tagging stack"),
    "num_heads": (int, 4, "attention heads; must divide model_dim"),
    "clip_k": (int, 8, "displacement table radius: rows for [-k, k]"),
    "pe_mode": (("absolute", "relative"), "relative",
                "absolute sinusoidal input encoding, or learned relative tables"),
    "memory_len": (int, 0, "cached positions per layer for segment recurrence"),
    "dropout": (float, 0.15, "drop rate at every dropout site"),
    "decode_mode": (("greedy", "constrained"), "constrained",
                    "per-token argmax, or best path through BMES legality"),
    "token_mode": (("char", "whitespace"), "char",
                   "how plain prediction input is split into tokens"),
    "vocab_size": (int, 0, "token inventory size; 0 = derive from training data"),
    "entity_types": ("csv", (), "comma list of entity types; empty = derive from data"),
}

_TRAIN_KEYS = {
    "lr_init": (float, 0.002, "peak learning rate, reached at the end of warmup"),
    "warmup_steps": (int, 0, "linear warmup length; 0 = a tenth of total_steps"),
    "total_steps": (int, 0, "decay horizon; 0 = epochs * batches per epoch"),
    "epochs": (int, 50, "passes over the training corpus"),
    "alpha": (float, 1.0, "weight of the symmetric KL consistency term"),
    "batch_size": (int, 8, "sentences per step (doubled internally by R-Drop)"),
    "seed": (int, 42, "master seed; every stream derives from it"),
    "rdrop_enabled": (bool, True, "train with the two-branch consistency loss"),
    "rdrop_two_pass": (bool, False, "run two forwards instead of one duplicated batch"),
    "kl_half": (bool, False, "average the two KL directions instead of summing"),
    "grad_clip_norm": (float, 1.0, "global gradient norm ceiling; 0 disables"),
    "min_freq": (int, 1, "drop tokens rarer than this from the vocabulary"),
    "stop_at_f1": (float, 0.0, "stop once dev F1 reaches this; 0 disables"),
    "clip_k_start": (int, 0, "radius schedule start; with clip_k_end > 0 enables it"),
    "clip_k_end": (int, 0, "radius schedule end, reached at the last epoch"),
    "dtype": (("float64", "float32"), "float64", "parameter and activation precision"),
}

_SCHEMA = {**_MODEL_KEYS, **_TRAIN_KEYS}
# dropout is deliberately a single knob shared by both config objects
assert set(_MODEL_KEYS) & set(_TRAIN_KEYS) == set()


def _parse_value(key: str, raw: str):
    spec = _SCHEMA[key][0]
    raw = raw.strip()
    if spec is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key '{key}' expects an integer, got '{raw}'") from None
    if spec is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key '{key}' expects a number, got '{raw}'") from None
    if spec is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key '{key}' expects true/false, got '{raw}'")
    if spec == "csv":
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    if isinstance(spec, tuple):
        if raw not in spec:
            raise ConfigError(f"key '{key}' expects one of {spec}, got '{raw}'")
        return raw
    raise ContractError(f"schema bug for key '{key}'")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat 'key = value' lines; '#' starts a comment; unknown keys are
    rejected by name."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}: line {lineno}: unknown key '{key}'")
        values[key] = _parse_value(key, raw)
    return values


def configs_from_values(values: dict) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    if "dropout" in model_kwargs:
        train_kwargs["dropout"] = model_kwargs["dropout"]
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def load_run_config(path: str) -> tuple[ModelConfig, TrainConfig]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not valid UTF-8 at byte {exc.start}") from None
    return configs_from_values(parse_config_text(text, source=path))


def apply_overrides(model_config: ModelConfig, train_config: TrainConfig,
                    overrides) -> tuple[ModelConfig, TrainConfig]:
    """Apply 'key=value' strings on top of existing config objects."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key '{key}'")
        value = _parse_value(key, raw)
        if key in _MODEL_KEYS:
            model_config = replace(model_config, **{key: value})
            if key == "dropout":
                train_config = replace(train_config, dropout=value)
        else:
            train_config = replace(train_config, **{key: value})
    return model_config, train_config


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return repr(value) if isinstance(value, float) else str(value)


def model_config_text(config: ModelConfig) -> str:
    """Canonical text block for checkpoints: every model key, sorted."""
    lines = []
    for key in sorted(_MODEL_KEYS):
        lines.append(f"{key} = {_format_value(getattr(config, key))}")
    return "\n".join(lines) + "\n"


def config_reference() -> str:
    """One generated page documenting every config key and default."""
    out = io.StringIO()
    out.write("Configuration reference\n=======================\n\n"
              "Flat 'key = value' lines; '#' starts a comment; unknown keys\n"
              "are rejected. Every key, with type and default:\n")
    for title, keys in (("model", _MODEL_KEYS), ("training", _TRAIN_KEYS)):
        out.write(f"\n[{title}]\n")
        for key, (spec, default, doc) in keys.items():
            if isinstance(spec, tuple):
                kind = "|".join(spec)
            elif spec == "csv":
                kind = "comma list"
            else:
                kind = spec.__name__
            out.write(f"  {key} ({kind}, default {_format_value(default)})\n      {doc}\n")
    return out.getvalue()


# --------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    dtype: str


def save_checkpoint(path: str, params: dict[str, Tensor | np.ndarray],
                    model_config: ModelConfig) -> None:
    """Write header, canonical config block, then named tensor records."""
    arrays = {name: (p.data if isinstance(p, Tensor) else np.asarray(p))
              for name, p in params.items()}
    dtypes = {a.dtype for a in arrays.values()}
    if len(dtypes) > 1:
        raise ContractError(f"mixed parameter dtypes: {sorted(map(str, dtypes))}")
    use_f64 = dtypes == {np.dtype(np.float64)}
    flags = _FLAG_FLOAT64 if use_f64 else 0
    config_block = model_config_text(model_config).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IB", CHECKPOINT_VERSION, flags))
    buf.write(struct.pack("<Q", len(config_block)))
    buf.write(config_block)
    buf.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8" if use_f64 else "<f4").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    """Byte cursor that turns truncation into located corruption errors."""

    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def pull(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated at byte {len(self.blob)} "
                f"(needed {self.pos + n})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.pull(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.pull(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.pull(8))[0]


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read: {exc}") from None
    r = _Reader(blob, path)
    if r.pull(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0; not a checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    flags = r.u8()
    dtype = np.float64 if flags & _FLAG_FLOAT64 else np.float32
    config_len = r.u64()
    if config_len > len(blob):
        raise CheckpointError(f"{path}: config block length {config_len} at byte "
                              f"{r.pos - 8} exceeds file size")
    config_start = r.pos
    try:
        config_text = r.pull(config_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(
            f"{path}: config block is not UTF-8 at byte {config_start + exc.start}") from None
    try:
        values = parse_config_text(config_text, source=f"{path}[config]")
        model_config = configs_from_values(values)[0]
    except ConfigError as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None
    n_tensors = r.u64()
    if n_tensors > 1_000_000:
        raise CheckpointError(f"{path}: implausible tensor count {n_tensors} "
                              f"at byte {r.pos - 8}")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = r.u32()
        if name_len > 4096:
            raise CheckpointError(f"{path}: implausible name length {name_len} "
                                  f"at byte {r.pos - 4}")
        name_start = r.pos
        try:
            name = r.pull(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(
                f"{path}: tensor name is not UTF-8 at byte {name_start + exc.start}") from None
        if name in params:
            raise CheckpointError(f"{path}: duplicate tensor '{name}' at byte {name_start}")
        rank = r.u64()
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} at byte {r.pos - 8}")
        shape = tuple(r.u64() for _ in range(rank))
        count = 1
        for dim in shape:
            if dim > len(blob):
                raise CheckpointError(f"{path}: implausible dim {dim} at byte {r.pos}")
            count *= dim
        width = 8 if flags & _FLAG_FLOAT64 else 4
        raw = r.pull(count * width)
        arr = np.frombuffer(raw, dtype="<f8" if width == 8 else "<f4").reshape(shape)
        params[name] = arr.astype(dtype, copy=True)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes at byte {r.pos}")
    return Checkpoint(model_config, params,
                      "float64" if flags & _FLAG_FLOAT64 else "float32")


def params_from_checkpoint(ckpt: Checkpoint) -> dict[str, Tensor]:
    return {name: Tensor(arr.copy(), requires_grad=True)
            for name, arr in ckpt.params.items()}
