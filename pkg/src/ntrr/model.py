"""Model assembly: embeddings, recurrent encoder stacks, classifier.

The encoder is two pre-norm stacks sharing one architecture: a lower
stack that is pretrained with permutation-LM two-stream attention, and
an upper stack added for tagging. Both run left to right over
[cached memory ; current segment] keys, so states cached from the
previous segment reproduce exactly what an unsplit pass would compute.
Fine-tuning and inference use the content stream only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import plm, relpos
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .rng import Rng
from .tagging import LabelSet, TagSequence, legal_transitions, validate_bmes
from .tensor import Tensor

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    vocab_size: int = 0  # 0 until a vocabulary is attached
    model_dim: int = 64
    ffn_dim: int = 128
    xlnet_layers: int = 2
    transformer_layers: int = 2
    num_heads: int = 4
    clip_k: int = 8
    pe_mode: str = "relative"
    memory_len: int = 0
    dropout: float = 0.15
    decode_mode: str = "constrained"
    token_mode: str = "char"
    entity_types: tuple[str, ...] = ()

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.pe_mode not in relpos.PE_MODES:
            raise ConfigError(f"unknown pe_mode '{self.pe_mode}'")
        if self.pe_mode == "absolute" and self.model_dim % 2 != 0:
            raise ConfigError("absolute mode needs an even model_dim")
        if self.clip_k < 1:
            raise ConfigError(f"clip_k must be >= 1, got {self.clip_k}")
        if self.xlnet_layers < 1:
            raise ConfigError("need at least one lower-stack layer")
        if self.transformer_layers < 0 or self.memory_len < 0:
            raise ConfigError("layer counts and memory_len must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.decode_mode not in ("greedy", "constrained"):
            raise ConfigError(f"unknown decode_mode '{self.decode_mode}'")
        if self.token_mode not in ("char", "whitespace"):
            raise ConfigError(f"unknown token_mode '{self.token_mode}'")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def num_layers(self) -> int:
        return self.xlnet_layers + self.transformer_layers

    @property
    def label_set(self) -> LabelSet:
        return LabelSet(tuple(self.entity_types))

    @property
    def num_tags(self) -> int:
        return 1 + 4 * len(self.entity_types)

    def attention_config(self) -> relpos.AttentionConfig:
        return relpos.AttentionConfig(self.model_dim, self.num_heads, self.clip_k,
                                      self.pe_mode, self.dropout)


@dataclass
class SegmentMemory:
    """Per-layer cached states of everything before the current segment.

    layers[i] holds the detached inputs of block i from earlier
    segments, shape (B, M, D); offset is the global position of the
    first token of the next segment."""

    layers: list[np.ndarray]
    offset: int = 0

    @classmethod
    def empty(cls, n_layers: int) -> "SegmentMemory":
        return cls([np.zeros((0, 0, 0))] * n_layers, 0)

    def length(self) -> int:
        return 0 if not self.layers else self.layers[0].shape[1]


def _init_stream(rng: Rng, name: str):
    return rng.derive(name)


def init_params(config: ModelConfig, rng: Rng, dtype: str = "float64") -> dict[str, Tensor]:
    """Fresh parameter registry; every optimizable tensor exactly once.

    Projections get uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    embeddings, displacement tables, and the two output heads get
    0.02-std normals (near-zero heads give near-uniform predictions at
    initialization); gains start at one and biases at zero. Each tensor
    draws from its own stream, so the registry is independent of
    creation order."""
    if config.vocab_size < 2:
        raise ConfigError(f"vocab_size must be >= 2, got {config.vocab_size}")
    if not config.entity_types:
        raise ConfigError("entity_types is empty; attach a label set first")
    nptype = DTYPES[dtype]
    D, F, V = config.model_dim, config.ffn_dim, config.vocab_size
    R = 2 * config.clip_k + 1
    params: dict[str, Tensor] = {}

    def param(name, arr):
        params[name] = Tensor(np.ascontiguousarray(arr, dtype=nptype), requires_grad=True)

    def glorot(name, fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        u = _init_stream(rng, name).uniform((fan_in, fan_out))
        param(name, (u * 2.0 - 1.0) * a)

    def normal02(name, shape):
        param(name, _init_stream(rng, name).normal(shape, 0.02))

    normal02("embed", (V, D))
    normal02("w_init", (D,))
    stacks = [("xl", config.xlnet_layers), ("tr", config.transformer_layers)]
    for stack, n_layers in stacks:
        for i in range(n_layers):
            p = f"{stack}.{i}."
            param(p + "ln1_g", np.ones(D))
            param(p + "ln1_b", np.zeros(D))
            for proj in ("wq", "wk", "wv", "wo"):
                glorot(p + proj, D, D)
                param(p + "b" + proj[1], np.zeros(D))
            param(p + "ln2_g", np.ones(D))
            param(p + "ln2_b", np.zeros(D))
            glorot(p + "ffn_w1", D, F)
            param(p + "ffn_b1", np.zeros(F))
            glorot(p + "ffn_w2", F, D)
            param(p + "ffn_b2", np.zeros(D))
        if n_layers > 0:
            normal02(f"{stack}.rel_wk", (R, config.head_dim))
            normal02(f"{stack}.rel_wv", (R, config.head_dim))
    param("final_ln_g", np.ones(D))
    param("final_ln_b", np.zeros(D))
    normal02("plm_head_w", (D, V))
    param("plm_head_b", np.zeros(V))
    normal02("cls_w", (D, config.num_tags))
    param("cls_b", np.zeros(config.num_tags))
    return params


def param_count(config: ModelConfig) -> int:
    """Closed-form size of the registry init_params builds."""
    D, F, V = config.model_dim, config.ffn_dim, config.vocab_size
    K = config.num_tags
    R = 2 * config.clip_k + 1
    block = 4 * (D * D + D) + 4 * D + (D * F + F) + (F * D + D)
    n_stacks_with_tables = 1 + (1 if config.transformer_layers > 0 else 0)
    return (V * D + D
            + config.num_layers * block
            + n_stacks_with_tables * 2 * R * config.head_dim
            + 2 * D
            + (D * V + V)
            + (D * K + K))


def block_params(params: dict[str, Tensor], prefix: str) -> relpos.BlockParams:
    attn = relpos.AttentionParams(
        wq=params[prefix + "wq"], bq=params[prefix + "bq"],
        wk=params[prefix + "wk"], bk=params[prefix + "bk"],
        wv=params[prefix + "wv"], bv=params[prefix + "bv"],
        wo=params[prefix + "wo"], bo=params[prefix + "bo"])
    return relpos.BlockParams(
        ln1_g=params[prefix + "ln1_g"], ln1_b=params[prefix + "ln1_b"], attn=attn,
        ln2_g=params[prefix + "ln2_g"], ln2_b=params[prefix + "ln2_b"],
        ffn_w1=params[prefix + "ffn_w1"], ffn_b1=params[prefix + "ffn_b1"],
        ffn_w2=params[prefix + "ffn_w2"], ffn_b2=params[prefix + "ffn_b2"])


def rel_table(params: dict[str, Tensor], stack: str, config: ModelConfig):
    if config.pe_mode != "relative":
        return None
    return relpos.RelPosTable(params[f"{stack}.rel_wk"], params[f"{stack}.rel_wv"])


def _drop(x: Tensor, config: ModelConfig, streams, train: bool) -> Tensor:
    if train and config.dropout > 0.0:
        if streams is None:
            raise ContractError("training forward needs dropout streams")
        return T.dropout(x, config.dropout, streams.mask(x.shape, config.dropout))
    return x


def _check_memory(memory, config: ModelConfig, batch: int):
    if memory is None:
        return SegmentMemory.empty(config.num_layers)
    if len(memory.layers) not in (config.xlnet_layers, config.num_layers):
        raise ContractError(
            f"memory has {len(memory.layers)} layers; config expects "
            f"{config.xlnet_layers} or {config.num_layers}")
    for m in memory.layers:
        if m.size and (m.ndim != 3 or m.shape[0] != batch):
            raise ContractError(f"memory layer shape {m.shape} does not fit batch {batch}")
    return memory


def _embed(token_ids: np.ndarray, config: ModelConfig, params, positions,
           streams, train: bool) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"token_ids must be (batch, time), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    h = T.embedding(params["embed"], ids)
    if config.pe_mode == "absolute":
        pe = relpos.sinusoidal_pe(positions, config.model_dim, h.dtype)
        h = h + Tensor(pe[None, :, :])
    return _drop(h, config, streams, train)


def _causal_mask(t: int, mem_len: int) -> np.ndarray:
    mask = np.tril(np.ones((t, t), dtype=bool))
    return plm.extend_mask_for_memory(mask, mem_len)


def _run_content_stack(h: Tensor, stack: str, n_layers: int, config: ModelConfig,
                       params, mem_layers, offset: int, streams, train: bool,
                       k_eff) -> tuple[Tensor, list[np.ndarray]]:
    """Left-to-right blocks over [memory ; current]; returns the new
    per-layer memory (detached tails of each block's input)."""
    batch, t, _ = h.shape
    table = rel_table(params, stack, config) if n_layers > 0 else None
    attn_cfg = config.attention_config()
    pos_q = offset + np.arange(t, dtype=np.int64)
    new_mems = []
    for i in range(n_layers):
        mem = mem_layers[i] if i < len(mem_layers) else np.zeros((batch, 0, config.model_dim))
        m_len = mem.shape[1] if mem.size else 0
        pos_k = np.concatenate([offset - m_len + np.arange(m_len, dtype=np.int64), pos_q])
        mask = _causal_mask(t, m_len)
        block = block_params(params, f"{stack}.{i}.")
        normed_q = T.layer_norm(h, block.ln1_g, block.ln1_b)
        if m_len > 0:
            kv = T.concat([Tensor(mem), h], axis=1)
            normed_kv = T.layer_norm(kv, block.ln1_g, block.ln1_b)
        else:
            normed_kv = normed_q
        att = relpos.multi_head_attention(
            normed_q, normed_kv, attn_cfg, block.attn, mask, pos_q, pos_k,
            table, streams, train, k_eff)
        if config.memory_len > 0:
            joined = np.concatenate([mem, h.data], axis=1) if m_len else h.data
            new_mems.append(joined[:, -config.memory_len:].copy())
        h = h + _drop(att, config, streams, train)
        h = h + _drop(relpos.feed_forward(
            T.layer_norm(h, block.ln2_g, block.ln2_b), block), config, streams, train)
    if config.memory_len == 0:
        new_mems = [np.zeros((0, 0, 0))] * n_layers
    return h, new_mems


def encode(token_ids, memory, config: ModelConfig, params, streams=None,
           train: bool = False, k_eff: int | None = None) -> tuple[Tensor, SegmentMemory]:
    """Content-stream pass of the lower (pretrained) stack.

    Returns the hidden states and an updated memory holding the last
    memory_len positions of each block's input, detached."""
    ids = np.asarray(token_ids, dtype=np.int64)
    memory = _check_memory(memory, config, ids.shape[0])
    t = ids.shape[1]
    positions = memory.offset + np.arange(t, dtype=np.int64)
    h = _embed(ids, config, params, positions, streams, train)
    h, new_mems = _run_content_stack(
        h, "xl", config.xlnet_layers, config, params,
        memory.layers[:config.xlnet_layers], memory.offset, streams, train, k_eff)
    return h, SegmentMemory(new_mems, memory.offset + t)


def forward_ner(token_ids, memory, config: ModelConfig, params, streams=None,
                train: bool = False, k_eff: int | None = None) -> tuple[Tensor, SegmentMemory]:
    """Full tagging forward: lower stack, upper stack, classifier.

    Returns per-token log-probabilities (B, T, num_tags) and the
    updated memory across all blocks."""
    ids = np.asarray(token_ids, dtype=np.int64)
    memory = _check_memory(memory, config, ids.shape[0])
    h, xl_mem = encode(ids, memory, config, params, streams, train, k_eff)
    h, tr_mems = _run_content_stack(
        h, "tr", config.transformer_layers, config, params,
        memory.layers[config.xlnet_layers:], memory.offset, streams, train, k_eff)
    h = T.layer_norm(h, params["final_ln_g"], params["final_ln_b"])
    log_probs = classify(h, params)
    new_memory = SegmentMemory(xl_mem.layers + tr_mems, xl_mem.offset)
    return log_probs, new_memory


def classify(hidden: Tensor, params) -> Tensor:
    """Linear head + log-softmax over the tag inventory."""
    return T.log_softmax(T.linear(hidden, params["cls_w"], params["cls_b"]), axis=-1)


def pretrain_forward(token_ids, plan: plm.PermutationPlan, memory, config: ModelConfig,
                     params, streams=None, train: bool = False,
                     k_eff: int | None = None) -> tuple[Tensor, SegmentMemory]:
    """Two-stream permutation-LM pass of the lower stack; returns the
    prediction loss over the plan's targets and updated memory."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    memory = _check_memory(memory, config, ids.shape[0])
    batch, t = ids.shape
    if plan.order.shape[0] != t:
        raise ContractError(f"plan covers {plan.order.shape[0]} tokens, batch has {t}")
    positions = memory.offset + np.arange(t, dtype=np.int64)
    h = _embed(ids, config, params, positions, streams, train)
    D = config.model_dim
    g = Tensor(np.zeros((batch, t, D), dtype=h.dtype)) + T.reshape(params["w_init"], (1, 1, D))
    if config.pe_mode == "absolute":
        g = g + Tensor(relpos.sinusoidal_pe(positions, D, h.dtype)[None, :, :])
    table = rel_table(params, "xl", config)
    attn_cfg = config.attention_config()
    new_mems = []
    for i in range(config.xlnet_layers):
        mem = memory.layers[i] if i < len(memory.layers) else np.zeros((batch, 0, D))
        m_len = mem.shape[1] if mem.size else 0
        pos_k = np.concatenate([memory.offset - m_len + np.arange(m_len, dtype=np.int64),
                                positions])
        q_mask = plm.extend_mask_for_memory(plan.query_mask, m_len)
        c_mask = plm.extend_mask_for_memory(plan.content_mask, m_len)
        if config.memory_len > 0:
            joined = np.concatenate([mem, h.data], axis=1) if m_len else h.data
            new_mems.append(joined[:, -config.memory_len:].copy())
        h, g = plm.two_stream_layer(
            h, g, q_mask, c_mask, block_params(params, f"xl.{i}."), attn_cfg,
            positions, pos_k, table, Tensor(mem) if m_len else None,
            streams, train, k_eff, config.dropout)
    if config.memory_len == 0:
        new_mems = [np.zeros((0, 0, 0))] * config.xlnet_layers
    g = T.layer_norm(g, params["final_ln_g"], params["final_ln_b"])
    loss = plm.plm_loss(g, plan.targets, ids, params["plm_head_w"], params["plm_head_b"])
    return loss, SegmentMemory(new_mems, memory.offset + t)


def decode(log_probs: np.ndarray, label_set: LabelSet, mode: str = "constrained") -> TagSequence:
    """Tag indices for one sentence from (T, num_tags) log-probs.

    greedy: per-token argmax, may be ill-formed (valid flag reports it).
    constrained: best path through the BMES transition discipline with
    uniform transition scores, so the output is always well-formed."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[1] != len(label_set):
        raise ShapeError(f"log_probs shape {lp.shape} does not fit {len(label_set)} tags")
    if lp.shape[0] == 0:
        return TagSequence([], True)
    if mode == "greedy":
        ids = lp.argmax(axis=1).tolist()
    elif mode == "constrained":
        ids = _viterbi(lp, label_set)
    else:
        raise ConfigError(f"unknown decode mode '{mode}'")
    tags = label_set.decode(ids)
    return TagSequence(ids, not validate_bmes(tags))


def _viterbi(lp: np.ndarray, label_set: LabelSet) -> list[int]:
    start_ok, pair_ok, end_ok = legal_transitions(label_set)
    neg = -np.inf
    t_steps, K = lp.shape
    trans = np.where(pair_ok, 0.0, neg)
    score = np.where(start_ok, lp[0], neg)
    back = np.zeros((t_steps, K), dtype=np.int64)
    for t in range(1, t_steps):
        cand = score[:, None] + trans
        back[t] = cand.argmax(axis=0)
        score = cand[back[t], np.arange(K)] + lp[t]
    score = np.where(end_ok, score, neg)
    best = int(score.argmax())
    path = [best]
    for t in range(t_steps - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    path.reverse()
    return path
