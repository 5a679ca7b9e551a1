"""R-Drop training: duplicated-batch consistency loss, Adam with warmup.

Each training step runs the model twice under independent dropout masks
(either literally twice, or once over a duplicated batch; the mask
streams are keyed by branch, so both paths produce the same numbers).
The loss is the summed cross entropy of both branches plus alpha times
the symmetric KL divergence between their output distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from . import plm as plm_mod
from . import tensor as T
from .errors import ConfigError, ContractError, NumericsError
from .rng import DropoutStreams, DualDropoutStreams, Rng
from .tagging import Entity, entity_prf, scan_entities
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr_init: float = 0.002
    warmup_steps: int = 0  # 0 = a tenth of total_steps
    total_steps: int = 0  # 0 = epochs * batches per epoch
    epochs: int = 50
    alpha: float = 1.0
    dropout: float = 0.15
    batch_size: int = 8
    seed: int = 42
    rdrop_enabled: bool = True
    rdrop_two_pass: bool = False
    kl_half: bool = False
    grad_clip_norm: float = 1.0  # 0 disables clipping
    min_freq: int = 1
    stop_at_f1: float = 0.0  # 0 disables early exit
    clip_k_start: int = 0  # both > 0 enable the radius schedule
    clip_k_end: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ConfigError(f"lr_init must be positive, got {self.lr_init}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in M.DTYPES:
            raise ConfigError(f"unknown dtype '{self.dtype}'")


@dataclass
class RDropLossBreakdown:
    """The three loss terms of one step, still attached to the graph."""

    ce: Tensor
    kl_sym: Tensor
    alpha: float
    total: Tensor
    p1: Tensor | None = None
    p2: Tensor | None = None

    def floats(self) -> tuple[float, float, float]:
        return self.ce.item(), self.kl_sym.item(), self.total.item()


def rdrop_loss(log_probs_1: Tensor, log_probs_2: Tensor, targets, alpha: float,
               token_mask=None, kl_half: bool = False) -> RDropLossBreakdown:
    """ce = CE(branch 1) + CE(branch 2); kl_sym = KL(p1||p2) + KL(p2||p1);
    total = ce + alpha * kl_sym. Every term is a mean over unmasked
    tokens; kl_half averages the two KL directions instead of summing,
    for comparisons against halved-variant implementations."""
    if log_probs_1.shape != log_probs_2.shape:
        raise ContractError(f"branch shapes disagree: {log_probs_1.shape} vs {log_probs_2.shape}")
    ce = T.cross_entropy(log_probs_1, targets, token_mask) \
        + T.cross_entropy(log_probs_2, targets, token_mask)
    p1 = T.texp(log_probs_1)
    p2 = T.texp(log_probs_2)
    kl = T.kl_divergence(p1, p2, token_mask) + T.kl_divergence(p2, p1, token_mask)
    if kl_half:
        kl = kl * 0.5
    total = ce + kl * alpha
    return RDropLossBreakdown(ce, kl, alpha, total, p1, p2)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to lr_init, then inverse-square-root decay:
    lr_init * min(step / warmup, sqrt(warmup / step))."""
    if step < 1:
        raise ContractError(f"steps are 1-based, got {step}")
    warmup = config.warmup_steps
    if warmup < 1:
        raise ConfigError("lr_schedule needs warmup_steps >= 1 (resolve it first)")
    return config.lr_init * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    """Adam moments, one slot per registered parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], opt: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update from the accumulated gradients."""
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ContractError(f"parameter '{name}' has no gradient; run backward first")
        opt.m[name] = b1 * opt.m[name] + (1 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1 - b2) * (g * g)
        m_hat = opt.m[name] / c1
        v_hat = opt.v[name] / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(p.data.dtype, copy=False)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def k_effective(model_config: M.ModelConfig, train_config: TrainConfig,
                epoch: int, total_epochs: int) -> int | None:
    """Clip radius for this epoch under the optional linear schedule.

    Interpolates clip_k_start -> clip_k_end across epochs, bounded by
    the table radius. None means use the full table radius."""
    ks, ke = train_config.clip_k_start, train_config.clip_k_end
    if ks <= 0 or ke <= 0:
        return None
    if total_epochs <= 1:
        frac = 1.0
    else:
        frac = (epoch - 1) / (total_epochs - 1)
    k = round(ks + (ke - ks) * frac)
    return max(1, min(model_config.clip_k, k))


def train_step(batch, params: dict[str, Tensor], opt: OptimizerState,
               model_config: M.ModelConfig, train_config: TrainConfig,
               step: int, lr: float, k_eff: int | None = None) -> tuple[float, float, float]:
    """One optimization step; returns (ce, kl, total) as floats.

    With R-Drop on, the default path duplicates the batch and runs one
    forward whose dropout masks are branch-keyed per half; the two-pass
    path runs two forwards with the same branch streams. Both paths
    produce identical losses."""
    ids, tags, mask = batch.token_ids, batch.tag_ids, batch.token_mask
    seed = train_config.seed
    T.zero_grads(params.values())
    if not train_config.rdrop_enabled:
        streams = DropoutStreams(seed, step, 1)
        lp, _ = M.forward_ner(ids, None, model_config, params, streams, True, k_eff)
        ce = T.cross_entropy(lp, tags, mask)
        breakdown = RDropLossBreakdown(ce, Tensor(np.zeros(())), 0.0, ce)
    elif train_config.rdrop_two_pass:
        lp1, _ = M.forward_ner(ids, None, model_config, params,
                               DropoutStreams(seed, step, 1), True, k_eff)
        lp2, _ = M.forward_ner(ids, None, model_config, params,
                               DropoutStreams(seed, step, 2), True, k_eff)
        breakdown = rdrop_loss(lp1, lp2, tags, train_config.alpha, mask,
                               train_config.kl_half)
    else:
        dup_ids = np.concatenate([ids, ids], axis=0)
        streams = DualDropoutStreams(seed, step)
        lp, _ = M.forward_ner(dup_ids, None, model_config, params, streams, True, k_eff)
        b = ids.shape[0]
        lp1 = T.slice_axis(lp, 0, 0, b)
        lp2 = T.slice_axis(lp, 0, b, 2 * b)
        breakdown = rdrop_loss(lp1, lp2, tags, train_config.alpha, mask,
                               train_config.kl_half)
    ce, kl, total = breakdown.floats()
    if not (math.isfinite(ce) and math.isfinite(kl) and math.isfinite(total)):
        raise NumericsError(
            f"non-finite loss at step {step}: ce={ce}, kl={kl}, total={total}")
    T.backward(breakdown.total)
    clip_gradients(params, train_config.grad_clip_norm)
    adam_step(params, opt, lr)
    return ce, kl, total


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    per_type: dict[str, tuple[float, float, float]]
    repair_count: int


def evaluate(corpus, vocab, params, model_config: M.ModelConfig,
             batch_size: int = 32, k_eff: int | None = None) -> EvalResult:
    """Entity-level scores of the model on a corpus, eval mode (no
    dropout). Predicted tag sequences are decoded per decode_mode;
    repairs counted while extracting predicted entities are reported."""
    from .data import make_batches  # local import; data also imports tagging

    label_set = model_config.label_set
    pred_entities: list[Entity] = []
    gold_entities: list[Entity] = []
    repairs = 0
    base = 0
    with T.no_grad():
        for batch in make_batches(corpus, vocab, batch_size, rng=None):
            lp, _ = M.forward_ner(batch.token_ids, None, model_config, params,
                                  None, False, k_eff)
            for row in range(batch.token_ids.shape[0]):
                n = batch.lengths[row]
                seq = M.decode(lp.data[row, :n], label_set, model_config.decode_mode)
                pred_tags = label_set.decode(seq.tags)
                ents, rep = scan_entities(pred_tags)
                repairs += rep
                pred_entities.extend(Entity(e.start + base, e.end + base, e.etype)
                                     for e in ents)
                gold_tags = [label_set.tag(i) for i in batch.tag_ids[row, :n]]
                gold_entities.extend(Entity(e.start + base, e.end + base, e.etype)
                                     for e in scan_entities(gold_tags)[0])
                base += n
    scores = entity_prf(pred_entities, gold_entities)
    return EvalResult(scores.precision, scores.recall, scores.f1,
                      scores.per_type, repairs)


@dataclass
class EpochStats:
    epoch: int
    steps: int
    mean_ce: float
    mean_kl: float
    mean_total: float
    precision: float
    recall: float
    f1: float


@dataclass
class TrainReport:
    history: list[EpochStats]
    best_f1: float
    best_epoch: int
    params: dict[str, Tensor]
    vocab: object
    model_config: M.ModelConfig
    stopped_early: bool = False


def resolve_schedule(train_config: TrainConfig, n_batches: int) -> TrainConfig:
    """Fill in total_steps and warmup_steps when left at 0."""
    total = train_config.total_steps or train_config.epochs * n_batches
    warmup = train_config.warmup_steps or max(1, total // 10)
    return replace(train_config, total_steps=total, warmup_steps=warmup)


def train(train_corpus, dev_corpus, model_config: M.ModelConfig,
          train_config: TrainConfig, log=None, checkpoint_path: str | None = None,
          vocab=None, init_params_from: dict[str, np.ndarray] | None = None) -> TrainReport:
    """Fine-tune on a tagged corpus, evaluating on dev each epoch.

    Logs one tab-separated line per step (step, lr, ce, kl, total) and
    one per epoch (epoch, number, P, R, F1). The checkpoint with the
    best dev F1 is kept. Everything is keyed off train_config.seed, so
    two runs with the same data and config match bitwise."""
    from . import data as D

    emit = log if log is not None else (lambda line: None)
    if vocab is None:
        vocab = D.build_vocab(train_corpus, train_config.min_freq)
    label_types = model_config.entity_types or train_corpus.label_set.entity_types
    missing = set(train_corpus.label_set.entity_types) - set(label_types)
    if missing:
        raise ConfigError(f"corpus has entity types outside the label set: {sorted(missing)}")
    model_config = replace(model_config, vocab_size=len(vocab),
                           entity_types=tuple(label_types),
                           dropout=train_config.dropout)
    params = M.init_params(model_config, Rng.for_stream(train_config.seed, "init"),
                           train_config.dtype)
    if init_params_from is not None:
        _warm_start(params, init_params_from)
    opt = OptimizerState.for_params(params)
    n_batches = math.ceil(len(train_corpus.sentences) / train_config.batch_size)
    cfg = resolve_schedule(train_config, n_batches)
    step = 0
    best_f1, best_epoch = -1.0, 0
    history: list[EpochStats] = []
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        k_eff = k_effective(model_config, cfg, epoch, cfg.epochs)
        batches = D.make_batches(train_corpus, vocab, cfg.batch_size,
                                 Rng.for_stream(cfg.seed, "shuffle", epoch))
        sums = np.zeros(3)
        for batch in batches:
            step += 1
            lr = lr_schedule(step, cfg)
            ce, kl, total = train_step(batch, params, opt, model_config, cfg,
                                       step, lr, k_eff)
            sums += (ce, kl, total)
            emit(f"{step}\t{lr:.8g}\t{ce:.6f}\t{kl:.6f}\t{total:.6f}")
        res = evaluate(dev_corpus, vocab, params, model_config, k_eff=k_eff)
        emit(f"epoch\t{epoch}\t{res.precision:.4f}\t{res.recall:.4f}\t{res.f1:.4f}")
        history.append(EpochStats(epoch, len(batches), *(sums / max(1, len(batches))),
                                  res.precision, res.recall, res.f1))
        if res.f1 > best_f1:
            best_f1, best_epoch = res.f1, epoch
            if checkpoint_path is not None:
                D.save_checkpoint(checkpoint_path, params, model_config)
                D.save_vocab(D.sibling_vocab_path(checkpoint_path), vocab)
        if cfg.stop_at_f1 > 0 and res.f1 >= cfg.stop_at_f1:
            stopped = True
            break
    return TrainReport(history, best_f1, best_epoch, params, vocab,
                       model_config, stopped)


def _warm_start(params: dict[str, Tensor], source: dict[str, np.ndarray]) -> None:
    """Copy pretrained encoder weights in by name where shapes agree."""
    prefixes = ("embed", "w_init", "xl.", "plm_head", "final_ln")
    for name, arr in source.items():
        if name in params and name.startswith(prefixes):
            if params[name].data.shape != arr.shape:
                raise ConfigError(
                    f"warm start shape mismatch for '{name}': "
                    f"{arr.shape} vs {params[name].data.shape}")
            params[name].data = arr.astype(params[name].data.dtype)


def pretrain(corpus, model_config: M.ModelConfig, train_config: TrainConfig,
             log=None, checkpoint_path: str | None = None) -> TrainReport:
    """Permutation-LM pretraining over single sentences.

    Each step samples a fresh factorization order for one sentence and
    minimizes the prediction loss of the order's tail. Logs the same
    step format as train with kl fixed at 0."""
    from . import data as D

    emit = log if log is not None else (lambda line: None)
    vocab = D.build_vocab(corpus, train_config.min_freq)
    label_types = model_config.entity_types or corpus.label_set.entity_types or ("X",)
    model_config = replace(model_config, vocab_size=len(vocab),
                           entity_types=tuple(label_types),
                           dropout=train_config.dropout)
    params = M.init_params(model_config, Rng.for_stream(train_config.seed, "init"),
                           train_config.dtype)
    opt = OptimizerState.for_params(params)
    sentences = [vocab.encode(tokens) for tokens, _ in corpus.sentences]
    n = len(sentences)
    cfg = resolve_schedule(train_config, n)
    step = 0
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        order = Rng.for_stream(cfg.seed, "shuffle", epoch).permutation(n)
        for si in order:
            step += 1
            if step > cfg.total_steps:
                break
            ids = sentences[si][None, :]
            plan = plm_mod.sample_permutation(ids.shape[1],
                                              Rng.for_stream(cfg.seed, "perm", step))
            T.zero_grads(params.values())
            streams = DropoutStreams(cfg.seed, step, 1)
            loss, _ = M.pretrain_forward(ids, plan, None, model_config, params,
                                         streams, True)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericsError(f"non-finite pretraining loss at step {step}")
            T.backward(loss)
            clip_gradients(params, cfg.grad_clip_norm)
            lr = lr_schedule(step, cfg)
            adam_step(params, opt, lr)
            losses.append(value)
            emit(f"{step}\t{lr:.8g}\t{value:.6f}\t{0.0:.6f}\t{value:.6f}")
        if step > cfg.total_steps:
            break
    if checkpoint_path is not None:
        D.save_checkpoint(checkpoint_path, params, model_config)
        D.save_vocab(D.sibling_vocab_path(checkpoint_path), vocab)
    history = [EpochStats(1, len(losses), float(np.mean(losses)) if losses else 0.0,
                          0.0, float(np.mean(losses)) if losses else 0.0, 0.0, 0.0, 0.0)]
    return TrainReport(history, 0.0, 0, params, vocab, model_config)
