# msat_music/services/training.py
"""Single-scale pretraining, MSAT training and the gradient check harness.

Loss: mean over positions of the summed per-field negative log-likelihood of
the next event given the true prefix. MSAT keeps the note/track decoders frozen and
feeds their hidden states, reordered to bar order, into the fusion stage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor
from .checkpoint_store import save_checkpoint
from .neural_core import (
    FUSION_GLOBAL,
    FUSION_NONE,
    ForwardResult,
    IncompatibleCheckpoint,
    MsatParams,
    NonFiniteActivation,
    check_compatible,
    decoder_group,
    forward,
    fused_logits,
    global_alpha,
    init_msat,
    init_single_scale,
    scale_hidden,
)
from .representation import (
    SCALE_BAR,
    SCALE_NOTE,
    SCALE_TRACK,
    ScaledSequence,
    encode,
    order_events,
    realign,
    segment_song,
    serialize,
)
from .song_store import CanonicalSong
from .train_config import FROZEN_CONTEXT_PREFIX, ConfigValueError, TrainConfig
from .train_log import TrainLog, format_entry
from .vocabulary import FIELDS

logger = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


class MisalignedBatch(RuntimeError):
    pass


# ---------- loss ----------
def sequence_loss(logits: Sequence[Tensor], targets: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    """Return (loss, per-field mean NLL). `targets` is [T, 6] codes."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(logits) != 6 or targets.ndim != 2 or targets.shape[1] != 6:
        raise ShapeMismatch(f"expected six logit arrays and [T, 6] targets, got {len(logits)} and {targets.shape}")
    t = targets.shape[0]
    rows = np.arange(t)
    total: Optional[Tensor] = None
    per_field = np.zeros(6)
    for f, lg in enumerate(logits):
        if lg.ndim != 2 or lg.shape[0] != t:
            raise ShapeMismatch(f"{FIELDS[f]} logits {lg.shape} against {t} targets")
        if targets[:, f].max(initial=0) >= lg.shape[1] or targets[:, f].min(initial=0) < 0:
            raise ShapeMismatch(f"{FIELDS[f]} target code outside [0, {lg.shape[1]})")
        nll = -lg.log_softmax(axis=-1)[rows, targets[:, f]].sum()
        per_field[f] = nll.data / t
        total = nll if total is None else total + nll
    return total * (1.0 / t), per_field


# ---------- optimizer ----------
def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: MsatParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, arr in params.arrays.items():
            if params.is_frozen(name):
                continue
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(arr))
            v = self.v.setdefault(name, np.zeros_like(arr))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------- batches ----------
@dataclass
class Batch:
    """One training segment: every scale's ordering of the same events.

    Logits at position j predict event j+1 of the target ordering.
    """

    sequences: Dict[str, ScaledSequence]
    target_scale: str

    @property
    def target(self) -> ScaledSequence:
        return self.sequences[self.target_scale]

    @property
    def targets(self) -> np.ndarray:
        return self.target.codes()[1:]

    def __len__(self) -> int:
        return len(self.target)


def make_batch(song: CanonicalSong, scales: Sequence[str], target_scale: str) -> Batch:
    events = encode(song)
    sequences = {s: serialize(events, s) for s in dict.fromkeys([*scales, target_scale])}
    target = sequences[target_scale]
    for scale, seq in sequences.items():
        if realign(list(seq.events), seq.alignment, target.alignment) != target.events:
            raise MisalignedBatch(f"{scale} ordering does not realign onto {target_scale} order")
    return Batch(sequences=sequences, target_scale=target_scale)


def prepare_batches(songs: Sequence[CanonicalSong], scales: Sequence[str], target_scale: str,
                    max_len: int) -> List[Batch]:
    batches: List[Batch] = []
    for song in songs:
        for seg in segment_song(song, max_len):
            batches.append(make_batch(seg, scales, target_scale))
    return batches


# ---------- forward helpers ----------
def frozen_context(params: MsatParams, batch: Batch, mode: str) -> Dict[str, np.ndarray]:
    """Hidden states of the frozen decoders, in target order.

    aligned: one pass over each scale's full ordering, then realigned.
    prefix:  row j comes from the final position of the target-order prefix
             0..j re-serialized in that scale's order (what generation sees).
    """
    p = params.leaves(trainable=False)
    target = batch.target
    out: Dict[str, np.ndarray] = {}
    for scale in params.scales:
        if scale == params.target_scale or decoder_group(scale) not in params.frozen:
            continue
        if mode == FROZEN_CONTEXT_PREFIX:
            rows = []
            for j in range(len(target)):
                events, _ = order_events(target.events[: j + 1], scale)
                rows.append(scale_hidden(params, p, scale, events).data[-1])
            out[scale] = np.stack(rows)
        else:
            seq = batch.sequences[scale]
            out[scale] = realign(scale_hidden(params, p, scale, seq).data, seq.alignment, target.alignment)
    return out


def batch_logits(params: MsatParams, p: Mapping[str, Tensor], batch: Batch,
                 context: Optional[Mapping[str, np.ndarray]] = None) -> ForwardResult:
    if not context:
        return forward(params, p, batch.sequences)
    target = batch.target
    hidden: Dict[str, Tensor] = {}
    for scale in params.scales:
        if scale in context:
            hidden[scale] = Tensor(context[scale])
            continue
        seq = batch.sequences[scale]
        h = scale_hidden(params, p, scale, seq)
        hidden[scale] = h if scale == params.target_scale else realign(h, seq.alignment, target.alignment)
    return fused_logits(params, p, hidden)


def batch_loss(params: MsatParams, p: Mapping[str, Tensor], batch: Batch,
               context: Optional[Mapping[str, np.ndarray]] = None) -> Tuple[Tensor, np.ndarray]:
    try:
        result = batch_logits(params, p, batch, context)
    except NonFiniteActivation as e:
        raise DivergenceDetected(str(e)) from e
    logits = [lg[:-1] for lg in result.logits]
    loss, per_field = sequence_loss(logits, batch.targets)
    if not np.isfinite(loss.data):
        raise DivergenceDetected(f"non-finite loss {loss.data}")
    return loss, per_field


def evaluate_loss(params: MsatParams, batches: Sequence[Batch],
                  contexts: Optional[Sequence[Mapping[str, np.ndarray]]] = None) -> Tuple[float, np.ndarray]:
    p = params.leaves(trainable=False)
    total = 0.0
    fields = np.zeros(6)
    for i, b in enumerate(batches):
        loss, per_field = batch_loss(params, p, b, contexts[i] if contexts else None)
        total += float(loss.data)
        fields += per_field
    n = max(1, len(batches))
    return total / n, fields / n


# ---------- training loop ----------
def _check_frozen_gradients(params: MsatParams, grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if params.is_frozen(name) and np.any(g != 0):
            raise FreezeViolation(f"frozen parameter {name} received a gradient")


def _fit(params: MsatParams, train: List[Batch], valid: List[Batch], cfg: TrainConfig,
         context_mode: str) -> MsatParams:
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    log = TrainLog(cfg.log_path or None)
    witness = {g: params.checksum(g) for g in sorted(params.frozen)}

    has_frozen = any(decoder_group(s) in params.frozen for s in params.scales)
    train_ctx = [frozen_context(params, b, context_mode) for b in train] if has_frozen else None
    valid_ctx = [frozen_context(params, b, context_mode) for b in valid] if has_frozen else None

    def checkpoint(step: int, train_loss: float) -> Tuple[float, MsatParams]:
        valid_loss, fields = evaluate_loss(params, valid, valid_ctx)
        alpha = global_alpha(params).ravel() if params.fusion == FUSION_GLOBAL else None
        line = format_entry(step, train_loss, valid_loss, fields, alpha)
        log.append(line)
        logger.info(line)
        snapshot = params.copy()
        snapshot.meta.update(step=step, train_loss=train_loss, valid_loss=valid_loss)
        return valid_loss, snapshot

    best_loss, best = checkpoint(0, float("nan"))
    if cfg.checkpoint_path:
        save_checkpoint(best, cfg.checkpoint_path)

    window: List[float] = []
    for step in range(1, cfg.max_steps + 1):
        grads = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
        step_loss = 0.0
        for _ in range(cfg.batch_size):
            i = int(rng.integers(len(train)))
            leaves = params.leaves()
            loss, _ = batch_loss(params, leaves, train[i], train_ctx[i] if train_ctx else None)
            loss.backward()
            for name, g in params.gradients(leaves).items():
                grads[name] += g / cfg.batch_size
            step_loss += float(loss.data) / cfg.batch_size

        _check_frozen_gradients(params, grads)
        clip_by_global_norm(grads, cfg.grad_clip)
        adam.step(params, grads)
        for g, digest in witness.items():
            if params.checksum(g) != digest:
                raise FreezeViolation(f"frozen group {g} changed at step {step}")
        window.append(step_loss)

        if step % cfg.valid_every == 0 or step == cfg.max_steps:
            valid_loss, snapshot = checkpoint(step, float(np.mean(window)))
            window.clear()
            if valid_loss < best_loss or math.isnan(best_loss):
                best_loss, best = valid_loss, snapshot
                if cfg.checkpoint_path:
                    save_checkpoint(best, cfg.checkpoint_path)
    return best


def _split_batches(train_songs, valid_songs, scales, target_scale: str, max_len: int):
    if not train_songs:
        raise EmptyCorpus("no training songs")
    train = prepare_batches(train_songs, scales, target_scale, max_len)
    # validation falls back to the training songs
    valid = prepare_batches(valid_songs, scales, target_scale, max_len) if valid_songs else train
    return train, valid


def train_single_scale(train_songs: Sequence[CanonicalSong], scale: str, cfg: TrainConfig,
                       valid_songs: Sequence[CanonicalSong] = ()) -> MsatParams:
    """Pretrain one decoder plus decomposition and heads on one ordering."""
    train, valid = _split_batches(train_songs, valid_songs, (scale,), scale, cfg.max_seq_len)
    params = init_single_scale(cfg.model_config(), scale, cfg.seed)
    params.meta.update(kind="single", scale=scale)
    logger.info("training single-scale %s model on %d segment(s)", scale, len(train))
    return _fit(params, train, valid, cfg, cfg.frozen_context)


def build_msat(note_ckpt: MsatParams, track_ckpt: MsatParams, cfg: TrainConfig,
               bar_ckpt: Optional[MsatParams] = None) -> MsatParams:
    if cfg.fusion == FUSION_NONE:
        raise ConfigValueError("MSAT training needs fusion=global or fusion=local")
    for ckpt, scale in ((note_ckpt, SCALE_NOTE), (track_ckpt, SCALE_TRACK), (bar_ckpt, SCALE_BAR)):
        if ckpt is not None and (ckpt.fusion != FUSION_NONE or ckpt.target_scale != scale):
            raise IncompatibleCheckpoint(f"expected a single-scale {scale} checkpoint")
    model_cfg = check_compatible([c.config for c in (note_ckpt, track_ckpt, bar_ckpt) if c is not None])
    if cfg.init_bar_from_pretrained and bar_ckpt is None:
        raise ConfigValueError(
            "init_bar_from_pretrained=true needs a pretrained bar checkpoint (--bar-ckpt); "
            "set init_bar_from_pretrained=false to start the bar decoder from scratch"
        )

    params = init_msat(model_cfg, cfg.fusion, cfg.seed)
    sources: Dict[str, MsatParams] = {decoder_group(SCALE_NOTE): note_ckpt, decoder_group(SCALE_TRACK): track_ckpt}
    if cfg.init_bar_from_pretrained:
        bar_init = "pretrained"
        for group in (decoder_group(SCALE_BAR), "decompose", "heads"):
            sources[group] = bar_ckpt
    else:
        bar_init = "scratch"
        logger.info("bar decoder, decomposition and heads start from a fresh init (seed %d)", cfg.seed)
    for name in params.arrays:
        src = sources.get(params.group_of(name))
        if src is not None:
            params.arrays[name] = src.arrays[name].copy()
    params.meta.update(kind="msat", fusion=cfg.fusion, bar_init=bar_init)
    return params


def train_msat(train_songs: Sequence[CanonicalSong], note_ckpt: MsatParams, track_ckpt: MsatParams,
               cfg: TrainConfig, valid_songs: Sequence[CanonicalSong] = (),
               bar_ckpt: Optional[MsatParams] = None) -> MsatParams:
    """Train the bar decoder, decomposition, fusion and heads; note/track decoders stay fixed."""
    params = build_msat(note_ckpt, track_ckpt, cfg, bar_ckpt)
    max_len = min(cfg.max_seq_len, params.config.max_len)
    train, valid = _split_batches(train_songs, valid_songs, params.scales, SCALE_BAR, max_len)
    logger.info("training MSAT (%s fusion, %s context) on %d segment(s)", cfg.fusion, cfg.frozen_context, len(train))
    return _fit(params, train, valid, cfg, cfg.frozen_context)


# ---------- gradient check ----------
@dataclass
class GroupCheck:
    group: str
    status: str  # pass | fail | skipped
    max_rel_error: float = 0.0
    max_abs_error: float = 0.0
    checked: int = 0


@dataclass
class GradCheckReport:
    groups: List[GroupCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.status != "fail" for g in self.groups)

    def by_group(self) -> Dict[str, GroupCheck]:
        return {g.group: g for g in self.groups}


def _sample_indices(grad: np.ndarray, limit: Optional[int], rng: np.random.Generator) -> List[Tuple[int, ...]]:
    flat = np.arange(grad.size)
    if limit is None or limit >= grad.size:
        chosen = flat
    else:
        nonzero = flat[grad.ravel() != 0]
        zero = flat[grad.ravel() == 0]
        chosen = rng.permutation(nonzero)[:limit]
        if len(chosen) < limit:
            chosen = np.concatenate([chosen, rng.permutation(zero)[: limit - len(chosen)]])
    return [np.unravel_index(int(i), grad.shape) for i in chosen]


def grad_check(params: MsatParams, batch: Batch, eps: float = 1e-4, rtol: float = 1e-4,
               atol: float = 1e-7, max_per_parameter: Optional[int] = None, seed: int = 0,
               loss_fn: Optional[Callable[[MsatParams, Mapping[str, Tensor]], Tensor]] = None) -> GradCheckReport:
    """Central differences against the analytic gradient, per parameter group."""
    if loss_fn is None:
        def loss_fn(m: MsatParams, p: Mapping[str, Tensor]) -> Tensor:
            return batch_loss(m, p, batch)[0]

    leaves = params.leaves()
    loss_fn(params, leaves).backward()
    analytic = params.gradients(leaves)
    rng = np.random.default_rng(seed)

    report = GradCheckReport()
    for group in params.groups():
        if group in params.frozen:
            report.groups.append(GroupCheck(group, "skipped"))
            continue
        check = GroupCheck(group, "pass")
        for name in params.names_in(group):
            arr = params.arrays[name]
            for idx in _sample_indices(analytic[name], max_per_parameter, rng):
                orig = arr[idx]
                arr[idx] = orig + eps
                plus = float(loss_fn(params, params.leaves(trainable=False)).data)
                arr[idx] = orig - eps
                minus = float(loss_fn(params, params.leaves(trainable=False)).data)
                arr[idx] = orig
                numeric = (plus - minus) / (2 * eps)
                a = float(analytic[name][idx])
                diff = abs(a - numeric)
                rel = diff / max(abs(a), abs(numeric), 1e-300)
                check.max_abs_error = max(check.max_abs_error, diff)
                check.max_rel_error = max(check.max_rel_error, rel)
                check.checked += 1
                if diff > atol and rel > rtol:
                    check.status = "fail"
                    logger.warning("gradient mismatch %s%s: analytic=%g numeric=%g", name, list(idx), a, numeric)
        report.groups.append(check)
    return report
