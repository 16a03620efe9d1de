"""Training loop for both regimes: Adam with constant learning rate,
joint translation+CLM stepping with deterministic data mixing,
checkpointing and machine-parseable metric logging.

The joint objective is the plain sum of the translation cross entropy and
the two causal-LM cross entropies (source- and target-side monolingual);
the baseline regime optimizes the translation term alone. All shuffling is
derived functionally from (seed, epoch/cycle) so a resumed run replays the
exact batch order of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from minimt.autodiff import Tensor, backward, cross_entropy, no_grad, zero_grads
from minimt.data import ParallelCorpus, Vocabulary, make_batches
from minimt.model import FreezeSpec, apply_freeze, clm_forward, translation_forward

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PAPER_LR = 1e-5  # full-scale finetuning preset; far too small from random init


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass
class TrainConfig:
    steps: int | None = None
    epochs: int | None = None
    batch_size: int = 16
    clm_batch_size: int | None = None
    max_len: int = 64
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int | None = None
    mixing: str = "joint"  # or "round_robin"
    clm_loss_weight: float = 1.0
    clip_norm: float | None = None

    def __post_init__(self):
        if (self.steps is None) == (self.epochs is None):
            raise ValueError("set exactly one of steps or epochs")
        for name in ("steps", "epochs", "batch_size", "clm_batch_size",
                     "log_interval", "checkpoint_interval"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.mixing not in ("joint", "round_robin"):
            raise ValueError(f"unknown mixing mode {self.mixing!r}")

    @property
    def effective_clm_batch_size(self):
        return self.clm_batch_size if self.clm_batch_size is not None else self.batch_size


@dataclass
class LossBreakdown:
    """Per-task loss components of one step. ``loss`` is the graph root that
    was (or would be) backpropagated; components are plain floats."""

    l_t: float
    l_clm_src: float = 0.0
    l_clm_tgt: float = 0.0
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def l_clm(self) -> float:
        return self.l_clm_src + self.l_clm_tgt

    @property
    def l_mtl(self) -> float:
        return self.l_t + self.l_clm


def compute_losses(model, parallel_batch, src_mono_batch=None, tgt_mono_batch=None,
                   clm_weight: float = 1.0) -> LossBreakdown:
    """Forward all active tasks and sum their cross entropies.

    PAD label positions are excluded via the batch's pad id. The baseline
    model rejects monolingual batches outright. With ``clm_weight`` != 1 the
    graph root is the weighted sum but the reported components stay raw.
    """
    if not model.multitask and (src_mono_batch is not None or tgt_mono_batch is not None):
        raise TrainingError("baseline model cannot consume monolingual batches")
    terms = []
    l_t = 0.0
    if parallel_batch is not None:
        t_loss = cross_entropy(translation_forward(model, parallel_batch),
                               parallel_batch.tgt_labels, ignore_id=parallel_batch.pad_id)
        l_t = t_loss.item()
        terms.append(t_loss)
    elif not model.multitask:
        raise TrainingError("baseline model needs a parallel batch")

    l_src = l_tgt = 0.0
    for mono, is_src in ((src_mono_batch, True), (tgt_mono_batch, False)):
        if mono is None:
            continue
        loss = cross_entropy(clm_forward(model, mono), mono.labels, ignore_id=mono.pad_id)
        if is_src:
            l_src = loss.item()
        else:
            l_tgt = loss.item()
        terms.append(loss if clm_weight == 1.0 else loss * clm_weight)
    if not terms:
        raise TrainingError("no batches given; nothing to optimize")
    root = terms[0]
    for t in terms[1:]:
        root = root + t
    return LossBreakdown(l_t=l_t, l_clm_src=l_src, l_clm_tgt=l_tgt, loss=root)


class Adam:
    """Bias-corrected Adam over named parameters. Frozen parameters are
    simply not handed to the optimizer; parameters whose grad is absent in a
    step are skipped (their moments and step counts do not advance)."""

    def __init__(self, named_params, config: OptimizerConfig):
        self.config = config
        self.params = list(named_params)
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = {name: 0 for name, _ in self.params}

    def zero_grad(self):
        zero_grads(p for _, p in self.params)

    def step(self):
        c = self.config
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}; aborting step")
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            m_hat = self.m[name] / (1 - c.beta1 ** t)
            v_hat = self.v[name] / (1 - c.beta2 ** t)
            p.data -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = [p.grad for _, p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def train_step(model, parallel_batch, src_mono_batch, tgt_mono_batch,
               optimizer: Adam, train_config: TrainConfig | None = None) -> LossBreakdown:
    """One optimizer step: forward all active tasks, backward the summed
    loss, update every non-frozen parameter."""
    zero_grads(model.parameters())
    clm_weight = train_config.clm_loss_weight if train_config else 1.0
    bd = compute_losses(model, parallel_batch, src_mono_batch, tgt_mono_batch, clm_weight)
    backward(bd.loss)
    if train_config and train_config.clip_norm is not None:
        clip_gradients(optimizer.params, train_config.clip_norm)
    optimizer.step()
    return bd


# ---------------------------------------------------------------------------
# corpora plumbing for the loop


@dataclass
class TrainData:
    vocabulary: Vocabulary
    parallel: ParallelCorpus
    monolingual: dict = field(default_factory=dict)  # language -> MonolingualCorpus


class _CyclingBatches:
    """Reshuffling batch iterator; order is a pure function of
    (seed, role, cycle) so a cursor fully captures its state."""

    def __init__(self, examples, batch_size, vocab, max_len, seed, role):
        self.examples = examples
        self.batch_size = batch_size
        self.vocab = vocab
        self.max_len = max_len
        self.seed = seed
        self.role = role
        self.cycle = 0
        self.pos = 0
        self._batches = self._generate()

    def _generate(self):
        return make_batches(self.examples, self.batch_size, self.vocab, self.max_len,
                            seed=[self.seed, self.role, self.cycle])

    def next(self):
        if self.pos >= len(self._batches):
            self.cycle += 1
            self.pos = 0
            self._batches = self._generate()
        batch = self._batches[self.pos]
        self.pos += 1
        return batch

    @property
    def cursor(self):
        return {"cycle": self.cycle, "pos": self.pos}

    def seek(self, cursor):
        self.cycle = int(cursor["cycle"])
        self.pos = int(cursor["pos"])
        self._batches = self._generate()


_ROLE_TRANSLATION, _ROLE_SRC_MONO, _ROLE_TGT_MONO, _ROLE_VALID = 0, 1, 2, 99


def validation_loss(model, data: TrainData, config: TrainConfig):
    """Teacher-forced translation loss over the validation split, eval mode.
    Returns None when the corpus has no validation examples."""
    split = data.parallel.splits.get("validation") or []
    if not split:
        return None
    batches = make_batches(split, config.batch_size, data.vocabulary, config.max_len,
                           seed=[config.seed, _ROLE_VALID])
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            losses = [compute_losses(model, b).l_t for b in batches]
    finally:
        if was_training:
            model.train()
    return float(np.mean(losses))


def token_accuracy(model, batches) -> float:
    """Teacher-forced next-token accuracy over non-PAD label positions."""
    correct = total = 0
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for b in batches:
                pred = translation_forward(model, b).data.argmax(axis=-1)
                mask = b.tgt_labels != b.pad_id
                correct += int((pred[mask] == b.tgt_labels[mask]).sum())
                total += int(mask.sum())
    finally:
        if was_training:
            model.train()
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# checkpoints


# runtime controls that a resumed run may legitimately change
_NON_IDENTITY_FIELDS = {"steps", "epochs", "log_interval", "checkpoint_interval"}


def config_fingerprint(*configs) -> str:
    payload = []
    for c in configs:
        if dataclasses.is_dataclass(c):
            d = dataclasses.asdict(c)
            if isinstance(c, TrainConfig):
                d = {k: v for k, v in d.items() if k not in _NON_IDENTITY_FIELDS}
            payload.append(d)
        else:
            payload.append(c)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class Checkpoint:
    version: int
    fingerprint: str
    step: int
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: dict
    cursors: dict
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model, optimizer: Adam, fingerprint: str, step: int,
                    cursors: dict, meta: dict | None = None) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param:{name}"] = p.data
    for name, _ in optimizer.params:
        arrays[f"adam_m:{name}"] = optimizer.m[name]
        arrays[f"adam_v:{name}"] = optimizer.v[name]
    header = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint,
        "step": step,
        "cursors": cursors,
        "adam_t": optimizer.t,
        "meta": meta or {},
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
        header = json.loads(bytes(archive["__header__"]).decode())
    except Exception as e:
        raise TrainingError(f"corrupt or unreadable checkpoint {path}: {e}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(f"checkpoint version {header.get('version')} unsupported")
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise TrainingError(
            "checkpoint fingerprint mismatch: the stored configuration differs from the current one")
    params, adam_m, adam_v = {}, {}, {}
    for key in archive.files:
        if key.startswith("param:"):
            params[key[len("param:"):]] = archive[key]
        elif key.startswith("adam_m:"):
            adam_m[key[len("adam_m:"):]] = archive[key]
        elif key.startswith("adam_v:"):
            adam_v[key[len("adam_v:"):]] = archive[key]
    return Checkpoint(version=header["version"], fingerprint=header["fingerprint"],
                      step=header["step"], params=params, adam_m=adam_m, adam_v=adam_v,
                      adam_t=header["adam_t"], cursors=header["cursors"], meta=header["meta"])


def restore_checkpoint(model, optimizer: Adam | None, ckpt: Checkpoint) -> None:
    """Load parameters (and, when an optimizer is given, its moments) in place."""
    model_params = model.param_dict()
    if set(model_params) != set(ckpt.params):
        raise TrainingError("checkpoint parameter names do not match the model")
    for name, arr in ckpt.params.items():
        if model_params[name].data.shape != arr.shape:
            raise TrainingError(f"checkpoint shape mismatch for {name}")
        model_params[name].data[...] = arr
    if optimizer is None:
        return
    for name, _ in optimizer.params:
        optimizer.m[name] = ckpt.adam_m[name].copy()
        optimizer.v[name] = ckpt.adam_v[name].copy()
        optimizer.t[name] = int(ckpt.adam_t[name])


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: object
    log_lines: list
    steps_run: int
    final_loss: LossBreakdown | None


def _format_log_line(step, bd: LossBreakdown, val) -> str:
    val_field = "" if val is None else repr(val)
    return "\t".join([str(step), repr(bd.l_t), repr(bd.l_clm_src), repr(bd.l_clm_tgt),
                      repr(bd.l_mtl), val_field])


def train_loop(model, data: TrainData, train_config: TrainConfig,
               optimizer_config: OptimizerConfig, freeze_spec: FreezeSpec | None = None,
               log_path=None, checkpoint_path=None, resume_from=None) -> TrainResult:
    """Run the configured number of steps (or epochs over the translation
    split). In the multitask regime every joint step consumes one parallel
    batch plus one monolingual batch per side; monolingual iterators cycle
    with a reshuffle when exhausted. Metric lines are
    step, l_t, l_clm_src, l_clm_tgt, l_mtl, validation-loss, tab separated.
    """
    freeze_spec = freeze_spec or FreezeSpec.none()
    trainable = apply_freeze(model, freeze_spec)
    optimizer = Adam(trainable, optimizer_config)
    # the frozen set shapes the optimizer state, so it is part of the identity
    fingerprint = config_fingerprint(model.config, train_config, optimizer_config,
                                     {"frozen": sorted(freeze_spec.frozen)})

    mtl = model.multitask
    langs = (data.parallel.source_language, data.parallel.target_language)
    if mtl:
        missing = [l for l in langs if l not in data.monolingual]
        if missing:
            raise TrainingError(f"multitask training needs monolingual corpora for {missing}")
        src_iter = _CyclingBatches(data.monolingual[langs[0]].split("train"),
                                   train_config.effective_clm_batch_size, data.vocabulary,
                                   train_config.max_len, train_config.seed, _ROLE_SRC_MONO)
        tgt_iter = _CyclingBatches(data.monolingual[langs[1]].split("train"),
                                   train_config.effective_clm_batch_size, data.vocabulary,
                                   train_config.max_len, train_config.seed, _ROLE_TGT_MONO)
    else:
        src_iter = tgt_iter = None

    trans_iter = _CyclingBatches(data.parallel.split("train"), train_config.batch_size,
                                 data.vocabulary, train_config.max_len,
                                 train_config.seed, _ROLE_TRANSLATION)
    batches_per_epoch = len(trans_iter._batches)
    total_steps = (train_config.steps if train_config.steps is not None
                   else train_config.epochs * batches_per_epoch)

    step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_fingerprint=fingerprint)
        restore_checkpoint(model, optimizer, ckpt)
        step = ckpt.step
        trans_iter.seek(ckpt.cursors["translation"])
        if mtl:
            src_iter.seek(ckpt.cursors["src_mono"])
            tgt_iter.seek(ckpt.cursors["tgt_mono"])

    def cursors():
        c = {"translation": trans_iter.cursor}
        if mtl:
            c["src_mono"] = src_iter.cursor
            c["tgt_mono"] = tgt_iter.cursor
        return c

    model.train()
    log_lines = []
    last_bd = None
    while step < total_steps:
        clm_turn = mtl and train_config.mixing == "round_robin" and step % 2 == 1
        pb = None if clm_turn else trans_iter.next()
        if mtl and (train_config.mixing == "joint" or clm_turn):
            sb, tb = src_iter.next(), tgt_iter.next()
        else:
            sb = tb = None
        last_bd = train_step(model, pb, sb, tb, optimizer, train_config)
        step += 1
        if step % train_config.log_interval == 0 or step == total_steps:
            val = validation_loss(model, data, train_config)
            line = _format_log_line(step, last_bd, val)
            log_lines.append(line)
            logger.info("step %d: %s", step, line)
        if (checkpoint_path is not None and train_config.checkpoint_interval is not None
                and step % train_config.checkpoint_interval == 0):
            save_checkpoint(checkpoint_path, model, optimizer, fingerprint, step, cursors())

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer, fingerprint, step, cursors())
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as f:
            for line in log_lines:
                f.write(line + "\n")
    return TrainResult(model=model, log_lines=log_lines, steps_run=step, final_loss=last_bd)
