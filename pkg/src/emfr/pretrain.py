"""Masked-language-model pretraining: dynamic masking, cross-entropy loss,
Adam with linear warmup, and a resumable deterministic training loop.

Determinism contract: the per-step rng is derived from (seed, step), so a run
resumed from any checkpoint reproduces the uninterrupted loss log bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import bpe, kvconfig
from .encoder import EncoderModel, backward, forward, load_blobs, load_checkpoint, \
    save_blobs, save_checkpoint


class PretrainError(ValueError):
    pass


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient turns non-finite; the step is aborted."""


@dataclass(frozen=True)
class MaskingPolicy:
    """Select select_prob of the eligible tokens; of those, mask_frac get the
    mask token, keep_frac stay unchanged, random_frac become a random
    non-special token. Special tokens are never selected."""

    select_prob: float = 0.15
    mask_frac: float = 0.80
    keep_frac: float = 0.10
    random_frac: float = 0.10

    def __post_init__(self) -> None:
        for name in ("select_prob", "mask_frac", "keep_frac", "random_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise PretrainError(f"{name} must be in [0, 1]")
        if abs(self.mask_frac + self.keep_frac + self.random_frac - 1.0) > 1e-9:
            raise PretrainError("mask_frac + keep_frac + random_frac must equal 1")


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float = 0.0003
    warmup_steps: int = 10_000
    total_steps: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-6
    weight_decay: float = 0.0
    batch_sequences: int = 32
    max_seq_len: int = bpe.MAX_SEQUENCE_LENGTH
    schedule: str = "linear"  # or "constant"

    def __post_init__(self) -> None:
        if self.schedule not in ("linear", "constant"):
            raise PretrainError("schedule must be 'linear' or 'constant'")
        if self.schedule == "linear" and self.total_steps <= self.warmup_steps:
            raise PretrainError("total_steps must exceed warmup_steps")
        if self.weight_decay < 0 or self.epsilon <= 0:
            raise PretrainError("weight_decay must be >= 0 and epsilon > 0")


@dataclass
class TrainState:
    step: int
    seed: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    running_loss: float = 0.0
    empty_mask_warnings: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], seed: int) -> "TrainState":
        return cls(step=0, seed=seed,
                   m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()})


def lr_schedule(step: int, cfg: OptimizerConfig) -> float:
    """Linear 0 -> peak over warmup_steps, then linear decay to 0 at
    total_steps (or flat peak with the constant schedule)."""
    if step < 0:
        raise PretrainError("step must be >= 0")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.peak_lr * (step / cfg.warmup_steps)
    if cfg.schedule == "constant":
        return cfg.peak_lr
    remaining = (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * max(0.0, remaining)


def rng_for_step(seed: int, step: int) -> np.random.Generator:
    # Deriving from (seed, step) makes resumption trivially bit-exact.
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(step,)))


def mask_batch(batch: np.ndarray, policy: MaskingPolicy,
               rng: np.random.Generator, vocab_size: int,
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dynamic masking of one batch (re-drawn every step).

    Returns (corrupted ids, target ids, loss mask); the loss mask marks
    exactly the selected positions. Random replacements draw uniformly over
    the non-special ids. The rng stream has a fixed length per call, so a
    step's corruption depends only on its rng.
    """
    if vocab_size <= bpe.N_SPECIALS:
        raise PretrainError("vocab_size leaves no non-special tokens")
    batch = np.asarray(batch)
    targets = batch.copy()
    corrupted = batch.copy()
    eligible = batch >= bpe.N_SPECIALS
    selected = eligible & (rng.random(batch.shape) < policy.select_prob)
    action = rng.random(batch.shape)
    draws = rng.integers(bpe.N_SPECIALS, vocab_size, size=batch.shape)
    mask_sel = selected & (action < policy.mask_frac)
    random_sel = selected & (action >= policy.mask_frac + policy.keep_frac)
    corrupted[mask_sel] = bpe.MASK_ID
    corrupted[random_sel] = draws[random_sel]
    return corrupted, targets, selected


def make_masker(vocab_size: int):
    """Bind mask_batch to a model's vocabulary size."""

    def apply(batch: np.ndarray, policy: MaskingPolicy,
              rng: np.random.Generator):
        return mask_batch(batch, policy, rng, vocab_size)

    return apply


def mlm_loss(logits: np.ndarray, targets: np.ndarray,
             loss_mask: np.ndarray) -> float:
    """Mean cross-entropy over masked positions; 0 when the mask is empty."""
    loss, _ = mlm_loss_and_grad(logits, targets, loss_mask, want_grad=False)
    return loss


def mlm_loss_and_grad(logits: np.ndarray, targets: np.ndarray,
                      loss_mask: np.ndarray, want_grad: bool = True,
                      ) -> tuple[float, np.ndarray | None]:
    logits = np.asarray(logits)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    n_masked = int(loss_mask.sum())
    if n_masked == 0:
        warnings.warn("mlm_loss called with an empty loss mask", stacklevel=2)
        return 0.0, (np.zeros_like(logits) if want_grad else None)
    rows = logits[loss_mask]                       # (M, V)
    gold = np.asarray(targets)[loss_mask]          # (M,)
    shifted = rows - rows.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    gold_score = shifted[np.arange(n_masked), gold]
    loss = float((logz - gold_score).mean())
    if not want_grad:
        return loss, None
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(n_masked), gold] -= 1.0
    d_logits = np.zeros_like(logits)
    d_logits[loss_mask] = probs / n_masked
    return loss, d_logits


def adam_step(state: TrainState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], cfg: OptimizerConfig) -> float:
    """One bias-corrected Adam update in place (decoupled weight decay).
    Returns the learning rate used. Non-finite gradients abort the step."""
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name!r} "
                                         f"at step {state.step}")
    lr = lr_schedule(state.step, cfg)
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, param in params.items():
        grad = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        if cfg.weight_decay > 0.0:
            update = update + cfg.weight_decay * param
        param -= lr * update
    state.step = t
    return lr


# ---------------------------------------------------------------------------
# corpus packing and the training loop

def pack_blocks(token_seqs: Iterable[list[int]], block_len: int) -> np.ndarray:
    """Concatenate framed sequences and chunk into fixed-length blocks.
    The trailing partial block is dropped."""
    stream: list[int] = []
    for seq in token_seqs:
        stream.extend(seq)
    n_blocks = len(stream) // block_len
    if n_blocks == 0:
        raise PretrainError(f"corpus too small for even one block of "
                            f"{block_len} tokens")
    arr = np.asarray(stream[:n_blocks * block_len], dtype=np.int64)
    return arr.reshape(n_blocks, block_len)


@dataclass
class PretrainResult:
    model: EncoderModel
    state: TrainState
    log_rows: list[tuple[int, float, float]] = field(default_factory=list)


def _format_log_row(step: int, lr: float, loss: float) -> str:
    return f"{step}\t{lr:.10g}\t{loss:.10g}"


def save_train_state(state: TrainState, directory: Path) -> None:
    save_blobs(state.m, directory / "adam_m.bin", directory / "adam_m.tsv")
    save_blobs(state.v, directory / "adam_v.bin", directory / "adam_v.tsv")
    kvconfig.write_kv({
        "step": state.step,
        "seed": state.seed,
        "running_loss": repr(state.running_loss),
        "empty_mask_warnings": state.empty_mask_warnings,
    }, directory / "state")


def load_train_state(directory: Path) -> TrainState:
    mapping = kvconfig.read_kv(directory / "state")
    return TrainState(
        step=kvconfig.get_int(mapping, "step"),
        seed=kvconfig.get_int(mapping, "seed"),
        m=load_blobs(directory / "adam_m.bin", directory / "adam_m.tsv"),
        v=load_blobs(directory / "adam_v.bin", directory / "adam_v.tsv"),
        running_loss=kvconfig.get_float(mapping, "running_loss", 0.0),
        empty_mask_warnings=kvconfig.get_int(mapping, "empty_mask_warnings", 0),
    )


def save_pretrain_checkpoint(model: EncoderModel, state: TrainState,
                             directory: str | Path) -> None:
    directory = Path(directory)
    save_checkpoint(model, directory)
    save_train_state(state, directory)


def load_pretrain_checkpoint(directory: str | Path,
                             ) -> tuple[EncoderModel, TrainState]:
    directory = Path(directory)
    return load_checkpoint(directory), load_train_state(directory)


def pretrain(blocks: np.ndarray, model: EncoderModel, cfg: OptimizerConfig,
             policy: MaskingPolicy, seed: int,
             out_dir: str | Path | None = None,
             checkpoint_every: int = 0,
             state: TrainState | None = None,
             stop_at_step: int | None = None) -> PretrainResult:
    """Run MLM training steps state.step .. total_steps.

    Per step: sample a batch of blocks, re-draw the dynamic masking, forward,
    cross-entropy over the masked positions, backward, Adam. Writes periodic
    checkpoints and a step/lr/loss log when out_dir is given. Passing the
    state loaded from a checkpoint resumes bit-exactly; stop_at_step pauses
    a run early without touching the schedule.
    """
    if blocks.ndim != 2:
        raise PretrainError("blocks must be a 2-D id array")
    if len(blocks) < cfg.batch_sequences:
        raise PretrainError(f"corpus has {len(blocks)} blocks, fewer than one "
                            f"batch of {cfg.batch_sequences}")
    if blocks.shape[1] > cfg.max_seq_len:
        raise PretrainError("block length exceeds max_seq_len")
    if state is None:
        state = TrainState.fresh(model.params, seed)
    masker = make_masker(model.config.vocab_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.tsv"
        fresh_log = not log_path.exists()
        log_file = open(log_path, "a", encoding="utf-8")
        if fresh_log:
            log_file.write("step\tlr\tloss\n")
    rows: list[tuple[int, float, float]] = []
    last_step = cfg.total_steps if stop_at_step is None \
        else min(stop_at_step, cfg.total_steps)

    try:
        while state.step < last_step:
            step = state.step
            rng = rng_for_step(state.seed, step)
            batch_idx = rng.integers(0, len(blocks), size=cfg.batch_sequences)
            batch = blocks[batch_idx]
            corrupted, targets, loss_mask = masker(batch, policy, rng)
            _, logits, cache = forward(model, corrupted, train=True, rng=rng)
            loss, d_logits = mlm_loss_and_grad(logits, targets, loss_mask)
            if int(loss_mask.sum()) == 0:
                state.empty_mask_warnings += 1
            grads = backward(model, cache, d_logits=d_logits)
            lr = adam_step(state, model.params, grads, cfg)
            state.running_loss = (loss if step == 0
                                  else 0.98 * state.running_loss + 0.02 * loss)
            rows.append((step, lr, loss))
            if log_file is not None:
                log_file.write(_format_log_row(step, lr, loss) + "\n")
                log_file.flush()
            if out_dir is not None and checkpoint_every \
                    and state.step % checkpoint_every == 0 \
                    and state.step < cfg.total_steps:
                save_pretrain_checkpoint(model, state,
                                         out_dir / f"step{state.step:08d}")
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_pretrain_checkpoint(model, state, out_dir / "final")
    return PretrainResult(model=model, state=state, log_rows=rows)


def masked_accuracy(model: EncoderModel, blocks: np.ndarray,
                    policy: MaskingPolicy, seed: int,
                    n_batches: int = 8, batch_sequences: int = 32) -> float:
    """Fraction of dynamically masked positions whose argmax prediction
    recovers the original token."""
    masker = make_masker(model.config.vocab_size)
    correct = 0
    total = 0
    for b in range(n_batches):
        rng = rng_for_step(seed, 10**9 + b)
        batch_idx = rng.integers(0, len(blocks), size=batch_sequences)
        batch = blocks[batch_idx]
        corrupted, targets, loss_mask = masker(batch, policy, rng)
        _, logits, _ = forward(model, corrupted, train=False)
        preds = logits.argmax(axis=-1)
        correct += int((preds[loss_mask] == targets[loss_mask]).sum())
        total += int(loss_mask.sum())
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# config file plumbing

def optimizer_config_from_mapping(mapping: dict[str, str]) -> OptimizerConfig:
    defaults = OptimizerConfig()
    kwargs = {}
    for f in fields(OptimizerConfig):
        default = getattr(defaults, f.name)
        if isinstance(default, int):
            kwargs[f.name] = kvconfig.get_int(mapping, f.name, default)
        elif isinstance(default, float):
            kwargs[f.name] = kvconfig.get_float(mapping, f.name, default)
        else:
            kwargs[f.name] = kvconfig.get_str(mapping, f.name, default)
    return OptimizerConfig(**kwargs)


def masking_policy_from_mapping(mapping: dict[str, str]) -> MaskingPolicy:
    defaults = MaskingPolicy()
    return MaskingPolicy(
        select_prob=kvconfig.get_float(mapping, "select_prob", defaults.select_prob),
        mask_frac=kvconfig.get_float(mapping, "mask_frac", defaults.mask_frac),
        keep_frac=kvconfig.get_float(mapping, "keep_frac", defaults.keep_frac),
        random_frac=kvconfig.get_float(mapping, "random_frac", defaults.random_frac),
    )
