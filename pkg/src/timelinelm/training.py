"""Example packing, the AdamW optimizer with linear warmup, the training
loop, and the binary checkpoint container."""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .network import ModelConfig, init_params, loss_and_grads, loss as forward_loss
from .vocab import IGNORE_LABEL, EncodedNote, Vocabulary

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"TLMCKPT1"
CKPT_VERSION = 1


class TrainingDiverged(Exception):
    pass


@dataclass
class TrainingExample:
    input_ids: np.ndarray  # int64 (max_seq_len,)
    label_ids: np.ndarray  # int64 (max_seq_len,); IGNORE_LABEL where unsupervised


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3  # full-scale runs in the source setup use 1e-5
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    warmup_ratio: float = 0.1
    grad_accum: int = 2
    epochs: int = 1
    batch_size: int = 8

    def validate(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in (0,1)")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must lie in [0,1]")
        if self.grad_accum < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("grad_accum, batch_size and epochs must be >= 1")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab_hash: str
    params: dict[str, np.ndarray]
    opt_state: dict | None = None
    step: int = 0
    loss_history: list[float] = field(default_factory=list)


def pack_examples(notes: list[EncodedNote], max_seq_len: int, vocab: Vocabulary,
                  full_lm: bool = False) -> list[TrainingExample]:
    """Prefix each note with <s>, concatenate, and split into fixed windows.

    Labels supervise only concept tokens (position j is labelled with token
    j+1 iff that token is a concept code); ``full_lm=True`` switches to the
    standard objective where every non-pad successor is a target. The final
    partial window is padded with <pad>, which is never a label.
    """
    if not notes:
        raise DataError("cannot pack zero notes")
    stream: list[int] = []
    is_concept: list[bool] = []
    for note in notes:
        stream.append(vocab.bos_id)
        is_concept.append(False)
        concept_positions = set(note.concept_positions)
        for pos, idx in enumerate(note.token_ids):
            stream.append(idx)
            is_concept.append(pos in concept_positions)
    examples = []
    pad = vocab.pad_id
    for start in range(0, len(stream), max_seq_len):
        window = stream[start:start + max_seq_len]
        flags = is_concept[start:start + max_seq_len]
        n_pad = max_seq_len - len(window)
        input_ids = np.array(window + [pad] * n_pad, dtype=np.int64)
        labels = np.full(max_seq_len, IGNORE_LABEL, dtype=np.int64)
        for j in range(len(window) - 1):
            supervised = flags[j + 1] if not full_lm else window[j + 1] != pad
            if supervised:
                labels[j] = window[j + 1]
        examples.append(TrainingExample(input_ids=input_ids, label_ids=labels))
    return examples


def lr_at(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to the peak rate, then constant. Steps are 1-based."""
    warmup = round(cfg.warmup_ratio * total_steps)
    if warmup <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, step / warmup)


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + 1e-8)
            if c.weight_decay:
                update = update + c.weight_decay * p
            p -= lr * update

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def _stack(examples: list[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([e.input_ids for e in examples]),
            np.stack([e.label_ids for e in examples]))


def evaluate_loss(params, cfg: ModelConfig, examples: list[TrainingExample],
                  batch_size: int = 8) -> float:
    """Supervised-position-weighted mean loss over a fixed example list."""
    total, n = 0.0, 0
    for start in range(0, len(examples), batch_size):
        ids, labels = _stack(examples[start:start + batch_size])
        k = int((labels != IGNORE_LABEL).sum())
        if k == 0:
            continue
        total += forward_loss(params, cfg, ids, labels) * k
        n += k
    return total / n if n else 0.0


def train(examples: list[TrainingExample], model_cfg: ModelConfig,
          opt_cfg: OptimizerConfig, tok_emb: np.ndarray, vocab_hash: str,
          eval_examples: list[TrainingExample] | None = None,
          keep_optimizer_state: bool = False,
          initial_params: dict[str, np.ndarray] | None = None) -> Checkpoint:
    """Deterministic single-threaded training run.

    ``initial_params`` continues from existing weights (second-stage
    fine-tuning) instead of initialising fresh ones. When an eval set is
    given, the parameters from the epoch with the lowest held-out loss are
    the ones returned (a light early-stopping policy for desk-scale runs).
    """
    if not examples:
        raise DataError("no training examples")
    opt_cfg.validate()
    if initial_params is not None:
        model_cfg.validate()
        params = {k: v.copy() for k, v in initial_params.items()}
    else:
        params = init_params(model_cfg, tok_emb)
    optimizer = AdamW(params, opt_cfg)
    micro_per_epoch = math.ceil(len(examples) / opt_cfg.batch_size)
    steps_per_epoch = math.ceil(micro_per_epoch / opt_cfg.grad_accum)
    total_steps = opt_cfg.epochs * steps_per_epoch
    dropout_rng = np.random.default_rng(model_cfg.seed + 1) if model_cfg.dropout > 0 else None

    history: list[float] = []
    initial_loss: float | None = None
    divergent_run = 0
    step = 0
    best: tuple[float, dict[str, np.ndarray]] | None = None
    for epoch in range(opt_cfg.epochs):
        order = np.random.default_rng(model_cfg.seed + 1000 + epoch).permutation(len(examples))
        micro_batches = [
            [examples[i] for i in order[s:s + opt_cfg.batch_size]]
            for s in range(0, len(examples), opt_cfg.batch_size)
        ]
        for group_start in range(0, len(micro_batches), opt_cfg.grad_accum):
            group = micro_batches[group_start:group_start + opt_cfg.grad_accum]
            step += 1
            accum = None
            group_loss = 0.0
            for batch in group:
                ids, labels = _stack(batch)
                value, grads = loss_and_grads(params, model_cfg, ids, labels, dropout_rng)
                group_loss += value
                if accum is None:
                    accum = grads
                else:
                    for k in accum:
                        accum[k] += grads[k]
            for k in accum:
                accum[k] /= len(group)
            group_loss /= len(group)
            lr = lr_at(step, total_steps, opt_cfg)
            optimizer.step(params, accum, lr)
            history.append(group_loss)
            if initial_loss is None:
                initial_loss = group_loss
            if not math.isfinite(group_loss) or (initial_loss > 0
                                                 and group_loss > 10.0 * initial_loss):
                divergent_run += 1
                if divergent_run >= 100:
                    raise TrainingDiverged(
                        f"loss {group_loss:.4f} above 10x initial {initial_loss:.4f} "
                        f"for {divergent_run} consecutive steps (step {step})"
                    )
            else:
                divergent_run = 0
            if step % 50 == 0 or step == total_steps:
                logger.info("step %d/%d lr %.2e loss %.4f", step, total_steps, lr, group_loss)
        if eval_examples is not None:
            held_out = evaluate_loss(params, model_cfg, eval_examples, opt_cfg.batch_size)
            logger.info("epoch %d held-out loss %.4f", epoch + 1, held_out)
            if best is None or held_out < best[0]:
                best = (held_out, {k: v.copy() for k, v in params.items()})
    if best is not None:
        params = best[1]
    return Checkpoint(
        config=model_cfg,
        vocab_hash=vocab_hash,
        params=params,
        opt_state=optimizer.state() if keep_optimizer_state else None,
        step=step,
        loss_history=history,
    )


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON header, raw little-endian blobs
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = []
    blobs = []
    offset = 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=np.float64).astype("<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    for name in sorted(ckpt.params):
        add(f"p/{name}", ckpt.params[name])
    opt_meta = None
    if ckpt.opt_state is not None:
        opt_meta = {"t": ckpt.opt_state["t"]}
        for kind in ("m", "v"):
            for name in sorted(ckpt.opt_state[kind]):
                add(f"{kind}/{name}", ckpt.opt_state[kind][name])
    header = {
        "config": asdict(ckpt.config),
        "vocab_hash": ckpt.vocab_hash,
        "step": ckpt.step,
        "ignore_label_id": IGNORE_LABEL,
        "loss_history": ckpt.loss_history,
        "optimizer": opt_meta,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    body = raw[20 + header_len:]

    def read(entry) -> np.ndarray:
        arr = np.frombuffer(body, dtype="<f8", count=entry["nbytes"] // 8,
                            offset=entry["offset"])
        return arr.reshape(entry["shape"]).copy()

    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        kind, name = entry["name"].split("/", 1)
        if kind == "p":
            params[name] = read(entry)
        elif kind == "m":
            opt_m[name] = read(entry)
        elif kind == "v":
            opt_v[name] = read(entry)
    opt_state = None
    if header.get("optimizer"):
        opt_state = {"t": header["optimizer"]["t"], "m": opt_m, "v": opt_v}
    return Checkpoint(
        config=ModelConfig(**header["config"]),
        vocab_hash=header["vocab_hash"],
        params=params,
        opt_state=opt_state,
        step=header["step"],
        loss_history=list(header["loss_history"]),
    )
