"""Frozen mini-transformer encoder.

The encoder is pretrained once on masked-token prediction, then frozen for
good: prompt tuning trains only the rows prepended in front of the input
embeddings. Architecture: learned token + absolute position embeddings
(real-token positions only; prompt rows are position-free, so the encoder
treats them as a set), pre-LN residual blocks (multi-head attention, GELU
FFN of width 4e), a final layer norm, mean pooling over the non-prompt
positions, and a linear classifier head that stays at its seeded init
(pretraining never touches it).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DataError, StateError
from .util import sha256_hex, stable_seed

log = logging.getLogger("xprompt.backbone")

INIT_STD = 0.02
MASK_TOKEN = 0
FFN_MULT = 4
PRETRAIN_BATCH = 32


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 64
    num_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 8:
            raise ConfigError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.embed_dim < 1 or self.layers < 1 or self.max_seq_len < 2:
            raise ConfigError("embed_dim, layers, max_seq_len must be positive")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must divide into heads {self.heads}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")


def _weight_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, int]]:
    e = cfg.embed_dim
    f = FFN_MULT * e
    shapes = {
        "tok_emb": (cfg.vocab_size, e),
        "pos_emb": (cfg.max_seq_len, e),
        "head": (e, cfg.num_classes),
    }
    for i in range(cfg.layers):
        shapes |= {
            f"l{i}.ln1_g": (1, e), f"l{i}.ln1_b": (1, e),
            f"l{i}.wq": (e, e), f"l{i}.wk": (e, e),
            f"l{i}.wv": (e, e), f"l{i}.wo": (e, e),
            f"l{i}.ln2_g": (1, e), f"l{i}.ln2_b": (1, e),
            f"l{i}.w1": (e, f), f"l{i}.b1": (1, f),
            f"l{i}.w2": (f, e), f"l{i}.b2": (1, e),
        }
    return shapes


def _is_normal_drawn(name: str) -> bool:
    """Layer-norm gains start at 1 and all biases at 0; the rest are N(0, 0.02^2)."""
    short = name.split(".")[-1]
    return not (short.endswith("_g") or short.endswith("_b") or short in ("b1", "b2"))


@dataclass
class FrozenBackbone:
    cfg: BackboneConfig
    weights: dict[str, np.ndarray]
    frozen: bool = False
    pretrain_losses: list[float] = field(default_factory=list)

    def weight_hash(self) -> str:
        h = []
        for name in sorted(self.weights):
            h.append(name.encode())
            h.append(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return sha256_hex(b"".join(h))

    def freeze(self) -> None:
        for arr in self.weights.values():
            arr.flags.writeable = False
        self.frozen = True


def init_backbone(cfg: BackboneConfig) -> FrozenBackbone:
    """Seeded init; draw order is the sorted weight-name order, so identical
    configs give bitwise-identical weights."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    weights = {}
    for name, shape in sorted(_weight_shapes(cfg).items()):
        if _is_normal_drawn(name):
            weights[name] = rng.normal(0.0, INIT_STD, size=shape)
        elif name.split(".")[-1].endswith("_g"):
            weights[name] = np.ones(shape)
        else:
            weights[name] = np.zeros(shape)
    return FrozenBackbone(cfg, weights)


# --- forward ------------------------------------------------------------------


def _wrap_weights(bb: FrozenBackbone, trainable: bool) -> dict[str, ag.Node]:
    make = ag.leaf if trainable else ag.constant
    return {name: make(arr) for name, arr in bb.weights.items()}


def _encode(cfg: BackboneConfig, w: dict[str, ag.Node], rows: ag.Node,
            bounds: list[tuple[int, int]], prompt_lens: list[int] | None = None) -> ag.Node:
    """Position add + post-norm residual blocks over packed rows.

    bounds lists the (start, stop) row block of each sequence; attention is
    block-diagonal, every other op is position-wise, so any number of
    sequences share one graph. Prompt rows receive no positional embedding:
    they behave as a set, and real tokens count positions from 0 exactly as
    during pretraining. Normalization comes after each residual sum (post-LN)
    so that scaling an input row stays visible to attention; a pre-LN block
    would normalize row scalings away and leave mask variables with no
    first-order effect in shallow stacks.
    """
    if prompt_lens is None:
        prompt_lens = [0] * len(bounds)
    pos_ids: list[int] = []
    live: list[float] = []
    for (a, b), m in zip(bounds, prompt_lens):
        pos_ids += [0] * m + list(range(b - a - m))
        live += [0.0] * m + [1.0] * (b - a - m)
    pos = ag.embedding_lookup(w["pos_emb"], pos_ids)
    if any(prompt_lens):
        pos = ag.rowwise_scale(pos, ag.constant(np.array(live)[:, None]))
    h = ag.add(rows, pos)
    for i in range(cfg.layers):
        att = ag.attention_blocks(
            ag.matmul(h, w[f"l{i}.wq"]),
            ag.matmul(h, w[f"l{i}.wk"]),
            ag.matmul(h, w[f"l{i}.wv"]),
            cfg.heads,
            bounds,
        )
        h = ag.layer_norm(ag.add(h, ag.matmul(att, w[f"l{i}.wo"])),
                          w[f"l{i}.ln1_g"], w[f"l{i}.ln1_b"])
        f = ag.bias_add(ag.matmul(h, w[f"l{i}.w1"]), w[f"l{i}.b1"])
        f = ag.bias_add(ag.matmul(ag.gelu(f), w[f"l{i}.w2"]), w[f"l{i}.b2"])
        h = ag.layer_norm(ag.add(h, f), w[f"l{i}.ln2_g"], w[f"l{i}.ln2_b"])
    return h


def _check_ids(cfg: BackboneConfig, input_ids, prompt_rows_count: int) -> list[int]:
    ids = [int(t) for t in input_ids]
    if not ids:
        raise DataError("empty input sequence")
    total = prompt_rows_count + len(ids)
    if total > cfg.max_seq_len:
        raise DataError(
            f"sequence length {prompt_rows_count}+{len(ids)}={total} exceeds "
            f"max_seq_len {cfg.max_seq_len}")
    for t in ids:
        if t < 0 or t >= cfg.vocab_size:
            raise DataError(f"token id {t} out of range for vocab {cfg.vocab_size}")
    return ids


def forward_batch(bb: FrozenBackbone, prompt_rows: ag.Node | None, sequences,
                  weight_nodes: dict[str, ag.Node] | None = None) -> ag.Node:
    """Logits (B, C) for sequences, each with prompt rows prepended.

    The batch is packed into one graph: the prompt node is concatenated
    before every sequence, attention is restricted to per-sequence blocks,
    and each row of the output pools that sequence's non-prompt positions.
    Gradients flow into prompt_rows; frozen weights are graph constants
    (pass weight_nodes to share the wrappers across calls).
    """
    if not bb.frozen:
        raise StateError("backbone must be frozen before prompted forward passes")
    cfg = bb.cfg
    if prompt_rows is not None and prompt_rows.cols != cfg.embed_dim:
        raise ConfigError(
            f"prompt width {prompt_rows.cols} != backbone embed_dim {cfg.embed_dim}")
    if not sequences:
        raise DataError("forward_batch needs at least one sequence")
    m = 0 if prompt_rows is None else prompt_rows.rows

    w = weight_nodes if weight_nodes is not None else _wrap_weights(bb, trainable=False)
    parts: list[ag.Node] = []
    bounds: list[tuple[int, int]] = []
    offset = 0
    for seq in sequences:
        ids = _check_ids(cfg, seq, m)
        if m > 0:
            parts.append(prompt_rows)
        parts.append(ag.embedding_lookup(w["tok_emb"], ids))
        bounds.append((offset, offset + m + len(ids)))
        offset += m + len(ids)

    h = _encode(cfg, w, ag.concat_rows(*parts), bounds, prompt_lens=[m] * len(bounds))
    pooled = ag.concat_rows(*[ag.mean_pool(h, a + m, b) for a, b in bounds])
    return ag.matmul(pooled, w["head"])


def forward_with_prompt(bb: FrozenBackbone, prompt_rows: ag.Node | None, input_ids,
                        weight_nodes: dict[str, ag.Node] | None = None) -> ag.Node:
    """Logits (1, C) for one sequence with prompt rows prepended.

    Mean pooling covers the non-prompt positions only, so prompt rows steer
    the pooled representation purely through attention.
    """
    return forward_batch(bb, prompt_rows, [input_ids], weight_nodes=weight_nodes)


def predict(bb: FrozenBackbone, prompt_values: np.ndarray | None, dataset) -> list[int]:
    """Argmax class per example (ties resolve to the lowest index)."""
    prompt = None if prompt_values is None else ag.constant(prompt_values)
    logits = forward_batch(bb, prompt, [ex.tokens for ex in dataset])
    return [int(np.argmax(row)) for row in logits.value]


# --- pretraining ----------------------------------------------------------------


def _mlm_loss(bb: FrozenBackbone, w: dict[str, ag.Node], batch, positions) -> ag.LossScalar:
    """Masked-token prediction: replace one position per sequence with the
    mask symbol and predict the original id through the tied embedding."""
    parts = []
    targets = []
    bounds = []
    offset = 0
    for seq, pos in zip(batch, positions):
        ids = list(seq)
        targets.append(ids[pos])
        ids[pos] = MASK_TOKEN
        parts.append(ag.embedding_lookup(w["tok_emb"], ids))
        bounds.append((offset, offset + len(ids)))
        offset += len(ids)
    h = _encode(bb.cfg, w, ag.concat_rows(*parts), bounds)
    picked = ag.concat_rows(*[ag.mean_pool(h, a + pos, a + pos + 1)
                              for (a, _), pos in zip(bounds, positions)])
    logits = ag.matmul(picked, ag.transpose(w["tok_emb"]))
    return ag.softmax_cross_entropy(logits, targets)


def pretrain(bb: FrozenBackbone, corpus, steps: int, lr: float) -> FrozenBackbone:
    """Train every weight except the classifier head, then freeze.

    The head has no gradient path under the tied-embedding objective and
    stays at its seeded init. Per-step losses land in bb.pretrain_losses.
    """
    if bb.frozen:
        raise StateError("backbone is already frozen")
    seqs = [tuple(int(t) for t in seq) for seq in corpus]
    if steps > 0 and not seqs:
        raise DataError("pretraining corpus is empty")
    for seq in seqs:
        _check_ids(bb.cfg, seq, 0)

    rng = np.random.default_rng(stable_seed(bb.cfg.seed, "pretrain"))
    # plain Adam over the weight dict; local to pretraining
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m1 = {k: np.zeros_like(v) for k, v in bb.weights.items()}
    m2 = {k: np.zeros_like(v) for k, v in bb.weights.items()}
    warmup = max(1, steps // 10)

    cursor = 0
    for step in range(1, steps + 1):
        if step <= warmup:
            lr_t = lr * step / warmup
        else:
            progress = (step - warmup) / max(1, steps - warmup)
            lr_t = lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * progress)))
        batch = []
        for _ in range(min(PRETRAIN_BATCH, len(seqs))):
            batch.append(seqs[cursor % len(seqs)])
            cursor += 1
        positions = [int(rng.integers(0, len(seq))) for seq in batch]

        w = _wrap_weights(bb, trainable=True)
        loss = _mlm_loss(bb, w, batch, positions)
        ag.backward(loss)
        bb.pretrain_losses.append(loss.value)

        sq = sum(float((w[n].grad * w[n].grad).sum())
                 for n in bb.weights if n != "head")
        clip = min(1.0, 1.0 / max(np.sqrt(sq), 1e-12))
        for name, arr in bb.weights.items():
            if name == "head":
                continue
            g = w[name].grad * clip
            m1[name] = beta1 * m1[name] + (1 - beta1) * g
            m2[name] = beta2 * m2[name] + (1 - beta2) * g * g
            mh = m1[name] / (1 - beta1 ** step)
            vh = m2[name] / (1 - beta2 ** step)
            arr -= lr_t * mh / (np.sqrt(vh) + eps)

    if steps >= 2 and bb.pretrain_losses[-1] >= bb.pretrain_losses[0]:
        log.warning("pretraining loss did not decrease (%.4f -> %.4f)",
                    bb.pretrain_losses[0], bb.pretrain_losses[-1])
    bb.freeze()
    return bb
