"""Toy decoder-only transformer with LoRA adapters on the query/value projections.

A prompt is ``[speech rows] ++ [instruction] ++ [BOS] ++ labels``; the loss is
next-token cross-entropy over the label positions plus the final EOS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import (
    Tensor,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    matmul,
    no_grad,
    softmax,
    take_rows,
)

# LoRA settings of the full-size runs.
FULL_SCALE_LORA_ALPHA = 32.0
FULL_SCALE_LORA_RANK = 8

_MASK_VALUE = -1e9


class ConfigurationError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass
class LMConfig:
    vocab_size: int = 640
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 96
    ff_mult: int = 4
    pad_id: int = 256
    bos_id: int = 257
    eos_id: int = 258
    instruction: tuple[int, ...] = ()

    def __post_init__(self):
        self.instruction = tuple(int(t) for t in self.instruction)
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")


@dataclass
class LoraConfig:
    r: int = FULL_SCALE_LORA_RANK
    alpha: float = FULL_SCALE_LORA_ALPHA
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.r <= 0:
            raise ConfigurationError("LoRA rank must be positive")


class LoraAdapter:
    """Trainable low-rank delta (alpha / r) * B @ A; B starts at zero."""

    def __init__(self, A: np.ndarray, B: np.ndarray, alpha: float):
        r = A.shape[0]
        if r <= 0 or B.shape[1] != r:
            raise ConfigurationError("LoRA rank must be positive and shared by A and B")
        self.A = Tensor(A, requires_grad=True)
        self.B = Tensor(B, requires_grad=True)
        self.alpha = float(alpha)
        self.r = r

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


def lora_linear(x: Tensor, W: Tensor, b: Tensor | None, adapter: LoraAdapter | None) -> Tensor:
    """W x + b + (alpha / r) B A x. With an adapter attached W and b get no gradient."""
    if adapter is None:
        return linear(x, W, b)
    base = linear(x, W.detach(), None if b is None else b.detach())
    return base + linear(linear(x, adapter.A), adapter.B) * adapter.scale


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------


@dataclass
class Prompt:
    """Layout of one utterance's prompt; speech rows index into a shared H block."""

    speech_rows: np.ndarray
    instruction: tuple[int, ...]
    labels: tuple[int, ...]
    pos_offset: int = 0

    @property
    def speech_len(self) -> int:
        return len(self.speech_rows)

    @property
    def label_start(self) -> int:
        """Position of BOS; its output predicts the first label."""
        return self.speech_len + len(self.instruction)

    def __len__(self) -> int:
        return self.speech_len + len(self.instruction) + 1 + len(self.labels)


@dataclass
class PromptBatch:
    src: np.ndarray  # (B, L) row into concat([H, tok_emb]) i.e. speech row or n_speech + token id
    positions: np.ndarray  # (B, L)
    targets: np.ndarray  # (B, L)
    mask: np.ndarray  # (B, L) bool, true on label and EOS targets only
    n_speech: int
    prompts: list[Prompt] = field(default_factory=list)


def assemble_prompt(
    speech_rows, instruction: Sequence[int], labels: Sequence[int], cfg: LMConfig, pos_offset: int = 0
) -> Prompt:
    p = Prompt(np.asarray(speech_rows, dtype=np.int64), tuple(instruction), tuple(labels), pos_offset)
    if len(p) + pos_offset > cfg.max_len:
        raise SequenceLengthError(f"prompt of length {len(p)} (offset {pos_offset}) exceeds max_len {cfg.max_len}")
    return p


def collate(prompts: Sequence[Prompt], n_speech: int, cfg: LMConfig) -> PromptBatch:
    B = len(prompts)
    L = max(len(p) for p in prompts)
    src = np.full((B, L), n_speech + cfg.pad_id, dtype=np.int64)
    positions = np.zeros((B, L), dtype=np.int64)
    targets = np.full((B, L), cfg.pad_id, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for i, p in enumerate(prompts):
        tokens = list(p.instruction) + [cfg.bos_id] + list(p.labels)
        s = p.speech_len
        n = len(p)
        src[i, :s] = p.speech_rows
        src[i, s:n] = n_speech + np.asarray(tokens, dtype=np.int64)
        positions[i, :n] = p.pos_offset + np.arange(n)
        # next-token targets everywhere; the mask picks the supervised ones
        following = tokens[1:] + [cfg.eos_id]
        targets[i, s : n] = following
        mask[i, p.label_start : n] = True
    return PromptBatch(src, positions, targets, mask, n_speech, list(prompts))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Block:
    def __init__(self, cfg: LMConfig, rng: np.random.Generator, std: float):
        d, f = cfg.d_model, cfg.ff_mult * cfg.d_model
        self.p: dict[str, Tensor] = {
            "ln1_g": Tensor(np.ones(d), requires_grad=True),
            "ln1_b": Tensor(np.zeros(d), requires_grad=True),
            "Wq": Tensor(rng.normal(0, std, (d, d)), requires_grad=True),
            "bq": Tensor(np.zeros(d), requires_grad=True),
            "Wk": Tensor(rng.normal(0, std, (d, d)), requires_grad=True),
            "bk": Tensor(np.zeros(d), requires_grad=True),
            "Wv": Tensor(rng.normal(0, std, (d, d)), requires_grad=True),
            "bv": Tensor(np.zeros(d), requires_grad=True),
            "Wo": Tensor(rng.normal(0, std / math.sqrt(2 * cfg.n_layers), (d, d)), requires_grad=True),
            "bo": Tensor(np.zeros(d), requires_grad=True),
            "ln2_g": Tensor(np.ones(d), requires_grad=True),
            "ln2_b": Tensor(np.zeros(d), requires_grad=True),
            "W1": Tensor(rng.normal(0, std, (f, d)), requires_grad=True),
            "b1": Tensor(np.zeros(f), requires_grad=True),
            "W2": Tensor(rng.normal(0, std / math.sqrt(2 * cfg.n_layers), (d, f)), requires_grad=True),
            "b2": Tensor(np.zeros(d), requires_grad=True),
        }

    def __call__(self, x: Tensor, cfg: LMConfig, causal: np.ndarray, lora: dict[str, LoraAdapter]) -> Tensor:
        p = self.p
        B, L, d = x.shape
        H = cfg.n_heads
        dh = d // H
        h = layer_norm(x, p["ln1_g"], p["ln1_b"])

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(lora_linear(h, p["Wq"], p["bq"], lora.get("q")))
        k = heads(lora_linear(h, p["Wk"], p["bk"], lora.get("k")))
        v = heads(lora_linear(h, p["Wv"], p["bv"], lora.get("v")))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + causal
        att = matmul(softmax(scores, axis=-1), v)
        att = att.transpose(0, 2, 1, 3).reshape(B, L, d)
        x = x + lora_linear(att, p["Wo"], p["bo"], lora.get("o"))
        h = layer_norm(x, p["ln2_g"], p["ln2_b"])
        return x + linear(gelu(linear(h, p["W1"], p["b1"])), p["W2"], p["b2"])


class SpeechLM:
    def __init__(self, cfg: LMConfig, rng: np.random.Generator, std: float = 0.02):
        self.cfg = cfg
        d, V = cfg.d_model, cfg.vocab_size
        self.tok_emb = Tensor(rng.normal(0, std, (V, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0, std, (cfg.max_len, d)), requires_grad=True)
        self.blocks = [Block(cfg, rng, std) for _ in range(cfg.n_layers)]
        self.lnf_g = Tensor(np.ones(d), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(d), requires_grad=True)
        self.head_W = Tensor(rng.normal(0, std, (V, d)), requires_grad=True)
        self.head_b = Tensor(np.zeros(V), requires_grad=True)
        self.lora: list[dict[str, LoraAdapter]] = [{} for _ in self.blocks]

    def add_lora(self, lcfg: LoraConfig, rng: np.random.Generator) -> None:
        d = self.cfg.d_model
        for layer in self.lora:
            for target in lcfg.targets:
                layer[target] = LoraAdapter(rng.normal(0, d**-0.5, (lcfg.r, d)), np.zeros((d, lcfg.r)), lcfg.alpha)

    def base_parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            out.update({f"layers.{i}.{k}": v for k, v in blk.p.items()})
        out.update({"lnf_g": self.lnf_g, "lnf_b": self.lnf_b, "head_W": self.head_W, "head_b": self.head_b})
        return out

    def lora_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.lora):
            for target, ad in sorted(layer.items()):
                out.update({f"layers.{i}.{target}.{k}": v for k, v in ad.parameters().items()})
        return out

    def hidden(self, batch: PromptBatch, H: Tensor) -> Tensor:
        cfg = self.cfg
        Bn, L = batch.src.shape
        if H.shape[0] != batch.n_speech:
            raise ConfigurationError("speech block does not match the batch layout")
        if int(batch.positions.max(initial=0)) >= cfg.max_len:
            raise SequenceLengthError("positions exceed max_len")
        table = concat([H, self.tok_emb], axis=0) if H.shape[0] else self.tok_emb
        x = take_rows(table, batch.src.ravel()).reshape(Bn, L, cfg.d_model)
        x = x + take_rows(self.pos_emb, batch.positions.ravel()).reshape(Bn, L, cfg.d_model)
        causal = np.triu(np.full((L, L), _MASK_VALUE), k=1)
        for blk, lora in zip(self.blocks, self.lora):
            x = blk(x, cfg, causal, lora)
        return layer_norm(x, self.lnf_g, self.lnf_b)

    def logits(self, batch: PromptBatch, H: Tensor) -> Tensor:
        """Logits for every position, shape (B, L, V)."""
        return linear(self.hidden(batch, H), self.head_W, self.head_b)


def empty_speech(d_model: int) -> Tensor:
    return Tensor(np.zeros((0, d_model)))


def forward_loss(batch: PromptBatch, H: Tensor, model: SpeechLM) -> Tensor:
    """Mean next-token cross-entropy over the supervised positions of the batch."""
    h = model.hidden(batch, H)
    rows = np.flatnonzero(batch.mask.ravel())
    hs = take_rows(h.reshape(-1, model.cfg.d_model), rows)
    logits = linear(hs, model.head_W, model.head_b)
    return cross_entropy(logits, batch.targets.ravel()[rows])


@dataclass
class DecodeResult:
    tokens: list[int]
    truncated: bool


def greedy_decode_batch(
    H: np.ndarray, speech_rows: Sequence[np.ndarray], instruction: Sequence[int], model: SpeechLM, max_len: int
) -> list[DecodeResult]:
    """Argmax decoding for several prompts at once; stops at EOS or ``max_len`` tokens."""
    cfg = model.cfg
    instruction = tuple(instruction)
    n = len(speech_rows)
    out: list[list[int]] = [[] for _ in range(n)]
    done = [False] * n
    truncated = [False] * n
    Ht = Tensor(H)
    with no_grad():
        for _ in range(max_len):
            live = [i for i in range(n) if not done[i]]
            if not live:
                break
            prompts = [assemble_prompt(speech_rows[i], instruction, out[i], cfg) for i in live]
            batch = collate(prompts, H.shape[0], cfg)
            hid = model.hidden(batch, Ht).data
            last = np.array([len(p) - 1 for p in prompts])
            h_last = hid[np.arange(len(live)), last]
            logits = h_last @ model.head_W.data.T + model.head_b.data
            for k, i in enumerate(live):
                tok = int(np.argmax(logits[k]))
                if tok == cfg.eos_id:
                    done[i] = True
                else:
                    out[i].append(tok)
                    if len(assemble_prompt(speech_rows[i], instruction, out[i], cfg)) >= cfg.max_len:
                        done[i] = truncated[i] = True
    for i in range(n):
        if not done[i]:
            truncated[i] = True
    return [DecodeResult(out[i], truncated[i]) for i in range(n)]


def greedy_decode(H, instruction: Sequence[int], model: SpeechLM, max_len: int) -> DecodeResult:
    H = H.data if isinstance(H, Tensor) else np.asarray(H, dtype=np.float64)
    return greedy_decode_batch(H, [np.arange(H.shape[0])], instruction, model, max_len)[0]
