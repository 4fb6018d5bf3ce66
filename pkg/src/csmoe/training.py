"""Two-stage progressive training.

Stage 1 trains the connector only; stage 2 trains the connector and the LoRA
adapters. Each stage independently chooses interruption-token labels
(``idit``) and language-specialized hard routing (``lse``); the six named
strategies A-F are the presets below, and any other flag combination is
accepted as a custom strategy.

The base LM is pretrained on text alone, reading a sequence of separately
tokenized units back as a transcript, and stays frozen in both stages.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .connector import Connector, ConnectorConfig, RoutingMode, downsample
from .numerics import (
    AdamWState,
    Checkpoint,
    OptimizerConfig,
    Tensor,
    adamw_step,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from .speech_lm import (
    LMConfig,
    LoraConfig,
    SpeechLM,
    assemble_prompt,
    collate,
    empty_speech,
    forward_loss,
    greedy_decode_batch,
)
from .synthdata import Corpus, SynthSpec, Utterance, render_frames, sample_texts
from .tokenizer import Vocab, decode, encode_idit, encode_plain, normalize, segment_units, train_bpe

log = logging.getLogger(__name__)

# (stage1 idit, stage1 lse, stage2 idit, stage2 lse)
STRATEGIES: dict[str, tuple[bool, bool, bool, bool]] = {
    "A": (False, False, False, False),
    "B": (True, False, True, False),
    "C": (False, True, False, True),
    "D": (False, True, False, False),
    "E": (False, False, True, False),
    "F": (False, True, True, False),
}

INSTRUCTION_TEXT = "transcribe:"


class TrainingError(RuntimeError):
    pass


class StrategyError(ValueError):
    pass


def strategy_flags(strategy: str) -> tuple[bool, bool, bool, bool]:
    """Flags for a preset letter or a custom 4-digit string such as ``"0110"``."""
    if strategy in STRATEGIES:
        return STRATEGIES[strategy]
    if re.fullmatch(r"[01]{4}", strategy):
        return tuple(c == "1" for c in strategy)  # type: ignore[return-value]
    raise StrategyError(f"unknown strategy {strategy!r}; use A-F or four 0/1 flags")


@dataclass
class StageConfig:
    name: str = "stage1"
    idit: bool = False
    lse: bool = False
    trainable: tuple[str, ...] = ("connector",)
    steps: int = 2000
    epochs: float | None = None
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        self.trainable = tuple(self.trainable)
        if isinstance(self.optim, dict):
            self.optim = OptimizerConfig(**self.optim)
        bad = set(self.trainable) - {"connector", "lora"}
        if bad:
            raise ValueError(f"trainable groups must be connector/lora, got {sorted(bad)}")

    def n_steps(self, n_train: int) -> int:
        if self.epochs is None:
            return self.steps
        per_step = self.optim.batch_size * self.optim.grad_accum
        return math.ceil(self.epochs * n_train / per_step)


@dataclass
class PretrainConfig:
    steps: int = 3000
    # share of sequences encoded with interruption tokens instead of plain BPE
    idit_share: float = 0.5
    optim: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=3e-3, warmup_steps=100, batch_size=16))

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimizerConfig(**self.optim)


@dataclass
class TokenizerConfig:
    target_vocab: int = 640


def default_stages() -> tuple[StageConfig, StageConfig]:
    s1 = StageConfig("stage1", idit=False, lse=True, trainable=("connector",))
    s2 = StageConfig("stage2", idit=True, lse=False, trainable=("connector", "lora"))
    return s1, s2


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


class SpeechModel:
    """Connector + LM + LoRA + vocabulary, addressed by dotted parameter names."""

    def __init__(
        self,
        vocab: Vocab,
        ccfg: ConnectorConfig,
        lcfg: LMConfig,
        lora_cfg: LoraConfig,
        seed: int,
    ):
        self.vocab = vocab
        self.connector = Connector(ccfg, np.random.default_rng([seed, 1]))
        self.lm = SpeechLM(lcfg, np.random.default_rng([seed, 2]))
        self.lm.add_lora(lora_cfg, np.random.default_rng([seed, 3]))

    @property
    def instruction(self) -> tuple[int, ...]:
        return self.lm.cfg.instruction

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "connector": self.connector.parameters(),
            "lm": self.lm.base_parameters(),
            "lora": self.lm.lora_parameters(),
        }

    def parameters(self) -> dict[str, Tensor]:
        return {f"{g}.{k}": v for g, ps in self.groups().items() for k, v in ps.items()}

    def set_trainable(self, groups: Sequence[str]) -> dict[str, Tensor]:
        trainable = {}
        for g, ps in self.groups().items():
            for k, p in ps.items():
                p.requires_grad = g in groups
                p.grad = np.zeros_like(p.data) if p.requires_grad else None
                if p.requires_grad:
                    trainable[f"{g}.{k}"] = p
        return trainable

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict and set(state) != set(params):
            raise TrainingError("checkpoint parameter names do not match the model")
        for k, arr in state.items():
            if k in params:
                if params[k].shape != arr.shape:
                    raise TrainingError(f"shape mismatch for {k}: {arr.shape} vs {params[k].shape}")
                params[k].data = np.array(arr, dtype=np.float64)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Example:
    utt: Utterance
    frames: np.ndarray  # spliced, (t', factor * d_feat)
    plain: tuple[int, ...]
    idit: tuple[int, ...]


def prepare(utts: Sequence[Utterance], spec: SynthSpec, vocab: Vocab, factor: int) -> list[Example]:
    out = []
    for u in utts:
        fm = render_frames(u, spec)
        out.append(
            Example(
                u,
                downsample(fm.values, factor),
                tuple(encode_plain(normalize(u.text), vocab)),
                tuple(encode_idit(u.text, vocab)),
            )
        )
    return out


def _speech_block(examples: Sequence[Example]) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    X = np.concatenate([e.frames for e in examples], axis=0)
    rows, langs, start = [], [], 0
    for e in examples:
        n = e.frames.shape[0]
        rows.append(np.arange(start, start + n))
        langs += [e.utt.lang] * n
        start += n
    return X, rows, np.asarray(langs, dtype=object)


def batch_loss(model: SpeechModel, examples: Sequence[Example], idit: bool, mode: RoutingMode) -> Tensor:
    X, rows, langs = _speech_block(examples)
    H = model.connector(X, mode, langs)
    prompts = [
        assemble_prompt(r, model.instruction, e.idit if idit else e.plain, model.lm.cfg) for r, e in zip(rows, examples)
    ]
    return forward_loss(collate(prompts, X.shape[0], model.lm.cfg), H, model.lm)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    stage: str
    loss: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for k in range(0, n - batch_size + 1, batch_size):
            yield order[k : k + batch_size]


def run_stage(
    cfg: StageConfig,
    examples: Sequence[Example],
    model: SpeechModel,
    opt_state: AdamWState,
    seed: int,
    stage_index: int,
    on_step: Callable[[StepRecord], None] | None = None,
    last_good: str | None = None,
) -> list[StepRecord]:
    """Train ``cfg.trainable`` for the configured number of steps."""
    params = model.set_trainable(cfg.trainable)
    mode = RoutingMode.LSE_HARD if cfg.lse else RoutingMode.DENSE
    rng = np.random.default_rng([seed, stage_index, 17])
    batches = _batches(len(examples), min(cfg.optim.batch_size, len(examples)), rng)
    records: list[StepRecord] = []
    accum = cfg.optim.grad_accum
    for step in range(1, cfg.n_steps(len(examples)) + 1):
        for p in params.values():
            p.zero_grad()
        total = 0.0
        for _ in range(accum):
            batch = [examples[i] for i in next(batches)]
            try:
                loss = batch_loss(model, batch, cfg.idit, mode)
            except ArithmeticError as exc:
                raise TrainingError(f"{cfg.name} step {step}: {exc}; last good checkpoint: {last_good}") from exc
            loss.backward()
            total += loss.item()
        grads = {k: p.grad / accum for k, p in params.items()}
        try:
            lr = adamw_step(params, grads, opt_state, cfg.optim, step)
        except ArithmeticError as exc:
            raise TrainingError(f"{cfg.name} step {step}: {exc}; last good checkpoint: {last_good}") from exc
        rec = StepRecord(step, cfg.name, total / accum, lr)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    model.set_trainable(())
    return records


def pretrain_lm(
    model: SpeechModel, texts: Sequence[str], cfg: PretrainConfig, seed: int
) -> list[StepRecord]:
    """Text-only training of the base LM to read a unit sequence back as a transcript.

    The prefix holds each unit of a transcript tokenized on its own, without
    the space in front of it, which is all a speech row can tell the LM. The
    target is the transcript's plain or interruption-token encoding (a
    seeded ``idit_share`` use the latter), so the LM learns both the copy and
    the spacing. Texts are consumed in order, ``batch_size`` per step,
    cycling if there are too few. Like speech prompts, every sequence starts
    at position 0.
    """
    lm = model.lm
    params = {f"lm.{k}": p for k, p in lm.base_parameters().items()}
    for p in model.parameters().values():
        p.requires_grad = False
        p.grad = None
    for p in params.values():
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    saved_lora = lm.lora
    lm.lora = [{} for _ in lm.blocks]
    rng = np.random.default_rng([seed, 0, 29])
    use_idit = rng.random(len(texts)) < cfg.idit_share
    encoded = []
    for t, i in zip(texts, use_idit):
        t = normalize(t)
        units = tuple(x for u in segment_units(t) for x in encode_plain(u.text, model.vocab))
        labels = tuple(encode_idit(t, model.vocab) if i else encode_plain(t, model.vocab))
        encoded.append((units, labels))
    bs = min(cfg.optim.batch_size, len(encoded))
    state = AdamWState()
    records = []
    H = empty_speech(lm.cfg.d_model)
    try:
        for step in range(1, cfg.steps + 1):
            for p in params.values():
                p.zero_grad()
            prompts = []
            for k in range(bs):
                units, labels = encoded[((step - 1) * bs + k) % len(encoded)]
                prompts.append(assemble_prompt([], units + model.instruction, labels, lm.cfg))
            loss = forward_loss(collate(prompts, 0, lm.cfg), H, lm)
            loss.backward()
            lr = adamw_step(params, {k: p.grad for k, p in params.items()}, state, cfg.optim, step)
            records.append(StepRecord(step, "pretrain", loss.item(), lr))
    finally:
        lm.lora = saved_lora
        model.set_trainable(())
    return records


# ---------------------------------------------------------------------------
# decoding / evaluation
# ---------------------------------------------------------------------------


def transcribe(
    model: SpeechModel, examples: Sequence[Example], mode: RoutingMode, max_len: int, chunk: int = 64
) -> list[str]:
    hyps: list[str] = []
    for k in range(0, len(examples), chunk):
        part = examples[k : k + chunk]
        X, rows, langs = _speech_block(part)
        with no_grad():
            H = model.connector(X, mode, langs).data
        for res in greedy_decode_batch(H, rows, model.instruction, model.lm, max_len):
            hyps.append(normalize(decode(res.tokens, model.vocab, errors="replace")))
    return hyps


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class RunSettings:
    """Everything that determines a training run besides the corpus."""

    strategy: str = "F"
    seed: int = 0
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: StageConfig = field(default_factory=lambda: default_stages()[0])
    stage2: StageConfig = field(default_factory=lambda: default_stages()[1])
    decode_max_len: int = 48

    def stages(self) -> tuple[StageConfig, StageConfig]:
        f = strategy_flags(self.strategy)
        return (
            replace(self.stage1, idit=f[0], lse=f[1]),
            replace(self.stage2, idit=f[2], lse=f[3]),
        )

    def inference_mode(self) -> RoutingMode:
        return RoutingMode.LSE_HARD if self.stages()[1].lse else RoutingMode.DENSE


def build_vocab(corpus: Corpus, cfg: TokenizerConfig) -> Vocab:
    return train_bpe([u.text for u in corpus["train"]], cfg.target_vocab)


def build_model(vocab: Vocab, settings: RunSettings) -> SpeechModel:
    instruction = tuple(encode_plain(INSTRUCTION_TEXT, vocab))
    lcfg = replace(
        settings.lm,
        vocab_size=len(vocab),
        pad_id=vocab.pad_id,
        bos_id=vocab.bos_id,
        eos_id=vocab.eos_id,
        instruction=instruction,
    )
    ccfg = replace(settings.connector, d_model=lcfg.d_model)
    return SpeechModel(vocab, ccfg, lcfg, settings.lora, settings.seed)


def _settings_dict(settings: RunSettings) -> dict:
    return asdict(settings)


def make_checkpoint(model: SpeechModel, opt_state: AdamWState | None, step: int, meta: dict) -> Checkpoint:
    meta = dict(meta)
    meta["vocab"] = model.vocab.dumps()
    return Checkpoint(model.state_dict(), opt_state, step, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[SpeechModel, RunSettings]:
    from .config import settings_from_dict

    settings = settings_from_dict(ckpt.meta["settings"])
    vocab = Vocab.loads(ckpt.meta["vocab"])
    model = build_model(vocab, settings)
    model.load_state_dict(ckpt.params)
    return model, settings


@dataclass
class PipelineResult:
    model: SpeechModel
    settings: RunSettings
    logs: list[StepRecord]
    opt_state: AdamWState
    checkpoints: dict[str, str] = field(default_factory=dict)


def pretrain_texts(corpus: Corpus, cfg: PretrainConfig, seed: int) -> list[str]:
    """Fresh random transcripts for LM pretraining; never a held-out transcript."""
    held_out = [u.text for split, utts in corpus.splits.items() if split != "train" for u in utts]
    return sample_texts(corpus.spec, cfg.steps * cfg.optim.batch_size, seed, exclude=held_out)


def pretrain_base(corpus: Corpus, settings: RunSettings, vocab: Vocab | None = None) -> tuple[Vocab, dict]:
    """Tokenizer + pretrained base LM weights for ``settings.seed``; reusable across strategies."""
    vocab = vocab or build_vocab(corpus, settings.tokenizer)
    model = build_model(vocab, settings)
    texts = pretrain_texts(corpus, settings.pretrain, settings.seed)
    pretrain_lm(model, texts, settings.pretrain, settings.seed)
    return vocab, {f"lm.{k}": v.data.copy() for k, v in model.lm.base_parameters().items()}


def run_pipeline(
    corpus: Corpus,
    settings: RunSettings,
    out_dir=None,
    base: tuple[Vocab, dict] | None = None,
    resume_from=None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> PipelineResult:
    """Stage 1 then stage 2 with the strategy's flags; checkpoints after each stage.

    ``base`` reuses a pretrained (vocab, base-LM weights) pair. ``resume_from``
    loads a stage-1 checkpoint and runs stage 2 only.
    """
    stages = settings.stages()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"settings": _settings_dict(settings), "strategy": settings.strategy}

    opt_state = AdamWState()
    logs: list[StepRecord] = []
    start_stage = 0
    checkpoints: dict[str, str] = {}
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.meta.get("stage") != stages[0].name:
            raise TrainingError("resume_from must be a stage-1 checkpoint")
        model, _ = model_from_checkpoint(ckpt)
        opt_state = ckpt.opt_state or AdamWState()
        start_stage = 1
        checkpoints[stages[0].name] = str(resume_from)
    else:
        if base is None:
            base = pretrain_base(corpus, settings)
        vocab, base_state = base
        model = build_model(vocab, settings)
        model.load_state_dict(base_state, strict=False)
        if out is not None:
            vocab.save(out / "vocab.txt")

    examples = prepare(corpus["train"], corpus.spec, model.vocab, model.connector.cfg.factor)
    step_total = 0 if resume_from is None else load_checkpoint(resume_from).step
    last_good = checkpoints.get(stages[0].name)
    for index in range(start_stage, len(stages)):
        cfg = stages[index]
        # connector moments carry over between stages; LoRA moments start fresh
        opt_state.drop("lora.")
        recs = run_stage(cfg, examples, model, opt_state, settings.seed, index, on_step, last_good)
        logs += recs
        step_total += len(recs)
        if out is not None:
            path = out / f"{cfg.name}.ckpt"
            save_checkpoint(path, make_checkpoint(model, opt_state, step_total, dict(meta, stage=cfg.name)))
            checkpoints[cfg.name] = str(path)
            last_good = str(path)
    return PipelineResult(model, settings, logs, opt_state, checkpoints)
