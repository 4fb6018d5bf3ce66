"""Mixture-of-experts connector from spliced speech frames to LM embeddings.

Two routing modes:

* ``DENSE``: every expert runs and outputs are mixed with the router's
  softmax probabilities.
* ``LSE_HARD``: language-specialized experts. Monolingual utterances go
  entirely through the expert tagged with their language. Code-switched
  frames each go through their argmax-probability expert, unweighted, and
  the outputs keep the original frame order.

Frames are time-major arrays of shape (t, d).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DimensionError, Tensor, gelu, linear, no_grad, softmax


class ConfigurationError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class RoutingMode(enum.Enum):
    LSE_HARD = "lse"
    DENSE = "dense"


# Per-expert intermediate width of the full-size connector.
FULL_SCALE_EXPERT_HIDDEN = 2048
FULL_SCALE_SPLICE_FACTOR = 5


@dataclass
class ConnectorConfig:
    d_feat: int = 16
    factor: int = FULL_SCALE_SPLICE_FACTOR
    n_experts: int = 2
    hidden: int = 64
    d_model: int = 64
    expert_tags: tuple[str | None, ...] = ("zh", "en")
    # expert output-layer init; keeps connector outputs at token-embedding scale
    out_std: float = 0.02

    def __post_init__(self):
        self.expert_tags = tuple(self.expert_tags)
        if self.n_experts < 1:
            raise ConfigurationError("need at least one expert")
        if self.factor < 1:
            raise ConfigurationError("splice factor must be >= 1")
        if len(self.expert_tags) not in (0, self.n_experts):
            raise ConfigurationError("expert_tags must be empty or one per expert")

    @property
    def d_in(self) -> int:
        return self.d_feat * self.factor

    @classmethod
    def linear_baseline(cls, like: ConnectorConfig) -> ConnectorConfig:
        """Single-FFN connector whose parameter count matches ``like``."""
        target = Connector.count_params(like)
        # params(h) = h * (d_in + 1 + d_model) + d_model
        hidden = round((target - like.d_model) / (like.d_in + 1 + like.d_model))
        return cls(like.d_feat, like.factor, 1, hidden, like.d_model, (), like.out_std)


def downsample(X: np.ndarray, factor: int) -> np.ndarray:
    """Splice each run of ``factor`` frames into one frame; zero-pad the tail."""
    X = np.asarray(X, dtype=np.float64)
    if factor < 1:
        raise ConfigurationError("factor must be >= 1")
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInputError("downsample needs at least one frame")
    t, d = X.shape
    groups = -(-t // factor)
    padded = np.zeros((groups * factor, d), dtype=np.float64)
    padded[:t] = X
    return padded.reshape(groups, factor * d)


class Router:
    def __init__(self, W: np.ndarray, b: np.ndarray):
        self.W = Tensor(W, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def logits(self, X: Tensor) -> Tensor:
        return linear(X, self.W, self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


class Expert:
    def __init__(self, W1, b1, W2, b2, tag: str | None = None):
        self.W1 = Tensor(W1, requires_grad=True)
        self.b1 = Tensor(b1, requires_grad=True)
        self.W2 = Tensor(W2, requires_grad=True)
        self.b2 = Tensor(b2, requires_grad=True)
        self.tag = tag

    def __call__(self, X: Tensor) -> Tensor:
        return linear(gelu(linear(X, self.W1, self.b1)), self.W2, self.b2)

    def shapes(self) -> tuple:
        return tuple(p.shape for p in self.parameters().values())

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def route_probs(x, router: Router) -> Tensor:
    """softmax(W x + b) for a single frame (d_in,) or a stack of frames (t, d_in)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != router.W.shape[1]:
        raise DimensionError(f"router expects {router.W.shape[1]}-dim frames, got {x.shape[-1]}")
    return softmax(router.logits(x), axis=-1)


def _check_experts(experts: Sequence[Expert]) -> None:
    if not experts:
        raise ConfigurationError("no experts")
    first = experts[0].shapes()
    if any(e.shapes() != first for e in experts[1:]):
        raise ConfigurationError("experts must share identical shapes")


def _mix(weights, outputs: dict[int, Tensor]) -> Tensor:
    """Sum_j weights[:, j] * outputs[j] over the experts present in ``outputs``."""
    total = None
    for j, out in outputs.items():
        term = weights[:, j : j + 1] * out
        total = term if total is None else total + term
    return total


def forward_dense(X, router: Router | None, experts: Sequence[Expert]) -> Tensor:
    """h_i = sum_j P(x_i)_j e_j(x_i) for every frame."""
    _check_experts(experts)
    X = X if isinstance(X, Tensor) else Tensor(X)
    if len(experts) == 1:
        return experts[0](X)
    if router is None or router.n != len(experts):
        raise ConfigurationError("router size must equal the number of experts")
    probs = route_probs(X, router)
    return _mix(probs, {j: e(X) for j, e in enumerate(experts)})


def lse_selection(X, utt_lang, router: Router | None, experts: Sequence[Expert]) -> np.ndarray:
    """Expert index per frame under language-specialized hard routing.

    ``utt_lang`` is one tag for the whole input or one tag per frame.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    t = X.shape[0]
    langs = np.full(t, utt_lang, dtype=object) if isinstance(utt_lang, str) else np.asarray(utt_lang, dtype=object)
    if langs.shape != (t,):
        raise DimensionError("need one language tag per frame")
    tags = [e.tag for e in experts]
    sel = np.full(t, -1, dtype=np.int64)
    for lang in ("zh", "en"):
        rows = langs == lang
        if rows.any():
            if tags.count(lang) != 1:
                raise ConfigurationError(f"exactly one expert must be tagged {lang!r} for LSE routing")
            sel[rows] = tags.index(lang)
    cs_rows = langs == "cs"
    if cs_rows.any():
        if router is None:
            raise ConfigurationError("code-switched LSE routing needs a router")
        with no_grad():
            probs = route_probs(X.data[cs_rows], router).data
        sel[cs_rows] = np.argmax(probs, axis=-1)
    if (sel < 0).any():
        raise ConfigurationError(f"unknown utterance language in {sorted(set(langs.tolist()))}")
    return sel


def forward_lse(X, utt_lang, router: Router | None, experts: Sequence[Expert]) -> Tensor:
    """Hard routing: each frame passes through exactly one expert, unweighted."""
    _check_experts(experts)
    X = X if isinstance(X, Tensor) else Tensor(X)
    sel = lse_selection(X, utt_lang, router, experts)
    used = sorted(set(sel.tolist()))
    if len(used) == 1:
        return experts[used[0]](X)
    onehot = np.zeros((X.shape[0], len(experts)))
    onehot[np.arange(X.shape[0]), sel] = 1.0
    return _mix(onehot, {j: experts[j](X) for j in used})


class Connector:
    def __init__(self, cfg: ConnectorConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_in, h, d_model = cfg.d_in, cfg.hidden, cfg.d_model
        self.router = None
        if cfg.n_experts > 1:
            self.router = Router(rng.normal(0.0, d_in**-0.5, (cfg.n_experts, d_in)), np.zeros(cfg.n_experts))
        tags = cfg.expert_tags or (None,) * cfg.n_experts
        self.experts = [
            Expert(
                rng.normal(0.0, d_in**-0.5, (h, d_in)),
                np.zeros(h),
                rng.normal(0.0, cfg.out_std, (d_model, h)),
                np.zeros(d_model),
                tag,
            )
            for tag in tags
        ]

    @staticmethod
    def count_params(cfg: ConnectorConfig) -> int:
        per_expert = cfg.hidden * (cfg.d_in + 1) + cfg.d_model * (cfg.hidden + 1)
        router = cfg.n_experts * (cfg.d_in + 1) if cfg.n_experts > 1 else 0
        return cfg.n_experts * per_expert + router

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.router is not None:
            out.update({f"router.{k}": v for k, v in self.router.parameters().items()})
        for j, e in enumerate(self.experts):
            out.update({f"experts.{j}.{k}": v for k, v in e.parameters().items()})
        return out

    def __call__(self, X, mode: RoutingMode, utt_lang=None) -> Tensor:
        if mode is RoutingMode.DENSE or len(self.experts) == 1:
            return forward_dense(X, self.router, self.experts)
        return forward_lse(X, utt_lang, self.router, self.experts)

    def inspect(self, X: np.ndarray, mode: RoutingMode, utt_lang: str) -> list[tuple[int, list[float], int]]:
        """(frame_index, probabilities, selected expert) for each spliced frame."""
        with no_grad():
            if self.router is None:
                probs = np.ones((X.shape[0], 1))
            else:
                probs = route_probs(X, self.router).data
            if mode is RoutingMode.LSE_HARD and len(self.experts) > 1:
                sel = lse_selection(X, utt_lang, self.router, self.experts)
            else:
                sel = np.argmax(probs, axis=-1)
        return [(i, probs[i].tolist(), int(sel[i])) for i in range(X.shape[0])]
