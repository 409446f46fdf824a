"""Two toy generative vision-language models differing only in fusion.

Both models patch-embed the image, look up question token embeddings,
fuse the two streams, and decode answer tokens with teacher forcing.
Projection fusion maps patch features through one linear layer and
prepends them to the question states. Cross-attention fusion lets the
question states attend to patch features through dedicated q/k/v/output
matrices and a residual path, leaving the question-state count unchanged;
zeroing the adapter output matrix severs the image's influence entirely.

Training is plain mini-batch gradient descent, single-threaded and fully
determined by the config seed. Trained parameters are immutable and safe
to share across concurrent evaluation workers.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    ComputationGraph,
    ContractViolation,
    GradientMap,
    Tensor,
    backward,
    op_add,
    op_attention,
    op_concat_rows,
    op_cross_entropy,
    op_embed,
    op_extract_patches,
    op_index,
    op_linear,
    op_matmul,
    op_max,
    op_relu,
    op_sub,
)
from .seeding import derive_seed, make_rng
from .vqa import VqaSample, load_image

__all__ = [
    "PAD_TOKEN",
    "EOS_TOKEN",
    "FusionKind",
    "ToyVlmConfig",
    "ToyVlmParams",
    "Question",
    "AnswerText",
    "TrainResult",
    "TrainingError",
    "CheckpointFormatError",
    "default_vocab",
    "tokenize_question",
    "tokenize_answer",
    "init_params",
    "encode_image",
    "encode_question",
    "fuse",
    "vlm_loss",
    "generate_answer",
    "train_toy",
    "save_checkpoint",
    "load_checkpoint",
    "self_label_loss",
    "first_token_margin_loss",
    "image_gradient",
]

PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"

_QUESTION_WORDS = ("what", "color", "shape", "is", "in", "the", "image",
                   "how", "many", "there", "a")
_ANSWER_WORDS = ("yes", "no",
                 "red", "green", "blue", "yellow",
                 "circle", "square", "triangle",
                 "circles", "squares", "triangles",
                 "one", "two", "three")


def default_vocab() -> tuple:
    """Whitespace-token vocabulary covering the synthetic task."""
    return (PAD_TOKEN, EOS_TOKEN) + _QUESTION_WORDS + _ANSWER_WORDS


class FusionKind(str, Enum):
    PROJECTION = "projection"
    CROSS_ATTENTION = "cross_attention"


@dataclass(frozen=True)
class ToyVlmConfig:
    """Architecture and initialization settings for one toy model."""

    fusion_kind: FusionKind
    image_size: tuple = (32, 32, 3)
    patch_size: int = 8
    d_model: int = 32
    vocab: tuple = field(default_factory=default_vocab)
    max_answer_len: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fusion_kind", FusionKind(self.fusion_kind))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "vocab", tuple(self.vocab))
        h, w, c = self.image_size
        if min(h, w, c) <= 0 or self.patch_size <= 0 or self.d_model <= 0:
            raise ContractViolation("config dimensions must be positive")
        if h % self.patch_size != 0 or w % self.patch_size != 0:
            raise ContractViolation(
                f"image {h}x{w} not divisible by patch size {self.patch_size}")
        if PAD_TOKEN not in self.vocab or EOS_TOKEN not in self.vocab:
            raise ContractViolation("vocab must contain the reserved PAD and EOS tokens")
        if len(set(self.vocab)) != len(self.vocab):
            raise ContractViolation("vocab tokens must be unique")
        if self.max_answer_len < 1:
            raise ContractViolation("max_answer_len must be positive")
        if self.seed < 0:
            raise ContractViolation("seed must be non-negative")

    @property
    def n_patches(self) -> int:
        h, w, _ = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_size[2]

    @property
    def pad_id(self) -> int:
        return self.vocab.index(PAD_TOKEN)

    @property
    def eos_id(self) -> int:
        return self.vocab.index(EOS_TOKEN)

    def token_id(self, token: str) -> int:
        try:
            return self.vocab.index(token)
        except ValueError:
            raise ContractViolation(f"token {token!r} not in vocabulary") from None

    def to_dict(self) -> dict:
        return {
            "fusion_kind": self.fusion_kind.value,
            "image_size": list(self.image_size),
            "patch_size": self.patch_size,
            "d_model": self.d_model,
            "vocab": list(self.vocab),
            "max_answer_len": self.max_answer_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyVlmConfig":
        return cls(
            fusion_kind=FusionKind(d["fusion_kind"]),
            image_size=tuple(d["image_size"]),
            patch_size=int(d["patch_size"]),
            d_model=int(d["d_model"]),
            vocab=tuple(d["vocab"]),
            max_answer_len=int(d["max_answer_len"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class Question:
    """Token id sequence indexing the model vocabulary."""

    token_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))
        if len(self.token_ids) == 0:
            raise ContractViolation("question must contain at least one token")
        if any(i < 0 for i in self.token_ids):
            raise ContractViolation("question token ids must be non-negative")


@dataclass(frozen=True)
class AnswerText:
    """EOS-terminated token sequence plus its rendered string form."""

    token_ids: tuple
    text: str

    @classmethod
    def from_token_ids(cls, token_ids: Sequence[int], config: ToyVlmConfig) -> "AnswerText":
        ids = tuple(int(i) for i in token_ids)
        if len(ids) == 0 or ids[-1] != config.eos_id:
            raise ContractViolation("answer token sequence must terminate with EOS")
        for i in ids:
            if not 0 <= i < len(config.vocab):
                raise ContractViolation(f"answer token id {i} outside vocabulary")
        words = [config.vocab[i] for i in ids if config.vocab[i] not in (PAD_TOKEN, EOS_TOKEN)]
        return cls(token_ids=ids, text=" ".join(words))

    @property
    def content_ids(self) -> tuple:
        return self.token_ids[:-1]


_STRIP = str.maketrans("", "", ".,?!'\";:()")


def tokenize_question(text: str, config: ToyVlmConfig) -> Question:
    """Lowercase whitespace tokenization against the model vocabulary."""
    words = text.lower().translate(_STRIP).split()
    if not words:
        raise ContractViolation(f"question {text!r} has no tokens")
    return Question(tuple(config.token_id(w) for w in words))


def tokenize_answer(text: str, config: ToyVlmConfig) -> AnswerText:
    """Tokenize a gold answer string and append the EOS terminator."""
    words = text.lower().translate(_STRIP).split()
    ids = tuple(config.token_id(w) for w in words) + (config.eos_id,)
    return AnswerText.from_token_ids(ids, config)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ToyVlmParams:
    """All learnable weights of one toy model, keyed by name."""

    config: ToyVlmConfig
    weights: dict

    def bind(self, graph: ComputationGraph) -> "ToyVlmParams":
        """View with every weight registered as a graph leaf, for training."""
        return ToyVlmParams(self.config, {k: graph.leaf(v) for k, v in self.weights.items()})

    def validate(self) -> None:
        expected = {name: shape for name, shape, _ in _weight_specs(self.config)}
        if set(self.weights) != set(expected):
            raise ContractViolation(
                f"parameter set does not match fusion kind {self.config.fusion_kind.value}: "
                f"have {sorted(self.weights)}, want {sorted(expected)}")
        for name, tensor in self.weights.items():
            if tensor.shape != expected[name]:
                raise ContractViolation(
                    f"weight {name} has shape {tensor.shape}, want {expected[name]}")


def _weight_specs(config: ToyVlmConfig):
    """(name, shape, init) triples in canonical checkpoint order."""
    d = config.d_model
    v = len(config.vocab)
    specs = [
        ("patch_embed.weight", (config.patch_dim, d), "xavier"),
        ("patch_embed.bias", (d,), "zero"),
        ("token_embed", (v, d), "xavier"),
    ]
    if config.fusion_kind is FusionKind.PROJECTION:
        specs += [
            ("fusion.proj.weight", (d, d), "xavier"),
            ("fusion.proj.bias", (d,), "zero"),
        ]
    else:
        specs += [
            ("fusion.wq", (d, d), "xavier"),
            ("fusion.wk", (d, d), "xavier"),
            ("fusion.wv", (d, d), "xavier"),
            ("fusion.wo", (d, d), "xavier"),
        ]
    specs += [
        ("decoder.pos", (config.max_answer_len + 1, d), "xavier"),
        ("decoder.ff.weight", (d, d), "xavier"),
        ("decoder.ff.bias", (d,), "zero"),
        ("head.weight", (d, v), "xavier"),
        ("head.bias", (v,), "zero"),
    ]
    return specs


def init_params(config: ToyVlmConfig) -> ToyVlmParams:
    """Seeded initialization: uniform(-s, s) with s = sqrt(6 / (fan_in +
    fan_out)) for matrices, zeros for biases."""
    rng = make_rng(config.seed)
    weights = {}
    for name, shape, kind in _weight_specs(config):
        if kind == "zero":
            weights[name] = Tensor._wrap(np.zeros(shape))
        else:
            s = math.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = Tensor._wrap(rng.uniform(-s, s, size=shape))
    return ToyVlmParams(config, weights)


# ---------------------------------------------------------------------------
# forward passes


def encode_image(image: Tensor, params: ToyVlmParams) -> Tensor:
    """Non-overlapping patches, flattened and linearly embedded."""
    cfg = params.config
    if image.shape != cfg.image_size:
        raise ContractViolation(f"image shape {image.shape} does not match {cfg.image_size}")
    if image.array.min() < 0.0 or image.array.max() > 1.0:
        raise ContractViolation("image values must lie in [0, 1]")
    patches = op_extract_patches(image, cfg.patch_size)
    return op_linear(patches, params.weights["patch_embed.weight"],
                     params.weights["patch_embed.bias"])


def encode_question(question: Question, params: ToyVlmParams) -> Tensor:
    cfg = params.config
    for i in question.token_ids:
        if i >= len(cfg.vocab):
            raise ContractViolation(f"question token id {i} outside vocabulary")
    return op_embed(params.weights["token_embed"], question.token_ids)


def fuse(patch_features: Tensor, question_states: Tensor, params: ToyVlmParams) -> Tensor:
    """Merge visual and textual streams according to the fusion kind.

    Projection: patch features pass through one linear layer and are
    prepended to the question states. Cross-attention: question states
    attend to patch features (q/k/v projections, output matrix) and the
    result is added residually, keeping the question-state count.
    """
    w = params.weights
    if params.config.fusion_kind is FusionKind.PROJECTION:
        projected = op_linear(patch_features, w["fusion.proj.weight"], w["fusion.proj.bias"])
        return op_concat_rows(projected, question_states)
    q = op_matmul(question_states, w["fusion.wq"])
    k = op_matmul(patch_features, w["fusion.wk"])
    v = op_matmul(patch_features, w["fusion.wv"])
    attended = op_matmul(op_attention(q, k, v), w["fusion.wo"])
    return op_add(question_states, attended)


def _decode_logits(params: ToyVlmParams, fused: Tensor, prev_ids: Sequence[int]) -> Tensor:
    """Teacher-forced decoder: each position embeds its previous token plus
    a position embedding, attends over the fused states, and maps through
    a relu layer to vocabulary logits."""
    w = params.weights
    prev = tuple(int(i) for i in prev_ids)
    u = op_add(op_embed(w["token_embed"], prev),
               op_embed(w["decoder.pos"], tuple(range(len(prev)))))
    h = op_attention(u, fused, fused)
    z = op_relu(op_linear(op_add(h, u), w["decoder.ff.weight"], w["decoder.ff.bias"]))
    return op_linear(z, w["head.weight"], w["head.bias"])


def _fused_states(params: ToyVlmParams, image: Tensor, question: Question) -> Tensor:
    return fuse(encode_image(image, params), encode_question(question, params), params)


def vlm_loss(params: ToyVlmParams, image: Tensor, question: Question,
             answer: AnswerText) -> Tensor:
    """Teacher-forced cross-entropy of the answer tokens (EOS included)
    given the fused states; differentiable end-to-end in the image."""
    cfg = params.config
    content = answer.content_ids
    if len(content) > cfg.max_answer_len:
        raise ContractViolation(
            f"answer length {len(content)} exceeds max_answer_len {cfg.max_answer_len}")
    for i in answer.token_ids:
        if not 0 <= i < len(cfg.vocab):
            raise ContractViolation(f"answer token id {i} outside vocabulary")
    targets = content + (cfg.eos_id,)
    prev = (cfg.pad_id,) + content
    logits = _decode_logits(params, _fused_states(params, image, question), prev)
    return op_cross_entropy(logits, targets)


def generate_answer(params: ToyVlmParams, image: Tensor, question: Question) -> AnswerText:
    """Greedy decoding: argmax token per step (ties -> lowest id), stopping
    at EOS or max_answer_len. Pure function of its arguments."""
    cfg = params.config
    fused = _fused_states(params, image, question)
    content: list[int] = []
    for _ in range(cfg.max_answer_len):
        logits = _decode_logits(params, fused, (cfg.pad_id,) + tuple(content))
        token = int(np.argmax(logits.array[-1]))
        if token == cfg.eos_id:
            break
        content.append(token)
    return AnswerText.from_token_ids(tuple(content) + (cfg.eos_id,), cfg)


def image_gradient(params: ToyVlmParams, image: Tensor, question: Question,
                   answer: AnswerText) -> np.ndarray:
    """Gradient of vlm_loss with respect to the image pixels."""
    graph = ComputationGraph()
    leaf = graph.leaf(image)
    loss = vlm_loss(params, leaf, question, answer)
    grad = backward(graph, loss).of(leaf)
    return np.zeros(image.shape) if grad is None else grad.array


# ---------------------------------------------------------------------------
# attack loss builders


def self_label_loss(params: ToyVlmParams, question: Question,
                    answer: AnswerText) -> Callable[[Tensor], Tensor]:
    """Loss over images whose label is a fixed (usually the model's own
    clean) answer; maximizing it degrades that answer's likelihood."""

    def loss_fn(image: Tensor) -> Tensor:
        return vlm_loss(params, image, question, answer)

    return loss_fn


def first_token_margin_loss(params: ToyVlmParams, question: Question,
                            gold_id: int) -> Callable[[Tensor], Tensor]:
    """Margin on the first decoded token: gold logit minus best other
    logit. Non-positive exactly when the gold token no longer wins."""
    cfg = params.config
    if not 0 <= int(gold_id) < len(cfg.vocab):
        raise ContractViolation(f"gold id {gold_id} outside vocabulary")
    mask = np.zeros((1, len(cfg.vocab)))
    mask[0, int(gold_id)] = -1e9
    mask_t = Tensor._wrap(mask)

    def loss_fn(image: Tensor) -> Tensor:
        logits = _decode_logits(params, _fused_states(params, image, question), (cfg.pad_id,))
        best_other = op_max(op_add(logits, mask_t))
        return op_sub(op_index(logits, int(gold_id)), best_other)

    return loss_fn


# ---------------------------------------------------------------------------
# training


class TrainingError(RuntimeError):
    """Raised when optimization produces non-finite values."""


@dataclass(frozen=True)
class TrainResult:
    params: ToyVlmParams
    epoch_losses: tuple


def _training_triples(dataset: Sequence[VqaSample], config: ToyVlmConfig):
    triples = []
    for s in dataset:
        image = load_image(s.image_ref)
        question = tokenize_question(s.question_text, config)
        answer = tokenize_answer(s.ground_truth_answers[0], config)
        triples.append((image, question, answer))
    return triples


def train_toy(dataset: Sequence[VqaSample], config: ToyVlmConfig, epochs: int,
              learning_rate: float, batch_size: int = 32) -> TrainResult:
    """Mini-batch gradient descent on vlm_loss over the dataset.

    Initialization and the per-epoch shuffle both derive from config.seed,
    so identical inputs give bit-identical parameters. The recorded value
    per epoch is the mean loss over that epoch's forward passes.
    """
    if len(dataset) == 0:
        raise ContractViolation("training dataset must be non-empty")
    if learning_rate <= 0:
        raise ContractViolation("learning_rate must be positive")
    if epochs < 0 or batch_size < 1:
        raise ContractViolation("epochs must be >= 0 and batch_size >= 1")

    triples = _training_triples(dataset, config)
    params = init_params(config)
    if epochs == 0:
        return TrainResult(params, ())

    shuffle_rng = make_rng(derive_seed(config.seed, "epoch-shuffle"))
    names = list(params.weights)
    epoch_losses = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(triples))
        loss_sum = 0.0
        for batch_no, start in enumerate(range(0, len(order), batch_size)):
            batch = order[start : start + batch_size]
            grad_acc = {name: np.zeros(params.weights[name].shape) for name in names}
            for idx in batch:
                image, question, answer = triples[int(idx)]
                graph = ComputationGraph()
                bound = params.bind(graph)
                try:
                    loss = vlm_loss(bound, image, question, answer)
                except ContractViolation as exc:
                    raise TrainingError(
                        f"non-finite values at epoch {epoch} batch {batch_no}: {exc}") from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch} batch {batch_no}")
                loss_sum += value
                grads = backward(graph, loss)
                for name in names:
                    g = grads.of(bound.weights[name])
                    if g is not None:
                        grad_acc[name] += g.array
            step = learning_rate / len(batch)
            params = ToyVlmParams(config, {
                name: Tensor._wrap(params.weights[name].array - step * grad_acc[name])
                for name in names
            })
        epoch_losses.append(loss_sum / len(triples))
    return TrainResult(params, tuple(epoch_losses))


# ---------------------------------------------------------------------------
# checkpoint format

CHECKPOINT_MAGIC = b"AVLM"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised when checkpoint bytes cannot be parsed."""


def save_checkpoint(params: ToyVlmParams, path: Union[str, Path]) -> None:
    """Binary checkpoint: magic, u32 version, length-prefixed canonical
    JSON config, then per weight (u32 name length, name, u32 rank, u32
    dims, raw little-endian 32-bit reals). All integers little-endian."""
    params.validate()
    cfg = json.dumps(params.config.to_dict(), sort_keys=True,
                     separators=(",", ":")).encode("utf-8")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(cfg))
    buf += cfg
    for name, tensor in params.weights.items():
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        arr = tensor.array.astype("<f4")
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: Union[str, Path]) -> ToyVlmParams:
    """Parse a checkpoint written by save_checkpoint. Weights round-trip
    bit-exactly: values are 32-bit on disk and load into exactly
    representable 64-bit tensors."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        out = blob[pos : pos + n]
        pos += n
        return out

    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    cfg_len = struct.unpack("<I", take(4))[0]
    try:
        config = ToyVlmConfig.from_dict(json.loads(take(cfg_len).decode("utf-8")))
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad config block ({exc})") from exc

    weights = {}
    while pos < len(blob):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode("utf-8")
        rank = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        raw = take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        weights[name] = Tensor._wrap(arr)
    params = ToyVlmParams(config, weights)
    try:
        params.validate()
    except ContractViolation as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    return params
