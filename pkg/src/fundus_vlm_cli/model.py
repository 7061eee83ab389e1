"""
Sign-conditioned vision-language model: vision encoder, contrastive text encoder, sign
adapter, vision projector, sign CLS-token assembly and a causal decoder language model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    exp,
    l2_normalize,
    layer_norm,
    matmul,
    scaled_dot_attention,
    sigmoid,
    swiglu_ffn,
    take,
)
from .config import INITIAL_LOGIT_SCALE, LN_EPS, OTHER_SIGN, SIGN_NAMES, ModelConfig
from .errors import ContractError, DimensionError, ValidationError
from .tokenizer import EOS
from .utils import make_rng

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("vision", "text", "adapter", "projector", "signs", "decoder", "logit_scale")


@dataclass
class ModelParams:
    """All learnable arrays, keyed by dotted name in a stable order."""

    config: ModelConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def group(self, prefix: str) -> Dict[str, Tensor]:
        return {name: t for name, t in self.tensors.items() if name == prefix or name.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.grad = None

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    @property
    def temperature(self) -> Tensor:
        return exp(self.tensors["logit_scale"])


@dataclass
class VisualEmbedding:
    patch_tokens: Tensor
    pooled: Tensor


@dataclass
class SignPrediction:
    logits: Tensor
    probs: np.ndarray

    def active(self, threshold: float) -> List[int]:
        return [k for k in range(len(SIGN_NAMES)) if self.probs[k] >= threshold]


@dataclass
class AssembledInput:
    embeddings: Tensor
    prefix_len: int
    sign_slots: List[int]
    tokens: List[int]
    dropped: int = 0
    warnings: List[str] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def _block_shapes(prefix: str, d: int, h: int) -> List[Tuple[str, Tuple[int, ...], str]]:
    return [
        (f"{prefix}.ln1.g", (d,), "ones"),
        (f"{prefix}.ln1.b", (d,), "zeros"),
        (f"{prefix}.attn.wq", (d, d), "normal"),
        (f"{prefix}.attn.wk", (d, d), "normal"),
        (f"{prefix}.attn.wv", (d, d), "normal"),
        (f"{prefix}.attn.wo", (d, d), "normal"),
        (f"{prefix}.ln2.g", (d,), "ones"),
        (f"{prefix}.ln2.b", (d,), "zeros"),
        (f"{prefix}.ffn.gate", (d, h), "normal"),
        (f"{prefix}.ffn.up", (d, h), "normal"),
        (f"{prefix}.ffn.down", (h, d), "normal"),
    ]


def param_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(name, shape, initialiser) for every parameter, in checkpoint order."""
    d, h, v, t = config.embed_dim, config.ffn_hidden, config.vocab_size, config.max_tokens
    shapes: List[Tuple[str, Tuple[int, ...], str]] = [
        ("vision.patch.w", (config.patch_dim, d), "normal"),
        ("vision.patch.b", (d,), "zeros"),
        ("vision.pos", (config.num_patches, d), "normal"),
    ]
    for i in range(config.encoder_layers):
        shapes += _block_shapes(f"vision.block{i}", d, h)
    shapes += [("vision.ln_f.g", (d,), "ones"), ("vision.ln_f.b", (d,), "zeros")]

    shapes += [("text.embed", (v, d), "normal"), ("text.pos", (t, d), "normal")]
    for i in range(config.text_layers):
        shapes += _block_shapes(f"text.block{i}", d, h)
    shapes += [("text.ln_f.g", (d,), "ones"), ("text.ln_f.b", (d,), "zeros")]

    shapes += [
        ("adapter.w", (d, config.sign_count), "normal"),
        ("adapter.b", (config.sign_count,), "zeros"),
        ("projector.w", (d, d), "normal"),
        ("projector.b", (d,), "zeros"),
        ("signs.embed", (config.sign_count, d), "normal"),
        ("decoder.embed", (v, d), "normal"),
        ("decoder.pos", (t, d), "normal"),
    ]
    for i in range(config.decoder_layers):
        shapes += _block_shapes(f"decoder.block{i}", d, h)
    shapes += [
        ("decoder.ln_f.g", (d,), "ones"),
        ("decoder.ln_f.b", (d,), "zeros"),
        ("decoder.head", (d, v), "normal"),
        ("logit_scale", (), "logit_scale"),
    ]
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialisation: N(0, init_std^2) weights, zero biases, unit gains."""
    problems = config.problems()
    if problems:
        raise ValidationError(problems)
    rng = make_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape, kind in param_shapes(config):
        if kind == "normal":
            data = rng.normal(0.0, config.init_std, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "logit_scale":
            data = np.array(INITIAL_LOGIT_SCALE)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    params = ModelParams(config=config, tensors=tensors)
    logger.debug("Initialised %d parameters in %d arrays (seed %d)", params.num_parameters, len(params), seed)
    return params


# building blocks -----------------------------------------------------------------------


def _attention(x: Tensor, params: ModelParams, prefix: str, causal: bool) -> Tensor:
    config = params.config
    q = matmul(x, params[f"{prefix}.wq"])
    k = matmul(x, params[f"{prefix}.wk"])
    v = matmul(x, params[f"{prefix}.wv"])
    dh = config.head_dim
    heads = []
    for head in range(config.heads):
        cols = (slice(None), slice(head * dh, (head + 1) * dh))
        heads.append(scaled_dot_attention(take(q, cols), take(k, cols), take(v, cols), causal=causal))
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return matmul(merged, params[f"{prefix}.wo"])


def _block(x: Tensor, params: ModelParams, prefix: str, causal: bool) -> Tensor:
    """Pre-norm transformer block: attention then SwiGLU feed-forward, both residual."""
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], LN_EPS)
    x = x + _attention(h, params, f"{prefix}.attn", causal)
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], LN_EPS)
    return x + swiglu_ffn(h, params[f"{prefix}.ffn.gate"], params[f"{prefix}.ffn.up"], params[f"{prefix}.ffn.down"])


def _stack(x: Tensor, params: ModelParams, tower: str, layers: int, causal: bool) -> Tensor:
    for i in range(layers):
        x = _block(x, params, f"{tower}.block{i}", causal)
    return layer_norm(x, params[f"{tower}.ln_f.g"], params[f"{tower}.ln_f.b"], LN_EPS)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """H x W x 3 -> (num_patches, patch_size * patch_size * 3), patches in row-major order."""
    size = image.shape[0]
    grid = size // patch_size
    blocks = image.reshape(grid, patch_size, grid, patch_size, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(grid * grid, patch_size * patch_size * 3)


# operations ----------------------------------------------------------------------------


def encode_image(image: np.ndarray, params: ModelParams) -> VisualEmbedding:
    config = params.config
    image = np.asarray(image, dtype=np.float64)
    expected = (config.image_size, config.image_size, 3)
    if image.shape != expected:
        raise DimensionError("encode_image", image.shape, expected)
    patches = Tensor(patchify(image, config.patch_size))
    x = matmul(patches, params["vision.patch.w"]) + params["vision.patch.b"] + params["vision.pos"]
    tokens = _stack(x, params, "vision", config.encoder_layers, causal=False)
    return VisualEmbedding(patch_tokens=tokens, pooled=l2_normalize(tokens.mean(axis=0)))


def encode_text_contrastive(tokens: Sequence[int], params: ModelParams) -> Tensor:
    """Unit-norm text embedding used by the contrastive objective."""
    config = params.config
    ids = list(tokens)
    if not ids:
        raise ContractError("encode_text_contrastive needs a non-empty token sequence")
    if len(ids) > config.max_tokens:
        raise ContractError(f"token sequence of length {len(ids)} exceeds max_tokens {config.max_tokens}")
    x = take(params["text.embed"], ids) + take(params["text.pos"], slice(0, len(ids)))
    x = _stack(x, params, "text", config.text_layers, causal=False)
    return l2_normalize(x.mean(axis=0))


def predict_signs(visual: VisualEmbedding, params: ModelParams) -> SignPrediction:
    d = params.config.embed_dim
    logits = matmul(visual.pooled.reshape(1, d), params["adapter.w"]).reshape(-1) + params["adapter.b"]
    return SignPrediction(logits=logits, probs=sigmoid(logits.detach()).data)


def select_sign_slots(sign_probs: Sequence[float], threshold: float) -> List[int]:
    """Signs at or above threshold in canonical order; the Other slot when none qualifies."""
    if len(sign_probs) != len(SIGN_NAMES):
        raise DimensionError("select_sign_slots", (len(sign_probs),), (len(SIGN_NAMES),))
    chosen = [k for k, p in enumerate(sign_probs) if p >= threshold]
    return chosen or [OTHER_SIGN]


def assemble_llm_input(
    visual: VisualEmbedding,
    sign_probs: Sequence[float],
    dialogue_tokens: Sequence[int],
    params: ModelParams,
    threshold: Optional[float] = None,
) -> AssembledInput:
    """[projected visual tokens] ++ [sign CLS embeddings] ++ [dialogue token embeddings]."""
    config = params.config
    threshold = config.sign_threshold if threshold is None else threshold
    if config.projector_mode == "pooled":
        source = visual.patch_tokens.mean(axis=0, keepdims=True)
    else:
        source = visual.patch_tokens
    projected = matmul(source, params["projector.w"]) + params["projector.b"]
    slots = select_sign_slots(sign_probs, threshold)
    sign_rows = take(params["signs.embed"], slots)

    prefix_len = projected.shape[0] + len(slots)
    room = config.max_tokens - prefix_len
    if room < 1:
        raise ContractError(f"visual prefix of {prefix_len} positions leaves no room below max_tokens {config.max_tokens}")
    tokens = list(dialogue_tokens)
    warnings: List[str] = []
    dropped = max(0, len(tokens) - room)
    if dropped:
        tokens = tokens[dropped:]
        message = f"dropped {dropped} leading dialogue tokens to fit max_tokens {config.max_tokens}"
        warnings.append(message)
        logger.warning("assemble_llm_input: %s", message)

    parts = [projected, sign_rows]
    if tokens:
        parts.append(take(params["decoder.embed"], tokens))
    return AssembledInput(
        embeddings=concat(parts, axis=0),
        prefix_len=prefix_len,
        sign_slots=slots,
        tokens=tokens,
        dropped=dropped,
        warnings=warnings,
    )


def lm_forward(embeddings: Tensor, params: ModelParams) -> Tensor:
    """Causal decoder over the assembled sequence; logits[j] depend only on positions <= j."""
    config = params.config
    length = embeddings.shape[0]
    if length > config.max_tokens:
        raise ContractError(f"sequence of length {length} exceeds max_tokens {config.max_tokens}")
    x = embeddings + take(params["decoder.pos"], slice(0, length))
    x = _stack(x, params, "decoder", config.decoder_layers, causal=True)
    return matmul(x, params["decoder.head"])


def generate(
    image: np.ndarray,
    prompt_tokens: Sequence[int],
    params: ModelParams,
    max_new: int,
    threshold: Optional[float] = None,
) -> List[int]:
    """
    Greedy decoding (ties go to the lowest token id). Returns prompt + generated tokens;
    stops at EOS or when the assembled sequence reaches max_tokens.
    """
    if max_new < 1:
        raise ContractError("generate needs max_new >= 1")
    config = params.config
    visual = encode_image(image, params)
    probs = predict_signs(visual, params).probs
    threshold = config.sign_threshold if threshold is None else threshold
    prefix_len = (1 if config.projector_mode == "pooled" else config.num_patches) + len(select_sign_slots(probs, threshold))
    sequence = list(prompt_tokens)
    if prefix_len + len(sequence) >= config.max_tokens:
        raise ContractError(f"prompt of {len(sequence)} tokens already fills max_tokens {config.max_tokens}")

    for _ in range(max_new):
        if prefix_len + len(sequence) >= config.max_tokens:
            break
        assembled = assemble_llm_input(visual, probs, sequence, params, threshold)
        logits = lm_forward(assembled.embeddings, params)
        next_id = int(np.argmax(logits.data[-1]))
        sequence.append(next_id)
        if next_id == EOS:
            break
    return sequence
