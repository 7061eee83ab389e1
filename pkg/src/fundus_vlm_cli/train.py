"""Pretrain and finetune loops: per-round samples, AdamW, warmup + cosine lr, CSV metrics, epoch checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .autodiff import Tape, Tensor, backward, concat
from .checkpoint import prune_checkpoints, save_checkpoint
from .config import TrainConfig
from .errors import ContractError
from .forge import CaptionDialogue, FundusRecord, validate_corpus
from .imaging import read_image
from .model import (
    ModelParams,
    VisualEmbedding,
    assemble_llm_input,
    encode_image,
    encode_text_contrastive,
    generate,
    lm_forward,
    predict_signs,
)
from .objectives import (
    ContrastiveBatch,
    SequenceBatch,
    SignBatch,
    clip_loss,
    cls_loss,
    combined_loss,
    effective_weights,
    llm_loss,
    sign_accuracy,
    soft_labels,
)
from .optim import OptimizerState, adamw_step, lr_at
from .preprocess import preprocess_image
from .tokenizer import decode_answer, encode_answer, encode_prompt, tokenize
from .utils import chunked, make_rng

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "epoch", "lr", "clip", "cls", "llm", "total", "sign_acc"]
CHECKPOINT_PATTERN = "epoch-{epoch:04d}.vukp"

Corpus = Sequence[Union[FundusRecord, CaptionDialogue]]


@dataclass
class TrainSample:
    """One dialogue round: the image of its record, question prompt and answer tokens."""

    record_id: str
    image: np.ndarray
    prompt: List[int]
    answer: List[int]
    text: List[int]
    signs: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    metrics: pd.DataFrame
    skipped: int = 0
    checkpoints: List[Path] = field(default_factory=list)


def build_samples(corpus: Corpus, config: TrainConfig, image_root: Optional[Path] = None) -> List[TrainSample]:
    """Every dialogue round of a fundus record, or every caption dialogue, becomes one sample."""
    root = image_root or Path(".")
    images: Dict[str, np.ndarray] = {}
    samples: List[TrainSample] = []
    for item in corpus:
        if item.image not in images:
            raw = read_image(root / item.image)
            images[item.image] = preprocess_image(raw, config.contrast_factor, config.color_space)
        image = images[item.image]
        if isinstance(item, FundusRecord):
            text = tokenize(item.description, config.max_tokens).ids
            signs = np.asarray(item.signs, dtype=np.float64)
            for r in item.dialogue:
                samples.append(TrainSample(item.record_id, image, encode_prompt(r.question), encode_answer(r.answer), text, signs))
        else:
            text = tokenize(item.answer, config.max_tokens).ids
            samples.append(TrainSample(item.record_id, image, encode_prompt(item.question), encode_answer(item.answer), text))
    return samples


def sequence_targets(prompt_len: int, tokens: List[int], dropped: int) -> Tuple[np.ndarray, np.ndarray]:
    """Targets for logits rows prefix_len-1 onward; the mask covers answer tokens and EOS."""
    kept = np.asarray(tokens[dropped:], dtype=np.int64)
    mask = np.arange(len(kept)) >= max(0, prompt_len - dropped)
    return kept, mask


def _sample_sequence(sample: TrainSample, visual: VisualEmbedding, probs: np.ndarray, params: ModelParams) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    tokens = sample.prompt + sample.answer
    assembled = assemble_llm_input(visual, probs, tokens[:-1], params)
    logits = lm_forward(assembled.embeddings, params)
    start = assembled.prefix_len - 1
    rows = logits[start : start + len(tokens) - assembled.dropped]
    targets, mask = sequence_targets(len(sample.prompt), tokens, assembled.dropped)
    return rows, targets, mask


def batch_loss(
    batch: Sequence[TrainSample],
    params: ModelParams,
    config: TrainConfig,
    mode: str = "finetune",
) -> Tuple[Tensor, Dict[str, Optional[float]]]:
    """Combined objective of one batch plus its per-component values for the metrics log."""
    weights = effective_weights(config.loss_weights, mode)
    need_clip, need_cls = weights[0] > 0, weights[1] > 0

    visuals: Dict[str, VisualEmbedding] = {}
    first: Dict[str, TrainSample] = {}
    for sample in batch:
        if sample.record_id not in visuals:
            visuals[sample.record_id] = encode_image(sample.image, params)
            first[sample.record_id] = sample
    predictions = {rid: predict_signs(v, params) for rid, v in visuals.items()}

    logits_rows: List[Tensor] = []
    targets: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    for sample in batch:
        use_target = config.sign_source == "target" and sample.signs is not None
        probs = sample.signs if use_target else predictions[sample.record_id].probs
        rows, tgt, mask = _sample_sequence(sample, visuals[sample.record_id], probs, params)
        logits_rows.append(rows)
        targets.append(tgt)
        masks.append(mask)
    llm_value = llm_loss(SequenceBatch(logits_rows, targets, masks))

    unique = list(first)
    d = params.config.embed_dim
    clip_value: Optional[Tensor] = None
    if need_clip:
        img = concat([visuals[rid].pooled.reshape(1, d) for rid in unique], axis=0)
        txt = concat([encode_text_contrastive(first[rid].text, params).reshape(1, d) for rid in unique], axis=0)
        contrastive = ContrastiveBatch(img, txt, soft_labels(len(unique), config.label_smoothing), params.temperature)
        clip_value = clip_loss(contrastive)

    cls_value: Optional[Tensor] = None
    sign_acc: Optional[float] = None
    labelled = [rid for rid in unique if first[rid].signs is not None]
    if need_cls:
        if not labelled:
            raise ContractError("the sign objective needs samples with sign vectors")
        sign_logits = concat([predictions[rid].logits.reshape(1, -1) for rid in labelled], axis=0)
        sign_targets = np.stack([first[rid].signs for rid in labelled])
        cls_value = cls_loss(SignBatch(sign_logits, sign_targets))
        sign_acc = sign_accuracy(sign_logits.data, sign_targets, params.config.sign_threshold)

    total = combined_loss(clip_value, cls_value, llm_value, config.loss_weights, mode)
    values = {
        "clip": clip_value.item() if clip_value is not None else None,
        "cls": cls_value.item() if cls_value is not None else None,
        "llm": llm_value.item(),
        "total": total.item(),
        "sign_acc": sign_acc,
    }
    return total, values


def _schedule(config: TrainConfig, epochs: int, steps_per_epoch: int, max_steps: Optional[int] = None) -> Tuple[int, int]:
    total = epochs * steps_per_epoch
    if max_steps is not None:
        total = max(1, min(total, max_steps))
    warmup = min(config.warmup_epochs * steps_per_epoch, total - 1)
    return total, warmup


def _run(
    corpus: Corpus,
    params: ModelParams,
    config: TrainConfig,
    mode: str,
    epochs: int,
    image_root: Optional[Path],
    out_dir: Optional[Path],
    state: Optional[OptimizerState],
    skipped: int = 0,
    max_steps: Optional[int] = None,
) -> TrainResult:
    if epochs < 1:
        raise ContractError(f"{mode} needs at least one epoch")
    samples = build_samples(corpus, config, image_root)
    if not samples:
        raise ContractError("training corpus is empty")
    state = state or OptimizerState.zeros_like(params.tensors)
    steps_per_epoch = -(-len(samples) // config.batch_size)
    total_steps, warmup_steps = _schedule(config, epochs, steps_per_epoch, max_steps)
    peak = config.absolute_lr
    rng = make_rng(config.seed)
    logger.info(
        "%s: %d samples, %d epochs, %d steps, peak lr %.3e, seed %d",
        mode,
        len(samples),
        epochs,
        total_steps,
        peak,
        config.seed,
    )

    rows: List[Dict[str, Optional[float]]] = []
    checkpoints: List[Path] = []
    ckpt_dir = out_dir / "checkpoints" if out_dir is not None else None
    step = 0
    progress = tqdm(total=total_steps, desc=mode.capitalize())
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        for batch_idx in chunked(order.tolist(), config.batch_size):
            if step >= total_steps:
                break
            batch = [samples[i] for i in batch_idx]
            lr = lr_at(step, total_steps, warmup_steps, peak)
            params.zero_grad()
            with Tape():
                total, values = batch_loss(batch, params, config, mode)
                backward(total)
            grads = {name: t.grad for name, t in params.items()}
            adamw_step(params.tensors, grads, state, lr, config.betas, config.weight_decay, config.adam_eps)
            step += 1
            rows.append({"step": step, "epoch": epoch, "lr": lr, **values})
            logger.debug("step %d: total %.6f llm %.6f", step, values["total"], values["llm"])
            progress.update(1)
        if ckpt_dir is not None:
            meta = {
                "epoch": epoch,
                "step": step,
                "mode": mode,
                "seed": config.seed,
                "contrast_factor": config.contrast_factor,
                "color_space": config.color_space,
            }
            path = save_checkpoint(ckpt_dir / CHECKPOINT_PATTERN.format(epoch=epoch), params, state, meta)
            checkpoints.append(path)
            prune_checkpoints(ckpt_dir, config.keep_checkpoints)
        if step >= total_steps:
            break
    progress.close()
    params.zero_grad()

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(out_dir / "metrics.csv", index=False)
    checkpoints = [p for p in checkpoints if p.exists()]
    return TrainResult(params=params, state=state, metrics=metrics, skipped=skipped, checkpoints=checkpoints)


def run_pretrain(
    corpus: Corpus,
    params: ModelParams,
    config: TrainConfig,
    image_root: Optional[Path] = None,
    out_dir: Optional[Path] = None,
    state: Optional[OptimizerState] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Text-generation supervision only (loss weights forced to 0, 0, 1)."""
    if not corpus:
        raise ContractError("pretrain corpus is empty")
    return _run(corpus, params, config, "pretrain", config.pretrain_epochs, image_root, out_dir, state, max_steps=max_steps)


def run_finetune(
    corpus: Sequence[FundusRecord],
    params: ModelParams,
    config: TrainConfig,
    image_root: Optional[Path] = None,
    out_dir: Optional[Path] = None,
    state: Optional[OptimizerState] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Weighted clip + cls + llm objective; records failing validation are skipped and counted."""
    if not corpus:
        raise ContractError("finetune corpus is empty")
    report = validate_corpus(corpus, config.max_tokens)
    bad = report.invalid_ids()
    if bad:
        for v in report.violations:
            logger.warning("Skipping record %s: %s (%s)", v.record_id, v.kind, v.detail)
    kept = [r for r in corpus if r.record_id not in bad]
    if not kept:
        raise ContractError("no valid records left to finetune on")
    return _run(kept, params, config, "finetune", config.finetune_epochs, image_root, out_dir, state, skipped=len(bad), max_steps=max_steps)


# inference -------------------------------------------------------------------------------


def load_image(path: Path, contrast_factor: float = 1.0, color_space: str = "rgb") -> np.ndarray:
    return preprocess_image(read_image(path), contrast_factor, color_space)


def answer_question(image: np.ndarray, question: str, params: ModelParams, max_new: int = 128, threshold: Optional[float] = None) -> str:
    """Greedy answer to one question about an already preprocessed image."""
    prompt = encode_prompt(question)
    sequence = generate(image, prompt, params, max_new, threshold)
    return decode_answer(sequence[len(prompt) :])


def answer_log_likelihood(image: np.ndarray, question: str, answer: str, params: ModelParams) -> float:
    """Mean per-token log-probability of ``answer`` (with EOS) given the image and question."""
    visual = encode_image(image, params)
    probs = predict_signs(visual, params).probs
    sample = TrainSample("", image, encode_prompt(question), encode_answer(answer), [])
    rows, targets, mask = _sample_sequence(sample, visual, probs, params)
    loss = llm_loss(SequenceBatch([rows], [targets], [mask]))
    return -loss.item() / int(mask.sum())
