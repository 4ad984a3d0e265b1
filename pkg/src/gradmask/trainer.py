"""Training loop: score tokens, mask, optimize SDM + MTP, checkpoint."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_tensors, optimizer_tensors, restore_optimizer, save_tensors
from .dualmask import MaskConfig, mask_batch
from .encoder import DualEncoder, EncoderConfig, probe_intermediate_gradients
from .errors import CompatibilityError, ConfigError, NumericAbort
from .gass import GassConfig, batch_scores
from .objectives import (
    CrossModalDecoder,
    DecoderConfig,
    LossReport,
    SdmConfig,
    mtp_loss,
    sdm_loss,
    total_loss,
)
from .retrieval import evaluate
from .synth import Corpus, CorpusSplit

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gass: GassConfig = field(default_factory=GassConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    sdm: SdmConfig = field(default_factory=SdmConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    beta: float = 0.4
    lr: float = 1e-4
    eta_min: float = 0.0
    weight_decay: float = 4e-5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-3
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    score_every: int = 1
    conventional_ce: bool = False
    eval_every_epoch: bool = False

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup cannot be longer than training")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.score_every < 1:
            raise ConfigError("batch_size and score_every must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in ("encoder", "gass", "mask", "sdm", "decoder"):
            d[key] = d[key].to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"encoder": EncoderConfig, "gass": GassConfig, "mask": MaskConfig,
                  "sdm": SdmConfig, "decoder": DecoderConfig}
        for key, kind in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = kind(**d[key])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


class Model(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.encoder = DualEncoder(cfg.encoder)
        self.decoder = CrossModalDecoder(cfg.encoder.width, cfg.encoder.vocab_size, cfg.decoder)


def build_model(cfg: TrainConfig, dtype=torch.float32) -> Model:
    torch.manual_seed(cfg.seed)
    return Model(cfg).to(dtype)


def make_optimizer(model: nn.Module, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float, eta_min: float = 0.0) -> float:
    """Linear warmup reaching ``lr_max`` on the last warmup step, then cosine
    annealing that lands on ``eta_min`` at the final step."""
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr_max
    progress = min(1.0, (step - warmup_steps + 1) / span)
    return eta_min + 0.5 * (lr_max - eta_min) * (1 + math.cos(math.pi * progress))


@dataclass
class Batch:
    ids: torch.Tensor
    lengths: torch.Tensor
    images: torch.Tensor
    keys: list

    @classmethod
    def from_split(cls, split: CorpusSplit, index, dtype=torch.float32) -> "Batch":
        index = list(index)
        return cls(split.ids[index], split.lengths[index], split.images[index].to(dtype),
                   [split.pair_ids[i] for i in index])


def compute_scores(model: Model, batch: Batch, cfg: TrainConfig):
    """Normalized token scores from an unmasked traced pass; constants, no
    parameter gradients are produced."""
    layers = cfg.gass.resolve_layers(cfg.encoder.depth)
    probe, out = probe_intermediate_gradients(model.encoder, batch.ids, batch.lengths, batch.images,
                                              layers, capture=True)
    return batch_scores(out, probe, batch.lengths, cfg.gass)


def _finite_or_abort(report: LossReport, step: int):
    if not report.is_finite():
        raise NumericAbort(f"non-finite loss at step {step}", {"step": step, **report.to_dict()})


def train_step(model: Model, optimizer, batch: Batch, cfg: TrainConfig, step: int,
               s: Optional[torch.Tensor] = None, events: Optional[list] = None):
    """One optimization step; returns ``(LossReport, plans)``.

    Order: score (unless ``s`` is given) -> mask -> masked forward -> SDM ->
    decode + MTP -> backward + update. SDM compares images with the
    noise-masked captions; MTP decodes the dual-masked captions.
    """
    mark = events.append if events is not None else (lambda _: None)
    if s is None:
        s = compute_scores(model, batch, cfg).s
    mark("score")
    masked, plans = mask_batch(s, batch.ids, batch.lengths, batch.keys, cfg.mask, step, cfg.encoder.mask_id)
    # SDM sees only the noise masks; the decoder gets the dual-masked caption
    noise_view = batch.ids.clone()
    for b, plan in enumerate(plans):
        noise_view[b, list(plan.noise_positions)] = cfg.encoder.mask_id
    mark("mask")
    text = model.encoder.text(noise_view, batch.lengths)
    image = model.encoder.image(batch.images)
    mark("forward")
    l_i2t, l_t2i, l_sdm = sdm_loss(image.cls, text.eos, batch.keys, cfg.sdm.tau, cfg.sdm.epsilon)
    mark("sdm")
    rows = [b for b, p in enumerate(plans) for _ in p.informative_positions]
    cols = [i for p in plans for i in p.informative_positions]
    if rows:
        dual = model.encoder.text(masked, batch.lengths)
        hidden = model.decoder(dual.tokens, image.tokens, dual.valid)
        logits = model.decoder.logits(hidden[rows, cols])
        l_mtp = mtp_loss(logits, batch.ids[rows, cols], cfg.conventional_ce)
    else:
        l_mtp = l_sdm.new_zeros(())
    mark("mtp")
    total = total_loss(l_sdm, l_mtp, cfg.beta)
    report = LossReport(l_i2t.item(), l_t2i.item(), l_sdm.item(), l_mtp.item(), cfg.beta, total.item())
    _finite_or_abort(report, step)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    mark("update")
    return report, plans


def sdm_baseline_step(model: Model, optimizer, batch: Batch, cfg: TrainConfig, step: int) -> LossReport:
    """Plain contrastive step: unmasked captions, SDM only."""
    text = model.encoder.text(batch.ids, batch.lengths)
    image = model.encoder.image(batch.images)
    l_i2t, l_t2i, l_sdm = sdm_loss(image.cls, text.eos, batch.keys, cfg.sdm.tau, cfg.sdm.epsilon)
    report = LossReport(l_i2t.item(), l_t2i.item(), l_sdm.item(), 0.0, cfg.beta, l_sdm.item())
    _finite_or_abort(report, step)
    optimizer.zero_grad(set_to_none=True)
    l_sdm.backward()
    optimizer.step()
    return report


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(directory, model: Model, optimizer, cfg: TrainConfig, step: int, epoch: int,
                    history: list, vocab_sha256: str):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    opt_tensors, groups = optimizer_tensors(optimizer)
    tensors.update(opt_tensors)
    meta = {
        "step": step,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "optimizer_groups": groups,
        "rng": {"seed": cfg.seed, "mask_seed": cfg.mask.seed, "next_epoch": epoch, "next_step": step},
        "vocab_sha256": vocab_sha256,
    }
    d = save_tensors(directory, tensors, meta)
    with open(Path(directory) / "history.jsonl", "w") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory, optimizer_too: bool = True):
    """Returns ``(model, optimizer or None, cfg, manifest, history)``."""
    manifest, tensors = load_tensors(directory)
    cfg = TrainConfig.from_dict(manifest["config"])
    model = Model(cfg).to(tensors["model/encoder.text.pos_emb"].dtype)
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    optimizer = None
    if optimizer_too:
        optimizer = make_optimizer(model, cfg)
        restore_optimizer(optimizer, tensors, manifest["optimizer_groups"])
    hist_path = Path(directory) / "history.jsonl"
    history = [json.loads(l) for l in hist_path.read_text().splitlines()] if hist_path.exists() else []
    return model, optimizer, cfg, manifest, history


def check_compatible(corpus: Corpus, cfg: TrainConfig, vocab_sha256: Optional[str] = None):
    if vocab_sha256 is not None and corpus.vocab.digest() != vocab_sha256:
        raise CompatibilityError("corpus vocabulary differs from the checkpoint's")
    if max(corpus.vocab.word_to_id.values()) >= cfg.encoder.vocab_size:
        raise CompatibilityError("corpus vocabulary does not fit the encoder")
    if tuple(corpus.manifest["image_grid"]) != cfg.encoder.image_grid:
        raise CompatibilityError("corpus image grid differs from the encoder's")
    if corpus.manifest["max_text_len"] > cfg.encoder.max_text_len:
        raise CompatibilityError("corpus captions are longer than the encoder allows")


# -- fit ------------------------------------------------------------------------


@dataclass
class FitResult:
    history: list
    checkpoint: Path
    model: Model
    final: dict = field(default_factory=dict)

    def epoch_means(self) -> list:
        return [r["mean_total"] for r in self.history if r["kind"] == "epoch"]


def score_split(model: Model, split: CorpusSplit, cfg: TrainConfig, batch_size: int = 250) -> torch.Tensor:
    """Normalized token scores (n, N) for every caption of a split."""
    dtype = next(model.parameters()).dtype
    rows = []
    for start in range(0, len(split), batch_size):
        idx = range(start, min(start + batch_size, len(split)))
        rows.append(compute_scores(model, Batch.from_split(split, idx, dtype), cfg).s)
    return torch.cat(rows)


def noise_score_gap(model: Model, split: CorpusSplit, cfg: TrainConfig) -> dict:
    """Mean normalized score over known-noise tokens vs the remaining content tokens."""
    s = score_split(model, split, cfg)
    noise, clean, noise_slot, clean_slot = [], [], [], []
    for b, length in enumerate(split.lengths.tolist()):
        noisy = set(split.noise_truth[b])
        slots = set(split.slot_positions[b].values())
        for i in range(1, length - 1):
            (noise if i in noisy else clean).append(float(s[b, i]))
            if i in slots:
                (noise_slot if i in noisy else clean_slot).append(float(s[b, i]))
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return {
        "noise_mean": mean(noise),
        "clean_mean": mean(clean),
        "noise_count": len(noise),
        "clean_count": len(clean),
        "clean_slot_mean": mean(clean_slot),
        "clean_slot_count": len(clean_slot),
    }


def fit(corpus: Corpus, cfg: TrainConfig, out_dir, resume=None, stop_after_epoch: Optional[int] = None,
        mask_audit=None, progress: bool = False) -> FitResult:
    """Train on the corpus' train split, checkpointing after every epoch.

    ``resume`` names a checkpoint directory written by an earlier call;
    ``stop_after_epoch`` ends the run early, as if interrupted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    check_compatible(corpus, cfg)
    train = corpus.split("train", cfg.encoder.max_text_len, cfg.encoder.pad_id)
    n = len(train)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    if resume is not None:
        model, optimizer, saved_cfg, manifest, history = load_checkpoint(resume)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise ConfigError("resume config differs from the checkpoint's")
        check_compatible(corpus, cfg, manifest["vocab_sha256"])
        start_epoch, step = manifest["epoch"], manifest["step"]
    else:
        model = build_model(cfg)
        optimizer = make_optimizer(model, cfg)
        start_epoch, step, history = 0, 0, []

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    audit = open(mask_audit, "a") if mask_audit else None
    score_cache: dict = {}
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    checkpoint = Path(resume) if resume is not None else out
    try:
        for epoch in range(start_epoch, last_epoch):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            epoch_reports = []
            for start in range(0, n, cfg.batch_size):
                batch = Batch.from_split(train, order[start : start + cfg.batch_size])
                lr = lr_at(step, total_steps, warmup_steps, cfg.lr, cfg.eta_min)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                s = _cached_scores(model, batch, cfg, step, score_cache)
                try:
                    report, plans = train_step(model, optimizer, batch, cfg, step, s=s)
                except NumericAbort as e:
                    (out / "abort.json").write_text(json.dumps(e.diagnostics, indent=2) + "\n")
                    raise
                rec = {"kind": "step", "step": step, "epoch": epoch, "lr": lr, **report.to_dict()}
                history.append(rec)
                epoch_reports.append(report)
                with open(metrics_path, "a") as f:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
                if audit is not None:
                    for key, plan in zip(batch.keys, plans):
                        audit.write(json.dumps({"step": step, "pair_id": key, **plan.to_dict()}) + "\n")
                step += 1
            summary = {
                "kind": "epoch",
                "epoch": epoch,
                "mean_total": float(np.mean([r.total for r in epoch_reports])),
                "mean_sdm": float(np.mean([r.l_sdm for r in epoch_reports])),
                "mean_mtp": float(np.mean([r.l_mtp for r in epoch_reports])),
            }
            if cfg.eval_every_epoch and corpus.manifest["counts"].get("test"):
                test = corpus.split("test", cfg.encoder.max_text_len, cfg.encoder.pad_id)
                summary["test"] = evaluate(model.encoder, test)
            history.append(summary)
            with open(metrics_path, "a") as f:
                f.write(json.dumps(summary, sort_keys=True) + "\n")
            if progress:
                log.info("epoch %d  total %.4f  sdm %.4f  mtp %.5f", epoch + 1, summary["mean_total"],
                         summary["mean_sdm"], summary["mean_mtp"])
            checkpoint = save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:03d}", model, optimizer,
                                         cfg, step, epoch + 1, history, corpus.vocab.digest())
    finally:
        if audit is not None:
            audit.close()
    return FitResult(history, checkpoint, model)


def _cached_scores(model, batch: Batch, cfg: TrainConfig, step: int, cache: dict):
    """Fresh scores every ``score_every`` steps; in between, reuse each
    caption's last scores and only probe captions never scored before."""
    if cfg.score_every == 1:
        return None
    if step % cfg.score_every == 0:
        s = compute_scores(model, batch, cfg).s
    else:
        missing = [b for b, k in enumerate(batch.keys) if k not in cache]
        if missing:
            sub = Batch(batch.ids[missing], batch.lengths[missing], batch.images[missing],
                        [batch.keys[b] for b in missing])
            for k, row in zip(sub.keys, compute_scores(model, sub, cfg).s):
                cache[k] = row
        s = torch.stack([cache[k] for k in batch.keys])
    for k, row in zip(batch.keys, s):
        cache[k] = row
    return s


def evaluate_checkpoint(checkpoint, corpus: Corpus, split: str = "test") -> dict:
    model, _, cfg, manifest, _ = load_checkpoint(checkpoint, optimizer_too=False)
    check_compatible(corpus, cfg, manifest["vocab_sha256"])
    data = corpus.split(split, cfg.encoder.max_text_len, cfg.encoder.pad_id)
    return evaluate(model.encoder, data)


def dump_scores(checkpoint, corpus: Corpus, out_path, split: str = "train", limit: Optional[int] = None) -> int:
    """One JSON line per caption: tokens, normalized scores, known noise positions."""
    model, _, cfg, manifest, _ = load_checkpoint(checkpoint, optimizer_too=False)
    check_compatible(corpus, cfg, manifest["vocab_sha256"])
    data = corpus.split(split, cfg.encoder.max_text_len, cfg.encoder.pad_id)
    if limit is not None:
        data = data.subset(range(min(limit, len(data))))
    s = score_split(model, data, cfg)
    with open(out_path, "w") as f:
        for b in range(len(data)):
            length = int(data.lengths[b])
            f.write(json.dumps({
                "pair_id": data.pair_ids[b],
                "tokens": corpus.vocab.decode(data.ids[b, :length].tolist()),
                "scores": [round(float(x), 6) for x in s[b, :length]],
                "noise_truth": list(data.noise_truth[b]),
            }) + "\n")
    return len(data)
