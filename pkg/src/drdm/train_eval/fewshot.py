"""Episodic training and evaluation of the channel-attention few-shot classifier."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..dataspec import ClassPool, episode_rng, sample_episode
from ..skr import Backbone, SKRClassifier, classification_loss, pooled_embeddings
from .config import FewShotSection
from .data import FewShotData
from .metrics import EvalReport, summarize

log = logging.getLogger(__name__)

FS_CKPT_FORMAT = "drdm.fewshot"
CKPT_VERSION = 1


def build_classifier(cfg: FewShotSection, image_size: int = 32, seed: int | None = None) -> SKRClassifier:
    torch.manual_seed(cfg.seed if seed is None else seed)
    backbone = Backbone(widths=tuple(cfg.backbone_widths), pooled_stages=cfg.pooled_stages,
                        image_size=image_size, out_scale=cfg.feature_scale)
    return SKRClassifier(backbone)


def make_optimizer(model: SKRClassifier, cfg: FewShotSection) -> torch.optim.SGD:
    return torch.optim.SGD(
        [{"params": model.backbone.parameters(), "lr": cfg.lr_backbone},
         {"params": model.head_parameters(), "lr": cfg.lr_heads}],
        lr=cfg.lr_backbone, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )


def episode_step(model, data: FewShotData, ep, beta: float):
    """Forward one training episode; returns ``(loss, ce, skr, accuracy)``."""
    S, Q, E = data.episode_tensors(ep)
    feats = model.features(torch.cat([S, Q, E]))
    nS, nQ = len(S), len(Q)
    fs, fq, fe = feats[:nS], feats[nS:nS + nQ], feats[nS + nQ:]
    probs = model.posterior_from_maps(fs, fq, ep.shot)
    q_labels = torch.tensor([i.label for i in ep.query])
    s_labels = torch.tensor([i.label for i in ep.support])
    e_labels = torch.tensor([i.label for i in ep.external], dtype=torch.long)
    loss, ce, skr = classification_loss(probs, q_labels, fs, s_labels, fe, e_labels, beta)
    acc = (probs.argmax(1) == q_labels).float().mean().item()
    return loss, ce, skr, acc


@dataclass
class TrainResult:
    model: SKRClassifier
    best_state: dict
    best_val: float
    best_epoch: int
    losses: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)


def train_fewshot(cfg: FewShotSection, data: FewShotData, image_size: int = 32,
                  val_seed: int = 4321, on_record=None) -> TrainResult:
    """Episodic training with validation-based checkpoint selection.

    ``on_record`` receives one dict per training episode and per epoch-end
    validation, in order.
    """
    model = build_classifier(cfg, image_size)
    opt = make_optimizer(model, cfg)
    base = data.pool("train")
    extra = data.extra_pool() if cfg.W > 0 else None
    beta = cfg.beta
    result = TrainResult(model, copy.deepcopy(model.state_dict()), -1.0, -1)

    def emit(rec):
        result.records.append(rec)
        if on_record is not None:
            on_record(rec)

    gidx = 0
    for epoch in range(cfg.epochs):
        model.train()
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(episode_rng(cfg.seed, "train", gidx), base, extra, cfg.N, cfg.K, cfg.U, cfg.W)
            loss, ce, skr, acc = episode_step(model, data, ep, beta)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.losses.append(loss.item())
            emit({"kind": "train_episode", "epoch": epoch, "episode": gidx, "loss": loss.item(),
                  "ce": ce.item(), "skr": None if skr is None else skr.item(), "acc": acc})
            gidx += 1
        if cfg.val_episodes > 0 and data.split.val_classes:
            rep = evaluate_model(model, data, "val", cfg.N, cfg.K, cfg.U, cfg.val_episodes, val_seed)
            val = rep.mean_top1
        else:
            val = float(epoch)  # no validation split: keep the latest epoch
        result.val_history.append(val)
        emit({"kind": "val", "epoch": epoch, "acc": val})
        if val > result.best_val:
            result.best_val, result.best_epoch = val, epoch
            result.best_state = copy.deepcopy(model.state_dict())
        log.info("epoch %d  loss %.4f  val %.2f", epoch, np.mean(result.losses[-cfg.episodes_per_epoch:]), val)
    model.load_state_dict(result.best_state)
    model.eval()
    return result


@torch.no_grad()
def pool_features(model: SKRClassifier, data: FewShotData, pool: ClassPool, batch_size: int = 256):
    """Feature maps for every real image of ``pool`` keyed by path (eval mode)."""
    model.eval()
    paths = [p for c in pool.classes for p in pool.paths[c]]
    feats = {}
    for i in range(0, len(paths), batch_size):
        chunk = paths[i:i + batch_size]
        imgs = torch.stack([data.store.get(pool.manifest.name, p) for p in chunk])
        for p, f in zip(chunk, model.features(imgs)):
            feats[p] = f
    return feats


@torch.no_grad()
def evaluate_model(model: SKRClassifier, data: FewShotData, subset: str, N: int, K: int, U: int,
                   episodes: int, seed: int, config_hash: str = "") -> EvalReport:
    """Top-1 accuracy over ``episodes`` seeded episodes drawn from ``subset`` classes."""
    if episodes < 2:
        raise ValueError("episode_count must be >= 2")
    pool = data.pool(subset) if subset != "train" else ClassPool.from_split(data.manifest, data.split, "train")
    if len(pool.classes) < N:
        raise ValueError(f"{subset} split has {len(pool.classes)} classes, need N={N}")
    feats = pool_features(model, data, pool)
    accs, hashes = [], []
    for i in range(episodes):
        ep = sample_episode(episode_rng(seed, f"{subset}-{N}w{K}s{U}q", i), pool, None, N, K, U, 0)
        fs = torch.stack([feats[it.path] for it in ep.support])
        fq = torch.stack([feats[it.path] for it in ep.query])
        probs = model.posterior_from_maps(fs, fq, K)
        labels = torch.tensor([it.label for it in ep.query])
        accs.append((probs.argmax(1) == labels).float().mean().item())
        hashes.append(ep.digest())
    return summarize(accs, config_hash, hashes)


@torch.no_grad()
def pooled_pool_embeddings(model: SKRClassifier, data: FewShotData, subset: str = "test"):
    pool = data.pool(subset)
    feats = pool_features(model, data, pool)
    labels = [c for c in pool.classes for _ in pool.paths[c]]
    maps = torch.stack([feats[p] for c in pool.classes for p in pool.paths[c]])
    return pooled_embeddings(maps).numpy(), np.asarray(labels)


def save_fewshot_checkpoint(model: SKRClassifier, cfg: FewShotSection, path, config_hash="",
                            image_size=32, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": FS_CKPT_FORMAT,
        "version": CKPT_VERSION,
        "fewshot": vars(cfg) | {"backbone_widths": list(cfg.backbone_widths)},
        "image_size": image_size,
        "state": model.state_dict(),
        "config_hash": config_hash,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
        "extra": extra or {},
    }, path)
    return path


def load_fewshot_checkpoint(path) -> tuple[SKRClassifier, FewShotSection, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"few-shot checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != FS_CKPT_FORMAT:
        raise ValueError(f"{path} is not a few-shot checkpoint")
    if blob.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    d = dict(blob["fewshot"])
    d["backbone_widths"] = tuple(d["backbone_widths"])
    cfg = FewShotSection(**d)
    model = build_classifier(cfg, blob["image_size"])
    model.load_state_dict(blob["state"])
    model.eval()
    return model, cfg, blob
