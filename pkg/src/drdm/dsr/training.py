"""Noise-prediction training, the DSR objective and augmentation sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..metric_losses import embedding_ms_loss
from .nets import LabelEncoder, MLPDenoiser, UNetDenoiser, adapter_parameters, pool_tokens
from .schedule import NoiseSchedule, forward_diffuse, make_schedule, respace, sample

log = logging.getLogger(__name__)


@dataclass
class DiffusionBatch:
    x0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    cls: torch.Tensor  # index into the model's class list
    template: torch.Tensor
    drop: torch.Tensor | None = None  # rows trained on the null prompt


class DSRModel(nn.Module):
    """Denoiser plus label encoder conditioned on class prompts."""

    def __init__(self, denoiser: nn.Module, label_encoder: LabelEncoder, class_names: list[str],
                 schedule: NoiseSchedule, class_ids: list[int] | None = None):
        super().__init__()
        self.denoiser = denoiser
        self.label_encoder = label_encoder
        self.class_names = list(class_names)
        self.class_ids = list(class_ids) if class_ids is not None else list(range(len(class_names)))
        self.schedule = schedule

    def encode(self, use_adapters=True):
        return self.label_encoder(self.class_names, use_adapter=use_adapters)

    def condition(self, cls, template, use_adapters=True, encoded=None, drop=None):
        """Prompt tokens and mask per row; rows flagged in ``drop`` get the null prompt."""
        tokens, mask = encoded if encoded is not None else self.encode(use_adapters)
        cond, cmask = tokens[cls, template], mask[cls, template]
        if drop is not None and drop.any():
            null, null_mask = null_condition(cond)
            cond = torch.where(drop[:, None, None], null, cond)
            cmask = torch.where(drop[:, None], null_mask, cmask)
        return cond, cmask

    def predict(self, x_t, t, cls, template, use_adapters=True, encoded=None, drop=None):
        cond, mask = self.condition(cls, template, use_adapters, encoded, drop)
        return self.denoiser(x_t, t, cond, mask, use_adapters=use_adapters)

    def trainable_parameters(self, scope: str = "adapters", extra: tuple[str, ...] = ()):
        if scope == "all":
            return [p for p in self.parameters()]
        if scope == "backbone":
            ids = {id(p) for p in adapter_parameters(self)}
            return [p for p in self.parameters() if id(p) not in ids]
        if scope != "adapters":
            raise ValueError(f"unknown trainable scope {scope!r}")
        params = adapter_parameters(self)
        ids = {id(p) for p in params}
        for name, p in self.named_parameters():
            if any(name.startswith(prefix) for prefix in extra) and id(p) not in ids:
                params.append(p)
        return params


def null_condition(like: torch.Tensor):
    """The empty prompt: one all-zero token, shaped like ``like`` ([B, L, D])."""
    null = torch.zeros_like(like)
    mask = torch.zeros(like.shape[:2], dtype=torch.bool, device=like.device)
    mask[:, 0] = True
    return null, mask


def build_dsr_model(class_names, class_ids=None, kind="unet", image_size=32, widths=(32, 64),
                    cond_width=64, adapter_width=16, T=1000, beta_start=1e-4, beta_end=0.02,
                    dim=2, hidden=128, seed=0) -> DSRModel:
    torch.manual_seed(seed)
    encoder = LabelEncoder(class_names, width=cond_width, adapter_width=adapter_width)
    if kind == "unet":
        denoiser = UNetDenoiser(widths=tuple(widths), cond_width=cond_width,
                                adapter_width=adapter_width, image_size=image_size)
    elif kind == "mlp":
        denoiser = MLPDenoiser(dim=dim, hidden=hidden, cond_width=cond_width, adapter_width=adapter_width)
    else:
        raise ValueError(f"unknown denoiser kind {kind!r}")
    model = DSRModel(denoiser, encoder, class_names, make_schedule(T, beta_start, beta_end), class_ids)
    model.arch = dict(kind=kind, image_size=image_size, widths=list(widths), cond_width=cond_width,
                      adapter_width=adapter_width, dim=dim, hidden=hidden)
    return model


def make_batch(x0, cls, schedule: NoiseSchedule, generator: torch.Generator, n_templates: int) -> DiffusionBatch:
    B = len(x0)
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    template = torch.randint(0, n_templates, (B,), generator=generator)
    return DiffusionBatch(x0, t, eps, cls, template)


def noise_prediction_loss(model_fn, batch: DiffusionBatch, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between predicted and true noise (averaged over all elements).

    ``model_fn(x_t, t, batch)`` returns the noise prediction.
    """
    x_t = forward_diffuse(batch.x0, batch.t, batch.eps, schedule)
    pred = model_fn(x_t, batch.t, batch)
    if not torch.isfinite(pred).all():
        raise FloatingPointError("non-finite noise prediction")
    return (pred - batch.eps).pow(2).mean()


def label_similarity_loss(model: DSRModel, encoded=None) -> torch.Tensor:
    """MS loss over the pooled prompt embeddings of every (class, template) pair."""
    tokens, mask = encoded if encoded is not None else model.encode()
    n_cls, P = tokens.shape[:2]
    pooled = pool_tokens(tokens, mask).reshape(n_cls * P, -1)
    labels = torch.arange(n_cls).repeat_interleave(P)
    return embedding_ms_loss(pooled, labels)


def dsr_losses(model: DSRModel, batch: DiffusionBatch, alpha: float | None):
    """Return ``(L_SD, L_C, L_DSR)``; ``alpha=None`` drops the label term entirely."""
    if alpha is not None and alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    encoded = model.encode()

    def fn(x_t, t, b):
        return model.predict(x_t, t, b.cls, b.template, encoded=encoded, drop=b.drop)

    l_sd = noise_prediction_loss(fn, batch, model.schedule)
    if alpha is None:
        return l_sd, None, l_sd
    l_c = label_similarity_loss(model, encoded)
    return l_sd, l_c, l_sd + alpha * l_c


def dsr_training_step(model: DSRModel, batch: DiffusionBatch, alpha: float | None,
                      optimizer: torch.optim.Optimizer):
    optimizer.zero_grad(set_to_none=True)
    l_sd, l_c, total = dsr_losses(model, batch, alpha)
    total.backward()
    optimizer.step()
    return l_sd.item(), (None if l_c is None else l_c.item()), total.item()


def freeze_except(model: nn.Module, trainable: list[torch.nn.Parameter]):
    keep = {id(p) for p in trainable}
    for p in model.parameters():
        p.requires_grad_(id(p) in keep)


def fit(model: DSRModel, images: torch.Tensor, cls: torch.Tensor, steps: int, lr: float = 1e-3,
        batch_size: int = 32, alpha: float | None = None, scope: str = "adapters",
        extra_trainable: tuple[str, ...] = (), seed: int = 0, log_every: int = 0,
        weight_decay: float = 0.0, cond_drop: float = 0.0) -> dict:
    """Train ``model`` on ``(images, cls)`` and return loss curves.

    ``scope="backbone"`` trains everything except adapters (the stand-in
    pretraining stage); ``scope="adapters"`` freezes the rest.  A positive
    ``cond_drop`` swaps that fraction of prompts for the null prompt, which
    is what guided sampling needs.
    """
    if not 0.0 <= cond_drop < 1.0:
        raise ValueError(f"cond_drop must be in [0, 1), got {cond_drop}")
    params = model.trainable_parameters(scope, extra_trainable)
    freeze_except(model, params)
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    n_templates = len(model.label_encoder.templates)
    curves = {"l_sd": [], "l_c": [], "l_dsr": []}
    model.train()
    for step in range(steps):
        idx = torch.randint(0, len(images), (min(batch_size, len(images)),), generator=gen)
        batch = make_batch(images[idx], cls[idx], model.schedule, gen, n_templates)
        if cond_drop > 0:
            batch.drop = torch.rand(len(idx), generator=gen) < cond_drop
        l_sd, l_c, total = dsr_training_step(model, batch, alpha, opt)
        curves["l_sd"].append(l_sd)
        curves["l_c"].append(l_c)
        curves["l_dsr"].append(total)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d  L_SD %.4f  L_C %s  L_DSR %.4f", step + 1, l_sd,
                     "-" if l_c is None else f"{l_c:.4f}", total)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return curves


def generate(model: DSRModel, cls_index: int, count: int, seed: int, steps: int | None = None,
             template: int | None = None, batch_size: int = 256, guidance: float = 1.0) -> torch.Tensor:
    """Sample ``count`` images of model class ``cls_index`` (deterministic in ``seed``).

    ``guidance`` other than 1 extrapolates from the null-prompt prediction
    towards the class prediction, eps_null + g * (eps_cls - eps_null); it only
    makes sense for a model trained with ``cond_drop > 0``.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if not 0 <= cls_index < len(model.class_names):
        raise KeyError(f"class index {cls_index} not in model")
    model.eval()
    schedule = respace(model.schedule, steps) if steps else model.schedule
    gen = torch.Generator().manual_seed(seed)
    n_templates = len(model.label_encoder.templates)
    with torch.no_grad():
        encoded = model.encode()
        outs = []
        done = 0
        while done < count:
            b = min(batch_size, count - done)
            cls = torch.full((b,), cls_index, dtype=torch.long)
            if template is None:
                tmpl = torch.arange(done, done + b) % n_templates
            else:
                tmpl = torch.full((b,), template, dtype=torch.long)
            cond = model.condition(cls, tmpl, encoded=encoded)

            def fn(x, t, c, _cond=cond):
                eps = model.denoiser(x, t, _cond[0], _cond[1])
                if guidance == 1.0:
                    return eps
                eps_null = model.denoiser(x, t, *null_condition(_cond[0]))
                return eps_null + guidance * (eps - eps_null)

            outs.append(sample(fn, schedule, cond, b, gen, model.denoiser.sample_shape))
            done += b
    return torch.cat(outs)


# --------------------------------------------------------------------------- checkpoints

DSR_CKPT_FORMAT = "drdm.dsr"
CKPT_VERSION = 1


def save_dsr_checkpoint(model: DSRModel, path, config_hash: str = "", extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": DSR_CKPT_FORMAT,
        "version": CKPT_VERSION,
        "arch": model.arch,
        "class_names": model.class_names,
        "class_ids": model.class_ids,
        "templates": list(model.label_encoder.templates),
        "schedule": model.schedule.to_dict(),
        "state": model.state_dict(),
        "config_hash": config_hash,
        "extra": extra or {},
    }, path)
    return path


def load_dsr_checkpoint(path) -> DSRModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"DSR checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != DSR_CKPT_FORMAT:
        raise ValueError(f"{path} is not a DSR checkpoint")
    if blob.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    arch = blob["arch"]
    sched = NoiseSchedule.from_dict(blob["schedule"])
    model = build_dsr_model(blob["class_names"], blob["class_ids"], kind=arch["kind"],
                            image_size=arch["image_size"], widths=arch["widths"],
                            cond_width=arch["cond_width"], adapter_width=arch["adapter_width"],
                            T=sched.T, dim=arch["dim"], hidden=arch["hidden"])
    model.schedule = sched
    model.load_state_dict(blob["state"])
    model.config_hash = blob.get("config_hash", "")
    model.eval()
    return model


def images_to_tensor(arrays) -> torch.Tensor:
    """Stack HxWx3 float arrays into a (B, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous().float()
