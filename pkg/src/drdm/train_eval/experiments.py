"""Experiment orchestration: the DSR augmentation pipeline, sweeps and the ablation."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import torch

from ..dsr import augment_class, build_dsr_model, fit, load_dsr_checkpoint, save_dsr_checkpoint
from .config import RunConfig
from .data import FewShotData, class_images
from .fewshot import evaluate_model, save_fewshot_checkpoint, train_fewshot
from .records import RunDir, eval_record

log = logging.getLogger(__name__)

ALPHA_OFF = "w/o"
ABLATION_ROWS = ("Framework", "+SKR", "+DSR", "DRDM")


def _null_log(record):
    pass


def alpha_label(alpha) -> str:
    return ALPHA_OFF if alpha is None else f"{alpha:g}"


# ------------------------------------------------------------------ DSR pipeline


def dsr_training_set(data: FewShotData, include_extra: bool):
    """Images and model-class indices for the augmenter.

    Base classes keep their manifest ids; classes of the reference dataset
    (pretraining only) get negative ids so they can never be augmented.
    """
    base = sorted(data.split.train_classes)
    names = data.manifest.class_names()
    X, y = class_images(data, base)
    pos = {c: i for i, c in enumerate(base)}
    class_names = [names[c] for c in base]
    class_ids = list(base)
    labels = [pos[int(c)] for c in y]
    parts = [X]
    if include_extra and data.extra is not None:
        extra = data.extra
        Xe, ye = class_images(data, range(extra.class_count), extra)
        offset = len(class_names)
        class_names += extra.class_names()
        class_ids += [-(c + 1) for c in range(extra.class_count)]
        labels += [offset + int(c) for c in ye]
        parts.append(Xe)
    return torch.cat(parts), torch.tensor(labels), class_names, class_ids


def train_dsr(cfg: RunConfig, data: FewShotData, on_record=_null_log, alpha="config"):
    """Stand-in pretraining of the denoiser, then adapter fine-tuning with L_SD + alpha * L_C.

    ``alpha=None`` fine-tunes without the label-similarity term.  Returns
    ``(model, curves)``.
    """
    d = cfg.dsr
    alpha = d.alpha if alpha == "config" else alpha
    X, y, names, ids = dsr_training_set(data, d.pretrain_on_extra)
    model = build_dsr_model(names, ids, kind=d.kind, image_size=cfg.data.image_size, widths=d.widths,
                            cond_width=d.cond_width, adapter_width=d.adapter_width, T=d.T,
                            beta_start=d.beta_start, beta_end=d.beta_end, seed=d.seed)
    t0 = time.time()
    pre = fit(model, X, y, d.pretrain_steps, lr=d.pretrain_lr, batch_size=d.batch_size, alpha=None,
              scope="backbone", seed=d.seed, cond_drop=d.cond_drop)
    base = y < len(data.split.train_classes)
    ft = fit(model, X[base], y[base], d.steps, lr=d.lr, batch_size=d.batch_size, alpha=alpha,
             scope="adapters", extra_trainable=tuple(d.extra_trainable), seed=d.seed + 1,
             cond_drop=d.cond_drop)
    on_record({"kind": "dsr", "alpha": alpha_label(alpha), "pretrain_l_sd": pre["l_sd"][-1] if pre["l_sd"] else None,
               "finetune_l_sd": ft["l_sd"][-1] if ft["l_sd"] else None,
               "finetune_l_c": ft["l_c"][-1] if ft["l_c"] else None})
    log.info("DSR trained in %.1fs (alpha=%s)", time.time() - t0, alpha_label(alpha))
    return model, {"pretrain": pre, "finetune": ft}


def augment_base_classes(model, data: FewShotData, per_class: int, out_dir, seed: int = 0,
                         steps: int | None = 50, guidance: float = 1.0) -> FewShotData:
    """Generate ``per_class`` images for every base class and attach them to ``data``."""
    out_dir = Path(out_dir)
    entries = []
    for c in sorted(data.split.train_classes):
        entries += augment_class(model, c, per_class, out_dir, out_dir / "generated.jsonl",
                                 seed=seed, steps=steps, guidance=guidance)
    return data.with_augmented(entries, root=out_dir)


def dsr_augmented_data(cfg: RunConfig, data: FewShotData, work_dir, on_record=_null_log,
                       alpha="config", model=None) -> FewShotData:
    """Train (or reuse) an augmenter and return ``data`` with generated base-class support."""
    if model is None:
        if cfg.dsr.checkpoint and alpha == "config":
            model = load_dsr_checkpoint(cfg.dsr.checkpoint)
        else:
            model, _ = train_dsr(cfg, data, on_record, alpha)
    return augment_base_classes(model, data, cfg.dsr.per_class, work_dir, seed=cfg.dsr.seed,
                                steps=cfg.dsr.sample_steps, guidance=cfg.dsr.guidance)


# ------------------------------------------------------------- train + evaluate


def train_and_evaluate(cfg: RunConfig, data: FewShotData, shots=None, on_record=_null_log, tags=None,
                       checkpoint: Path | None = None):
    """Train one classifier and evaluate it on the test split for every shot count.

    Returns ``{K: EvalReport}``.  All records go through ``on_record`` with
    ``tags`` merged in.
    """
    tags = dict(tags or {})
    fs = cfg.fewshot
    shots = tuple(shots or cfg.eval.shots)

    def tagged(rec):
        on_record({**rec, **tags})

    res = train_fewshot(fs, data, cfg.data.image_size, on_record=tagged)
    if checkpoint is not None:
        save_fewshot_checkpoint(res.model, fs, checkpoint, cfg.digest(), cfg.data.image_size)
    reports = {}
    for K in shots:
        reports[K] = evaluate_model(res.model, data, "test", cfg.eval.N, K, cfg.eval.U, cfg.eval.episodes,
                                    cfg.eval.seed, cfg.digest())
    return reports


def _shot_label(K):
    return f"{K}-shot"


# ------------------------------------------------------------------------ sweeps


def sweep_alpha(cfg: RunConfig, data: FewShotData, run: RunDir, shot: int | None = None):
    """One augmenter + classifier per alpha value; table ``alpha`` in the per-dataset layout."""
    grid = list(cfg.sweep.alpha)
    if not grid:
        raise ValueError("empty alpha grid")
    K = shot or cfg.eval.shots[0]
    out = {}
    for alpha in grid:
        label = alpha_label(alpha)
        aug = dsr_augmented_data(cfg, data, run.path / "augmented" / f"alpha_{label.replace('/', '')}",
                                 run.log, alpha=alpha)
        c = cfg.replace(fewshot={"augment": True})
        rep = train_and_evaluate(c, aug, (K,), run.log, {"sweep": "alpha", "alpha": label})[K]
        run.log(eval_record(rep, "alpha", data.manifest.name, label, "alpha", shot=K))
        out[label] = rep
    return out


def sweep_beta_w(cfg: RunConfig, data: FewShotData, run: RunDir, aug_data: FewShotData | None = None):
    """Classifier grid over (beta, W); tables ``beta_W_<K>shot`` with beta rows and W columns."""
    betas, ws = list(cfg.sweep.beta), list(cfg.sweep.W)
    if not betas or not ws:
        raise ValueError("empty beta/W grid")
    src = aug_data if aug_data is not None else data
    out = {}
    for beta in betas:
        for W in ws:
            c = cfg.replace(fewshot={"beta": beta, "W": W})
            reps = train_and_evaluate(c, src, None, run.log, {"sweep": "beta_W", "beta": beta, "W": W})
            for K, rep in reps.items():
                run.log(eval_record(rep, f"beta_W_{K}shot", f"{beta:g}", str(W), "beta\\W", shot=K))
                out[(beta, W, K)] = rep
    return out


# ---------------------------------------------------------------------- ablation


def ablation_configs(cfg: RunConfig) -> dict[str, RunConfig]:
    """Row name -> classifier config.  Rows differ only in beta/W and augmentation."""
    fs = cfg.fewshot
    return {
        "Framework": cfg.replace(fewshot={"beta": 0.0, "W": 0, "augment": False}),
        "+SKR": cfg.replace(fewshot={"beta": fs.beta, "W": fs.W, "augment": False}),
        "+DSR": cfg.replace(fewshot={"beta": 0.0, "W": 0, "augment": True}),
        "DRDM": cfg.replace(fewshot={"beta": fs.beta, "W": fs.W, "augment": True}),
    }


def run_ablation(cfg: RunConfig, data: FewShotData, run: RunDir, aug_data: FewShotData | None = None,
                 rows=ABLATION_ROWS):
    """Four-row ablation with shared seeds and paired evaluation episodes.

    For every seed all rows train with that seed and are evaluated on the same
    episode stream (``eval.seed + seed``).  Returns ``{(row, seed, K): EvalReport}``.
    """
    configs = ablation_configs(cfg)
    if aug_data is None and any(configs[r].fewshot.augment for r in rows):
        raise FileNotFoundError("ablation rows with DSR need augmented data (a DSR checkpoint)")
    out = {}
    for seed in cfg.ablation.seeds:
        for row in rows:
            c = configs[row].replace(fewshot={"seed": seed}, eval={"seed": cfg.eval.seed + seed})
            src = aug_data if c.fewshot.augment else data
            reps = train_and_evaluate(c, src, None, run.log, {"ablation": row, "seed": seed})
            for K, rep in reps.items():
                run.log(eval_record(rep, "ablation", row, _shot_label(K), "method", seed=seed, shot=K))
                out[(row, seed, K)] = rep
    return out


def save_trained_dsr(model, cfg: RunConfig, path) -> Path:
    return save_dsr_checkpoint(model, path, cfg.digest())
