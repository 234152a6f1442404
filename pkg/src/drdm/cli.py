"""Command-line entry point.

Every command takes ``--config FILE`` (YAML), any number of
``--set section.key=value`` overrides and ``--out DIR``.  Without ``--out``
runs go to ``$DRDM_OUT_ROOT/<command>-<config hash>`` (``runs/`` when the
variable is unset).  Existing run directories are never overwritten unless
``--force`` is given.

Exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .dataspec import load_manifest, write_manifest
from .dsr import augment_class, load_dsr_checkpoint
from .train_eval.config import ConfigError, load_config
from .train_eval.data import generate_data, load_fewshot_data
from .train_eval.experiments import (
    dsr_augmented_data, run_ablation, save_trained_dsr, sweep_alpha, sweep_beta_w, train_dsr,
)
from .train_eval.fewshot import (
    evaluate_model, load_fewshot_checkpoint, pooled_pool_embeddings, save_fewshot_checkpoint,
    train_fewshot,
)
from .train_eval.metrics import compactness_metrics
from .train_eval.records import RunDir, RunDirError, eval_record, render_tables, write_embeddings

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
OUT_ROOT_ENV = "DRDM_OUT_ROOT"

log = logging.getLogger("drdm")


class MissingArtifact(FileNotFoundError):
    pass


def _require(path, what):
    if path is None:
        raise MissingArtifact(f"{what} not given")
    if not Path(path).exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return Path(path)


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{args.command}-{cfg.digest()}"


def _open_run(args, cfg) -> RunDir:
    run = RunDir(_out_dir(args, cfg), force=args.force)
    run.snapshot_config(cfg)
    return run


def _data_dir(args, run: RunDir) -> Path:
    return Path(args.data) if args.data else run.path / "data"


def _data(args, cfg, run):
    return load_fewshot_data(cfg, _data_dir(args, run))


def _maybe_augment(cfg, data, run):
    if not (cfg.dsr.enabled and cfg.fewshot.augment):
        return data
    ckpt = _require(cfg.dsr.checkpoint, "DSR checkpoint (dsr.checkpoint)")
    return dsr_augmented_data(cfg, data, run.path / "augmented", run.log,
                              model=load_dsr_checkpoint(ckpt))


# ------------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    run = _open_run(args, cfg)
    main, extra = generate_data(cfg.data, run.path)
    print(json.dumps({"manifest": str(main), "extra_manifest": None if extra is None else str(extra)}))


def cmd_train_dsr(args, cfg):
    run = _open_run(args, cfg)
    data = _data(args, cfg, run)
    model, curves = train_dsr(cfg, data, run.log)
    for stage, c in curves.items():
        for step, (sd, lc, tot) in enumerate(zip(c["l_sd"], c["l_c"], c["l_dsr"])):
            run.log({"kind": "dsr_step", "stage": stage, "step": step, "l_sd": sd, "l_c": lc, "l_dsr": tot})
    path = save_trained_dsr(model, cfg, run.checkpoints / "dsr.pt")
    print(json.dumps({"checkpoint": str(path)}))


def cmd_augment(args, cfg):
    ckpt = _require(args.ckpt, "DSR checkpoint")
    model = load_dsr_checkpoint(ckpt)
    out = Path(args.out) if args.out else _out_dir(args, cfg)
    manifest = out / "generated.jsonl"
    if manifest.is_file():
        prefix = f"generated/c{args.class_id:03d}_s{cfg.dsr.seed}_"
        existing = load_manifest(manifest, contiguous=False)
        clash = [e for e in existing.entries if e.path.startswith(prefix)]
        if clash and not args.force:
            raise RunDirError(f"{out} already holds generated images for class {args.class_id} "
                              f"(use --force to overwrite)")
        if clash:
            keep = [e for e in existing.entries if not e.path.startswith(prefix)]
            if keep:
                existing.entries = keep
                write_manifest(existing, manifest)
            else:
                manifest.unlink()
    entries = augment_class(model, args.class_id, args.n, out, manifest, seed=cfg.dsr.seed,
                            steps=cfg.dsr.sample_steps, guidance=cfg.dsr.guidance)
    print(json.dumps({"manifest": str(manifest), "count": len(entries)}))


def cmd_train_fs(args, cfg):
    run = _open_run(args, cfg)
    data = _maybe_augment(cfg, _data(args, cfg, run), run)
    res = train_fewshot(cfg.fewshot, data, cfg.data.image_size, on_record=run.log)
    path = save_fewshot_checkpoint(res.model, cfg.fewshot, run.checkpoints / "fewshot.pt", cfg.digest(),
                                   cfg.data.image_size, extra={"best_epoch": res.best_epoch,
                                                               "best_val": res.best_val})
    print(json.dumps({"checkpoint": str(path), "best_val": res.best_val, "best_epoch": res.best_epoch}))


def cmd_eval(args, cfg):
    ckpt = _require(args.ckpt, "few-shot checkpoint")
    model, _, _ = load_fewshot_checkpoint(ckpt)
    run = _open_run(args, cfg)
    data = _data(args, cfg, run)
    out = {}
    for K in cfg.eval.shots:
        rep = evaluate_model(model, data, "test", cfg.eval.N, K, cfg.eval.U, cfg.eval.episodes,
                             cfg.eval.seed, cfg.digest())
        run.log(eval_record(rep, "eval", f"{cfg.eval.N}-way", f"{K}-shot", "setting", shot=K))
        out[f"{K}-shot"] = rep.cell()
    X, y = pooled_pool_embeddings(model, data, "test")
    emb = write_embeddings(run.embeddings / "test.bin", X, y)
    comp = compactness_metrics(X, y)
    run.log({"kind": "compactness", "R_intra_mean": comp.R_intra_mean, "R_inter_mean": comp.R_inter_mean,
             "rho_proxy": comp.rho_proxy, "embedding_path": str(emb.relative_to(run.path))})
    render_tables(run)
    out["rho_proxy"] = comp.rho_proxy
    print(json.dumps(out))


def cmd_sweep(args, cfg):
    run = _open_run(args, cfg)
    data = _data(args, cfg, run)
    if args.which in ("alpha", "all"):
        sweep_alpha(cfg, data, run)
    if args.which in ("beta-W", "all"):
        sweep_beta_w(cfg, data, run, _maybe_augment(cfg, data, run) if cfg.fewshot.augment else None)
    print(json.dumps({"tables": [str(p) for p in render_tables(run)]}))


def cmd_ablate(args, cfg):
    run = _open_run(args, cfg)
    data = _data(args, cfg, run)
    if cfg.dsr.checkpoint:
        model = load_dsr_checkpoint(_require(cfg.dsr.checkpoint, "DSR checkpoint (dsr.checkpoint)"))
    else:
        model, _ = train_dsr(cfg, data, run.log)
        save_trained_dsr(model, cfg, run.checkpoints / "dsr.pt")
    aug = dsr_augmented_data(cfg, data, run.path / "augmented", run.log, model=model)
    run_ablation(cfg, data, run, aug)
    print(json.dumps({"tables": [str(p) for p in render_tables(run)]}))


def cmd_report(args, cfg):
    run = RunDir.open(_require(args.run, "run directory"))
    print(json.dumps({"tables": [str(p) for p in render_tables(run)]}))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dsr": cmd_train_dsr,
    "augment": cmd_augment,
    "train-fs": cmd_train_fs,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. fewshot.beta=0.3 (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="drdm", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic datasets")
    for name, text in [("train-dsr", "train the diffusion augmenter"),
                       ("train-fs", "episodic training of the few-shot classifier"),
                       ("ablate", "Framework / +SKR / +DSR / DRDM ablation")]:
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--data", help="dataset directory (from gen-data); default <out>/data")
    s = sub.add_parser("augment", parents=[common], help="generate images for one base class")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="class_id", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s = sub.add_parser("eval", parents=[common], help="evaluate a few-shot checkpoint on the test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s = sub.add_parser("sweep", parents=[common], help="alpha sweep and beta x W grid")
    s.add_argument("--which", choices=["alpha", "beta-W", "all"], default="all")
    s.add_argument("--data")
    s = sub.add_parser("report", parents=[common], help="re-render tables/*.csv from metrics.jsonl")
    s.add_argument("run", help="run directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, RunDirError) as exc:
        print(f"drdm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"drdm {args.command}: missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"drdm {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
