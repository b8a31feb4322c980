"""Command line entry point.

Each stage subcommand reads and writes files in the configured output
directory, so a run can be executed piecewise::

    ssatkit gen-data --config run.ini
    ssatkit train-intermediate --config run.ini
    ssatkit select --config run.ini
    ssatkit ssat --config run.ini
    ssatkit eval --config run.ini

or in one go with ``ssatkit pipeline --config run.ini``.
Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import advtrain, data, diffusion, models, selection
from . import pipeline as pl
from . import report as rp
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("ssatkit")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2
EVAL_JSON = "eval.json"


# --- file helpers -----------------------------------------------------------

def _out(cfg: ExperimentConfig) -> Path:
    return rp.check_writable(cfg.output_dir)


def _class_indices(ds: data.Dataset) -> np.ndarray:
    """Labels as written when the file already holds class indices 0..C-1, else the re-indexed ones."""
    keys = ds.meta["label_map"]
    if all(k.isdigit() for k in keys) and sorted(int(k) for k in keys) == list(range(len(keys))):
        return np.array([int(k) for k in keys])[ds.y]
    return ds.y


def _load_splits(out: Path, need_unlabeled: bool = True):
    lab = data.load_csv(out / pl.LABELED_CSV, has_label=True)
    test = data.load_csv(out / pl.TEST_CSV, has_label=True, label_map=lab.meta["label_map"])
    test = data.with_labels(test, _class_indices(test), data.TEST)
    lab = data.with_labels(lab, _class_indices(lab), data.LABELED)
    unl = data.load_csv(out / pl.UNLABELED_CSV, has_label=False) if need_unlabeled else None
    C = max(lab.n_classes, test.n_classes)
    lab.n_classes = test.n_classes = C
    return lab, unl, test


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} is missing; run `{hint}` first")
    return path


# --- subcommands ------------------------------------------------------------

def cmd_gen_data(cfg, args):
    out = _out(cfg)
    lab, unl, test, full = pl.load_data(cfg)
    data.save_csv(lab, out / pl.LABELED_CSV)
    data.save_csv(unl, out / pl.UNLABELED_CSV, include_labels=False)
    data.save_csv(test, out / pl.TEST_CSV)
    meta = data.write_metadata(out / pl.DATASET_JSON, full, {"labeled": lab, "unlabeled": unl, "test": test},
                               cfg.sub_seed("split"))
    print(json.dumps(meta, sort_keys=True))


def cmd_train_intermediate(cfg, args):
    out = _out(cfg)
    lab, _, test = _load_splits(out, need_unlabeled=False)
    clf = pl.train_intermediate(cfg, lab)
    models.save_params(clf, out / pl.INTERMEDIATE_BIN)
    acc = float(np.mean(models.predict_labels(models.logits_of(clf, test.X)) == test.y))
    print(f"intermediate model -> {out / pl.INTERMEDIATE_BIN} (test accuracy {acc:.4f})")


def cmd_select(cfg, args):
    out = _out(cfg)
    if cfg.selection.method == "none":
        raise ConfigError("[selection] method = none has nothing to select")
    clf = models.load_params(_require(out / pl.INTERMEDIATE_BIN, "ssatkit train-intermediate"))
    if cfg.generation.source == "pregenerated":
        pre = models.load_params(_require(out / pl.DDPM_PRE_BIN, "ssatkit finetune"))
        n = cfg.generation.pool_size or len(data.load_csv(out / pl.UNLABELED_CSV, has_label=False))
        X_pool = np.clip(diffusion.sample(pre, n, cfg.schedule(), cfg.sub_seed("generation")), 0, 1)
        data.save_csv(data.Dataset(X_pool), out / "pregenerated_pool.csv")
    else:
        X_pool = data.load_csv(_require(out / pl.UNLABELED_CSV, "ssatkit gen-data"), has_label=False).X
    sel = pl.select_pool(cfg, clf, X_pool, pl.StageClock())
    selection.write_manifest(sel.pool, out / rp.MANIFEST_CSV)
    print(f"selected {len(sel)} of {len(sel.pool)} ({sel.n_boundary} boundary) -> {out / rp.MANIFEST_CSV}")


def cmd_finetune(cfg, args):
    out = _out(cfg)
    lab, _, _ = _load_splits(out, need_unlabeled=False)
    pre_path = out / pl.DDPM_PRE_BIN
    if pre_path.is_file():
        pre = models.load_params(pre_path)
    else:
        pre = pl.pretrain_ddpm(cfg, lab)
        models.save_params(pre, pre_path)
        print(f"pre-trained DDPM -> {pre_path}")
    if cfg.generation.source != "guided":
        return
    clf = models.load_params(_require(out / pl.INTERMEDIATE_BIN, "ssatkit train-intermediate"))
    ft, _ = pl.finetune(cfg, pre, lab, clf)
    models.save_params(ft, out / pl.DDPM_FT_BIN)
    print(f"fine-tuned DDPM ({cfg.finetune.mode}, lambda={cfg.finetune.lam}) -> {out / pl.DDPM_FT_BIN}")


def cmd_generate(cfg, args):
    out = _out(cfg)
    pre = models.load_params(_require(out / pl.DDPM_PRE_BIN, "ssatkit finetune"))
    ft = models.load_params(_require(out / pl.DDPM_FT_BIN, "ssatkit finetune"))
    clf = models.load_params(_require(out / pl.INTERMEDIATE_BIN, "ssatkit train-intermediate"))
    lab, unl, _ = _load_splits(out)
    n_pool = cfg.generation.pool_size or len(unl)
    X, src = pl.generate_guided(cfg, pre, ft, n_pool)
    cm = diffusion.fit_guidance_model(cfg.finetune.mode, clf, lab.X, cfg.selection.k or None,
                                      cfg.sub_seed("finetune")) if cfg.finetune.mode != "pcg" else None
    pool = pl.guided_pool(cfg, X, src, clf, cm)
    data.save_csv(data.Dataset(X, pool.pseudo_label), out / pl.GENERATED_CSV)
    selection.write_manifest(pool, out / rp.MANIFEST_CSV)
    print(f"generated {len(X)} points -> {out / pl.GENERATED_CSV}")


def _aux_data(cfg, out: Path, unl):
    if cfg.selection.method == "none":
        return None, None
    if cfg.generation.source == "guided":
        gen = data.load_csv(_require(out / pl.GENERATED_CSV, "ssatkit generate"), has_label=True)
        keys = np.array([int(k) for k in gen.meta["label_map"]])
        return gen.X, keys[gen.y]
    man = selection.read_manifest(_require(out / rp.MANIFEST_CSV, "ssatkit select"))
    pool_X = (data.load_csv(out / "pregenerated_pool.csv", has_label=False).X
              if cfg.generation.source == "pregenerated" else unl.X)
    keep = man["reason"] != selection.UNSELECTED
    return pool_X[man["index"][keep]], man["pseudo_label"][keep]


def cmd_ssat(cfg, args):
    out = _out(cfg)
    lab, unl, test = _load_splits(out)
    X_aux, y_aux = _aux_data(cfg, out, unl)
    result = pl.run_ssat(cfg, lab, X_aux, y_aux, test, lab.n_classes)
    models.save_params(result.params, out / pl.FINAL_BIN)
    advtrain.write_curve(result.curve, out / rp.CURVE_CSV)
    b = result.best
    print(f"best epoch {b['epoch']}: clean {b['clean_acc']:.4f} robust {b['robust_acc']:.4f} -> {out / pl.FINAL_BIN}")


def cmd_eval(cfg, args):
    out = _out(cfg)
    _, _, test = _load_splits(out, need_unlabeled=False)
    params = models.load_params(_require(Path(args.model) if args.model else out / pl.FINAL_BIN, "ssatkit ssat"))
    clean, rob = pl.evaluate(cfg, params, test)
    result = {"clean_acc": clean, "robust_acc": rob, "n_test": len(test),
              "attack": {"norm": cfg.attack.norm, "epsilon": cfg.attack.epsilon, "steps": cfg.attack.eval_steps}}
    (out / EVAL_JSON).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"clean {clean:.4f} robust {rob:.4f}")


def cmd_pipeline(cfg, args):
    rep = pl.run_pipeline(cfg)
    fin = rep["final"]
    print(f"{rep['method']} ({rep['mode']}): best epoch {rep['best_epoch']}, clean {fin['clean_acc']:.4f}, "
          f"robust {fin['robust_acc']:.4f}, total {rep['timings']['total']:.3f}s -> "
          f"{Path(cfg.output_dir) / rp.REPORT_NAME}")


def cmd_viz(cfg, args):
    out = _out(cfg)
    clf = models.load_params(_require(out / pl.INTERMEDIATE_BIN, "ssatkit train-intermediate"))
    unl = data.load_csv(_require(out / pl.UNLABELED_CSV, "ssatkit gen-data"), has_label=False)
    man_path = out / rp.MANIFEST_CSV
    if man_path.is_file() and cfg.generation.source == "external":
        man = selection.read_manifest(man_path)
        X, labels = unl.X[man["index"]], man["pseudo_label"]
        overlay = man["reason"] != selection.UNSELECTED
    else:
        X = unl.X
        labels = models.predict_labels(models.logits_of(clf, X))
        overlay = np.zeros(len(X), bool)
    proj = rp.pca_project(models.latents(clf, X), 2)
    n = rp.scatter_svg(proj.coords, labels, overlay, out / rp.SCATTER_SVG, cfg.selection.method)
    if (out / rp.CURVE_CSV).is_file():
        rp.curve_svg(_read_curve(out / rp.CURVE_CSV), out / rp.CURVE_SVG)
    print(f"{n} markers -> {out / rp.SCATTER_SVG}")


def _read_curve(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate or load the dataset and write the labeled/unlabeled/test CSVs"),
    "train-intermediate": (cmd_train_intermediate, "fit the intermediate classifier on the labeled split"),
    "select": (cmd_select, "score the unlabeled pool and write the selection manifest"),
    "finetune": (cmd_finetune, "pre-train the DDPM on labeled features and fine-tune it with guidance"),
    "generate": (cmd_generate, "draw the mixed pre-trained / fine-tuned sample set"),
    "ssat": (cmd_ssat, "adversarial training on labeled plus selected or generated data"),
    "eval": (cmd_eval, "clean and PGD robust accuracy of a saved model on the test split"),
    "pipeline": (cmd_pipeline, "run every stage and write the report"),
    "viz": (cmd_viz, "render the latent PCA scatter and the learning curve"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssatkit", description="Boundary-focused semi-supervised adversarial training")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="INI experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override [run] seed")
        sp.add_argument("--out", default=None, help="override [output] dir")
        if name == "eval":
            sp.add_argument("--model", default=None, help="model file (default: final model in the output dir)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.out:
            cfg.output_dir = args.out
        rp.check_writable(cfg.output_dir)
    except (ConfigError, rp.OutputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn, _ = COMMANDS[args.command]
    try:
        fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        log.debug("stage failure", exc_info=True)
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
