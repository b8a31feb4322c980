"""Stage functions and the end-to-end pipeline.

Select mode: intermediate model -> score/select the unlabeled pool -> SSAT -> evaluate.
Generative modes pre-train a DDPM on the labeled features and either sample a
pool to select from (``pregenerated``) or fine-tune with guidance and draw a
mixed set (``guided``).
"""
from __future__ import annotations

import time
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .. import advtrain, clustering, data, diffusion, models, selection
from . import report as rp
from .config import ExperimentConfig

LABELED_CSV, UNLABELED_CSV, TEST_CSV = "labeled.csv", "unlabeled.csv", "test.csv"
DATASET_JSON = "dataset.json"
INTERMEDIATE_BIN, FINAL_BIN = "intermediate.bin", "final_model.bin"
DDPM_PRE_BIN, DDPM_FT_BIN = "ddpm_pretrained.bin", "ddpm_finetuned.bin"
GENERATED_CSV = "generated.csv"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


class StageClock:
    """Monotonic per-stage timings in seconds, rounded to the millisecond."""

    def __init__(self):
        self.timings = {k: 0.0 for k in rp.TIMING_KEYS}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = round(self.timings.get(name, 0.0) + time.perf_counter() - start, 3)

    def total(self) -> float:
        return round(sum(self.timings.values()), 3)


# --- stages -----------------------------------------------------------------

def load_data(cfg: ExperimentConfig):
    """(labeled, unlabeled, test, full) for the configured dataset."""
    d = cfg.data
    if d.kind == "csv":
        full = data.load_csv(d.path, has_label=True, normalize=d.normalize)
    else:
        full = data.gen_synthetic(d.kind, d.n, d.classes, d.overlap, cfg.sub_seed("data"), d.dim)
    lab, unl, test = data.split(full, d.n_labeled, d.n_test, cfg.sub_seed("split"))
    return lab, unl, test, full


def train_intermediate(cfg: ExperimentConfig, labeled: data.Dataset) -> models.MLPParams:
    return models.train_intermediate(labeled.X, labeled.y, labeled.n_classes, cfg.intermediate_config())


def select_pool(cfg: ExperimentConfig, clf: models.MLPParams, X_pool, clock: StageClock):
    scfg = cfg.selection_config()
    with clock.stage("scoring"):
        pool = selection.compute_scores(X_pool, clf, scfg.method, scfg.k, scfg.seed)
    with clock.stage("selection"):
        sel = selection.select_subset(pool, scfg.alpha, scfg.beta, cfg.sub_seed("selection"))
    return sel


def pretrain_ddpm(cfg: ExperimentConfig, labeled: data.Dataset) -> models.MLPParams:
    return diffusion.train_ddpm(labeled.X, cfg.schedule(), cfg.ddpm_config())


def finetune(cfg: ExperimentConfig, pre: models.MLPParams, labeled: data.Dataset,
             clf: models.MLPParams):
    fcfg = cfg.finetune_config()
    k = cfg.selection.k or None
    cm = diffusion.fit_guidance_model(fcfg.mode, clf, labeled.X, k, fcfg.seed)
    return diffusion.finetune_guided(pre, labeled.X, clf, fcfg, cfg.schedule(), cluster_model=cm), cm


def generation_pool_size(cfg: ExperimentConfig, unlabeled: data.Dataset | None) -> int:
    if cfg.generation.pool_size:
        return cfg.generation.pool_size
    return len(unlabeled) if unlabeled is not None else 0


def generate_guided(cfg: ExperimentConfig, pre, ft, pool_size: int):
    n, _ = selection.selection_counts(pool_size, cfg.selection.alpha, cfg.selection.beta)
    return diffusion.generate_mixed(pre, ft, n, cfg.selection.beta, cfg.schedule(), cfg.sub_seed("generation"))


def guided_pool(cfg: ExperimentConfig, X_gen, source, clf, cluster_model) -> selection.ScoredPool:
    """Manifest rows for generated data: pseudo-label, boundary score, producing model."""
    logits = models.logits_of(clf, X_gen)
    mode = cfg.finetune.mode
    if mode == "pcg":
        score = models.confidence(logits)
    else:
        Z = models.latents(clf, X_gen)
        score = (clustering.kmeans_boundary_score(Z, cluster_model) if mode == "lcg-km"
                 else clustering.gmm_boundary_score(Z, cluster_model)[1])
    pool = selection.ScoredPool(np.arange(len(X_gen)), models.predict_labels(logits),
                                np.atleast_1d(np.asarray(score, dtype=float)), mode)
    pool.selected[:] = True
    pool.reason = np.asarray(source, dtype=object)
    return pool


def run_ssat(cfg: ExperimentConfig, labeled, X_aux, y_aux, test, n_classes: int) -> advtrain.TrainResult:
    aux = None if X_aux is None or len(X_aux) == 0 else (X_aux, y_aux)
    return advtrain.ssat_train((labeled.X, labeled.y), aux, cfg.train_config(), cfg.attack_config(),
                               (test.X, test.y), eval_attack=cfg.eval_attack_config(), n_classes=n_classes)


def evaluate(cfg: ExperimentConfig, params, test) -> tuple[float, float]:
    return advtrain.evaluate(params, test.X, test.y, cfg.eval_attack_config())


# --- pipeline ---------------------------------------------------------------

def _base_report(cfg: ExperimentConfig) -> dict:
    return {
        "schema_version": rp.SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "status": "running",
        "failed_stage": None,
        "mode": cfg.generation.source,
        "method": cfg.selection.method,
        "data": {},
        "n_aux": 0,
        "n_boundary": 0,
        "learning_curve": [],
        "best_epoch": None,
        "final": None,
        "files": {"manifest": None},
        "timings": {},
    }


def run_pipeline(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run every stage in order and write the report next to its artifacts.

    Raises :class:`StageError` after writing a partial report that names the failing stage.
    """
    out = rp.check_writable(out_dir or cfg.output_dir)
    clock = StageClock()
    report = _base_report(cfg)
    state = {}
    try:
        _run(cfg, out, clock, report, state)
    except StageError as exc:
        report["status"] = "failed"
        report["failed_stage"] = exc.stage
        report["error"] = str(exc)
        report["traceback"] = "".join(traceback.format_exception_only(type(exc.cause), exc.cause)).strip()
        report["timings"] = dict(clock.timings, total=clock.total())
        rp.write_report(report, out / rp.REPORT_NAME)
        raise
    return report


def _run(cfg, out: Path, clock: StageClock, report: dict, state: dict) -> None:
    source, method = cfg.generation.source, cfg.selection.method
    with clock.stage("data"):
        lab, unl, test, full = load_data(cfg)
        C = full.n_classes
        data.write_metadata(out / DATASET_JSON, full, {"labeled": lab, "unlabeled": unl, "test": test},
                            cfg.sub_seed("split"))
    report["data"] = {"n_labeled": len(lab), "n_unlabeled": len(unl), "n_test": len(test), "d": full.d, "C": C}
    files = report["files"]
    files["dataset"] = DATASET_JSON

    with clock.stage("intermediate"):
        clf = train_intermediate(cfg, lab)
        models.save_params(clf, out / INTERMEDIATE_BIN)
    files["intermediate_model"] = INTERMEDIATE_BIN

    pool = None
    X_aux = y_aux = None
    scatter = {}
    if source != "external" and method != "none":
        with clock.stage("pretraining"):
            pre = pretrain_ddpm(cfg, lab)
            models.save_params(pre, out / DDPM_PRE_BIN)
        files["ddpm_pretrained"] = DDPM_PRE_BIN
        n_pool = generation_pool_size(cfg, unl)
        if source == "pregenerated":
            with clock.stage("generation"):
                X_pool = np.clip(diffusion.sample(pre, n_pool, cfg.schedule(), cfg.sub_seed("generation")), 0, 1)
            sel = select_pool(cfg, clf, X_pool, clock)
            pool = sel.pool
            X_aux, y_aux = X_pool[pool.selected], pool.pseudo_label[pool.selected]
            report["n_boundary"] = sel.n_boundary
            scatter = dict(latents=models.latents(clf, X_pool), labels=pool.pseudo_label, overlay=pool.selected)
        else:
            with clock.stage("fine-tuning"):
                ft, cm = finetune(cfg, pre, lab, clf)
                models.save_params(ft, out / DDPM_FT_BIN)
            files["ddpm_finetuned"] = DDPM_FT_BIN
            with clock.stage("generation"):
                X_aux, src = generate_guided(cfg, pre, ft, n_pool)
            with clock.stage("scoring"):
                pool = guided_pool(cfg, X_aux, src, clf, cm)
            y_aux = pool.pseudo_label
            report["n_boundary"] = int(np.sum(src == diffusion.FINETUNED))
            # labeled points in colour, generated ones over-plotted
            Z = np.concatenate([models.latents(clf, lab.X), models.latents(clf, X_aux)])
            labels = np.concatenate([lab.y, y_aux])
            overlay = np.r_[np.zeros(len(lab), bool), np.ones(len(X_aux), bool)]
            scatter = dict(latents=Z, labels=labels, overlay=overlay)
        data.save_csv(data.Dataset(X_aux, y_aux, C), out / GENERATED_CSV)
        files["generated"] = GENERATED_CSV
    elif method != "none":
        sel = select_pool(cfg, clf, unl.X, clock)
        pool = sel.pool
        # pool order, so that a run resumed from the manifest file trains on identical batches
        X_aux, y_aux = unl.X[pool.selected], pool.pseudo_label[pool.selected]
        report["n_boundary"] = sel.n_boundary
        scatter = dict(latents=models.latents(clf, unl.X), labels=pool.pseudo_label, overlay=pool.selected)
    else:
        scatter = dict(latents=models.latents(clf, unl.X), labels=models.predict_labels(models.logits_of(clf, unl.X)),
                       overlay=np.zeros(len(unl), bool))
    report["n_aux"] = 0 if X_aux is None else int(len(X_aux))

    with clock.stage("ssat"):
        result = run_ssat(cfg, lab, X_aux, y_aux, test, C)
        models.save_params(result.params, out / FINAL_BIN)
    files["final_model"] = FINAL_BIN
    with clock.stage("evaluation"):
        clean, rob = evaluate(cfg, result.params, test)

    report["learning_curve"] = [{k: v for k, v in row.items() if k != "elapsed_seconds"} for row in result.curve]
    report["best_epoch"] = result.best_epoch
    report["final"] = {"clean_acc": clean, "robust_acc": rob}
    report["status"] = "ok"
    report["timings"] = dict(clock.timings, total=clock.total())
    with clock.stage("report"):
        rp.emit_outputs(report, out, curve=result.curve, pool=pool,
                        scatter_title=f"{cfg.selection.method} ({source})", **scatter)
    state.update(clf=clf, pool=pool, result=result)
