"""Report emission: JSON report, curve/manifest CSVs, PCA latent scatter and curve figure."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .. import advtrain, selection  # noqa: E402

SCHEMA_VERSION = 1
REPORT_NAME = "report.json"
CURVE_CSV = "curve.csv"
MANIFEST_CSV = "manifest.csv"
SCATTER_SVG = "latents.svg"
CURVE_SVG = "curve.svg"
TIMING_KEYS = ("intermediate", "scoring", "selection", "fine-tuning", "generation", "ssat", "evaluation")

# fixed ids and no timestamp keep the SVG byte-stable between runs
_SVG_RC = {"svg.hashsalt": "ssatkit", "svg.fonttype": "none"}


class OutputError(OSError):
    pass


@dataclass
class Projection:
    coords: np.ndarray       # (n, dims)
    components: np.ndarray   # (dims, m), rows are unit loadings (zero rows when padded)
    variances: np.ndarray    # (dims,) sample variance along each component
    mean: np.ndarray
    rank_deficient: bool = False


def pca_project(Z, dims: int = 2) -> Projection:
    """Mean-centred projection onto the top-variance directions of the sample covariance.

    Uses an SVD of the centred data. Each component is signed so that its
    largest-magnitude loading is positive. When fewer than ``dims`` directions
    carry variance, the rest are zero components and ``rank_deficient`` is set.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"embeddings must be (n, m), got shape {Z.shape}")
    n, m = Z.shape
    if n < dims:
        raise ValueError(f"need at least {dims} points to project onto {dims} components, got {n}")
    mean = Z.mean(axis=0)
    Zc = Z - mean
    _, s, Vt = np.linalg.svd(Zc, full_matrices=False)
    var = s ** 2 / max(n - 1, 1)
    tol = max(n, m) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    keep = min(dims, rank)
    comps = np.zeros((dims, m))
    variances = np.zeros(dims)
    for i in range(keep):
        v = Vt[i]
        j = np.argmax(np.abs(v))
        comps[i] = v if v[j] > 0 else -v
        variances[i] = var[i]
    return Projection(Zc @ comps.T, comps, variances, mean, rank_deficient=keep < dims)


def check_writable(out_dir) -> Path:
    """Create ``out_dir`` if needed and prove a file can be written there."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {out} is not writable: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OutputError(f"output directory {out} is not writable")
    return out


def scatter_svg(coords, labels, overlay_mask, path, title: str = "") -> int:
    """PCA scatter: every pool point coloured by label, overlay points again in black.

    Returns the number of point markers drawn (pool plus overlay).
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    labels = np.asarray(labels)
    overlay = np.asarray(overlay_mask, dtype=bool)
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(coords[:, 0], coords[:, 1], c=labels % 10, cmap="tab10", vmin=0, vmax=9,
                   s=6, linewidths=0, gid="pool")
        ax.scatter(coords[overlay, 0], coords[overlay, 1], c="black", s=10, marker="x",
                   linewidths=0.8, gid="selected")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return len(coords) + int(overlay.sum())


def curve_svg(curve, path, best_epoch: int | None = None) -> None:
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if curve:
            ep = [r["epoch"] for r in curve]
            ax.plot(ep, [r["clean_acc"] for r in curve], label="clean", color="tab:blue")
            ax.plot(ep, [r["robust_acc"] for r in curve], label="robust", color="tab:red")
            if best_epoch:
                ax.axvline(best_epoch, color="gray", ls="--", lw=0.8)
            ax.legend(frameon=False)
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def report_body(report: dict) -> dict:
    """The report without its timing fields (what the determinism contract covers)."""
    body = {k: v for k, v in report.items() if k != "timings"}
    return json.loads(json.dumps(body))


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def emit_outputs(report: dict, out_dir, curve=None, pool: selection.ScoredPool | None = None,
                 latents=None, labels=None, overlay=None, scatter_title: str = "") -> dict:
    """Write the run artifacts and then the report that points at them.

    ``latents``/``labels``/``overlay`` drive the scatter: ``labels`` colours each
    point and ``overlay`` marks the selected or generated ones.
    """
    out = check_writable(out_dir)
    files = dict(report.get("files") or {})
    if curve is not None:
        advtrain.write_curve(curve, out / CURVE_CSV)
        curve_svg(curve, out / CURVE_SVG, report.get("best_epoch"))
        files["curve"], files["curve_figure"] = CURVE_CSV, CURVE_SVG
    if pool is not None:
        selection.write_manifest(pool, out / MANIFEST_CSV)
        files["manifest"] = MANIFEST_CSV
    if latents is not None:
        latents = np.asarray(latents, dtype=float)
        if len(latents) >= 2:
            proj = pca_project(latents, 2)
            coords = proj.coords
            report["pca"] = {"variances": proj.variances.tolist(), "rank_deficient": proj.rank_deficient}
        else:
            coords = np.zeros((len(latents), 2))
        mask = np.zeros(len(latents), dtype=bool) if overlay is None else overlay
        report["scatter_points"] = scatter_svg(coords, labels, mask, out / SCATTER_SVG, scatter_title)
        files["scatter"] = SCATTER_SVG
    report["files"] = dict(sorted(files.items()))
    write_report(report, out / REPORT_NAME)
    return report

