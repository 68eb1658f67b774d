"""Held-out evaluation and reuse/length sweeps over a trained model."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .duration import predict_ratio
from .metrics import ctp_auc, marker_retention, normalized_edit_distance
from .sampler import SamplerConfig, convert_batch
from .streams import stream
from .tokens import PairedSample

SWEEP_COLUMNS = ("point", "mode", "value", "reuse_fraction", "marker_retention",
                 "edit_to_target", "edit_to_source")
EVAL_COLUMNS = ("marker_removal", "edit_to_target", "ctp_auc", "dp_mse", "n_samples")
SWEEP_AXES = ("tau", "proportion", "ratio")
DEFAULT_POINTS = {
    "tau": tuple(round(0.1 * i, 1) for i in range(11)),
    "proportion": tuple(round(0.1 * i, 1) for i in range(1, 10)),
    "ratio": (0.5, 0.75, 1.0, 1.25, 1.5),
}


@dataclass
class PointResult:
    reuse_fraction: float
    marker_retention: float
    edit_to_target: float
    edit_to_source: float
    outputs: list[list[int]]


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield range(start, min(n, start + size))


def run_point(model, samples: Sequence[PairedSample], cfg: SamplerConfig, ratio="1.0",
              markers: set[int] = frozenset(), batch_size: int = 64) -> PointResult:
    """Convert every sample under one sampler setting and average the metrics.

    Per-sample random streams are keyed by the sample's index, so results do
    not depend on ``batch_size``.
    """
    order = sorted(range(len(samples)), key=lambda i: len(samples[i].source))
    outputs: list[list[int] | None] = [None] * len(samples)
    reused = 0
    for chunk in _chunks(len(order), batch_size):
        idx = [order[i] for i in chunk]
        convs = convert_batch([samples[i].source for i in idx], model, cfg, ratio, indices=idx)
        for i, c in zip(idx, convs):
            outputs[i] = c.tokens
            reused += len(c.init.reused)
    n_src = sum(len(s.source) for s in samples)
    return PointResult(
        reuse_fraction=reused / n_src,
        marker_retention=marker_retention(outputs, [s.source for s in samples], set(markers)),
        edit_to_target=float(np.mean([normalized_edit_distance(o, s.target) for o, s in zip(outputs, samples)])),
        edit_to_source=float(np.mean([normalized_edit_distance(o, s.source) for o, s in zip(outputs, samples)])),
        outputs=outputs,
    )


def sweep_settings(axis: str, values: Sequence[float] | None, base: SamplerConfig,
                   modes: Sequence[str] | None = None) -> list[tuple[str, float, SamplerConfig, object]]:
    """(mode label, value, sampler config, ratio) per sweep point, in output order.

    Reuse sweeps keep the source length; the ratio sweep generates from
    scratch (no reuse).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = tuple(DEFAULT_POINTS[axis] if values is None else values)
    points = []
    if axis == "tau":
        for v in values:
            points.append(("ctp", v, replace(base, reuse_mode="threshold", tau=v), "1.0"))
    elif axis == "proportion":
        for mode in (modes or ("ctp", "random")):
            reuse_mode = {"ctp": "proportion", "random": "random"}[mode]
            for v in values:
                points.append((mode, v, replace(base, reuse_mode=reuse_mode, proportion=v), "1.0"))
    else:
        for v in values:
            points.append(("scratch", v, replace(base, reuse_mode="none"), float(v)))
    return points


def sweep(model, samples: Sequence[PairedSample], axis: str, base: SamplerConfig,
          values: Sequence[float] | None = None, markers: set[int] = frozenset(),
          workers: int = 1, modes: Sequence[str] | None = None) -> list[dict]:
    """One row per sweep point, ordered by point index whatever the worker count."""
    points = sweep_settings(axis, values, base, modes)

    def work(p):
        _, _, cfg, ratio = p
        return run_point(model, samples, cfg, ratio, markers)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, points))
    rows = []
    for k, ((mode, value, _, _), res) in enumerate(zip(points, results)):
        rows.append({
            "point": k, "mode": mode, "value": value, "reuse_fraction": res.reuse_fraction,
            "marker_retention": res.marker_retention, "edit_to_target": res.edit_to_target,
            "edit_to_source": res.edit_to_source,
        })
    return rows


def ctp_scores_for(model, samples: Sequence[PairedSample], batch_size: int = 64) -> list[np.ndarray]:
    out = []
    with torch.no_grad():
        for chunk in _chunks(len(samples), batch_size):
            srcs = [samples[i].source for i in chunk]
            lens = [len(s) for s in srcs]
            src_t = torch.zeros(len(srcs), max(lens), dtype=torch.long)
            for b, s in enumerate(srcs):
                src_t[b, :len(s)] = torch.tensor(list(s))
            content = model.encode_batch(src_t, lens)
            scores = model.ctp_scores(content, src_t, lens).double().numpy()
            out.extend(scores[b, :n] for b, n in enumerate(lens))
    return out


def dp_mse(model, samples: Sequence[PairedSample], seed: int = 0, steps: int = 16) -> float:
    """Mean squared error of one sampled ratio per sample against the true ratio."""
    errs = []
    for i, s in enumerate(samples):
        r = predict_ratio(model, s.source, steps, stream(seed, "ratio", i))
        errs.append((r - s.ratio) ** 2)
    return float(np.mean(errs))


def evaluate(model, samples: Sequence[PairedSample], base: SamplerConfig, markers: set[int],
             ratio="auto") -> dict:
    """Marker removal and edit distance for generation from scratch (tau = 1),
    CTP AUC against the stored labels and the duration predictor's MSE."""
    cfg = replace(base, reuse_mode="threshold", tau=1.0)
    res = run_point(model, samples, cfg, ratio, markers)
    scores = ctp_scores_for(model, samples)
    return {
        "marker_removal": 1.0 - res.marker_retention,
        "edit_to_target": res.edit_to_target,
        "ctp_auc": ctp_auc(scores, [s.common_labels for s in samples]),
        "dp_mse": dp_mse(model, samples, base.seed, base.dp_steps),
        "n_samples": len(samples),
    }


def write_rows(rows: Sequence[dict], columns: Sequence[str], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
