#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
静态报告：损失曲线、VLMS 探针曲线、评价指标图

只输出 PNG 与 JSON，不做交互展示。
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.core.exceptions import DataError  # noqa: E402
from app.core.history import LossHistory  # noqa: E402
from app.schemas.report import MetricReport, ProbeRow  # noqa: E402
from app.utils.json_sanitize import read_json, write_json  # noqa: E402
from app.utils.logger import get_logger  # noqa: E402
from app.utils.series_codec import downsample_series  # noqa: E402

logger = get_logger(__name__)

PathLike = Union[str, Path]

# 画在同一张子图里的损失分组
_PANELS = (
    ("VLM", ("L_local", "L_global", "L_general", "L_VLM")),
    ("VVM", ("L_VG", "L_VL", "L_VGEN", "L_VVM")),
    ("adversarial", ("L_G", "L_D")),
    ("total", ("L_total", "kl")),
)


def _panel_keys(prefixes: Sequence[str], keys: Sequence[str]) -> List[str]:
    out = []
    for key in keys:
        for prefix in prefixes:
            # L_G / L_D 匹配按阶段展开的 L_G0、L_D1 ...
            if key == prefix or (prefix in ("L_G", "L_D") and key[len(prefix):].isdigit() and key.startswith(prefix)):
                out.append(key)
    return out


def plot_history(history: LossHistory, path: PathLike, title: str = "", max_points: int = 2100) -> Optional[Path]:
    """每组损失一张子图；历史为空时不输出"""
    if not len(history):
        return None
    panels = [(name, _panel_keys(prefixes, list(history.series))) for name, prefixes in _PANELS]
    panels = [(name, keys) for name, keys in panels if keys]
    fig, axes = plt.subplots(len(panels), 1, figsize=(8, 2.8 * len(panels)), squeeze=False)
    for ax, (name, keys) in zip(axes[:, 0], panels):
        for key in keys:
            xs, ys = downsample_series(history.iterations, history.series[key], max_points)
            ax.plot(xs, ys, label=key, linewidth=1)
        ax.set_ylabel(name)
        ax.legend(loc="upper right", fontsize=7)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("iteration")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_probe_table(rows: Sequence[ProbeRow], path: PathLike, title: str = "VLMS probe") -> Path:
    """左：图像噪声 σ；右：描述掩码比例；水平虚线为真实配对与随机配对"""
    fig, (ax_noise, ax_mask) = plt.subplots(1, 2, figsize=(10, 3.5))
    by_probe: Dict[str, List[ProbeRow]] = {}
    for row in rows:
        by_probe.setdefault(row.probe, []).append(row)

    for ax, probes, xlabel in ((ax_noise, ("noise",), "noise sigma"),
                               (ax_mask, ("mask", "replace"), "masked fraction")):
        for probe in probes:
            points = sorted(by_probe.get(probe, []), key=lambda r: r.level)
            if points:
                ax.errorbar([r.level for r in points], [r.vlms_mean for r in points],
                            yerr=[r.vlms_std for r in points], marker="o", capsize=3, label=probe)
        for probe, style in (("ground_truth", "--"), ("random", ":"), ("stopwords", "-.")):
            for row in by_probe.get(probe, []):
                if probe == "stopwords" and ax is ax_noise:
                    continue
                ax.axhline(row.vlms_mean, linestyle=style, color="gray", linewidth=1, label=probe)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("VLMS")
        ax.set_ylim(0.0, 1.0)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_metrics(report: MetricReport, path: PathLike) -> Path:
    names = ["VLMS", "IS", "FID", "R-precision"]
    means = [report.vlms_mean, report.is_mean, report.fid, report.r_precision_mean]
    stds = [report.vlms_std, report.is_std, 0.0, report.r_precision_std]
    fig, axes = plt.subplots(1, 4, figsize=(10, 3))
    for ax, name, mean, std in zip(axes, names, means, stds):
        ax.bar([0], [mean], yerr=[std], capsize=4, color="steelblue")
        ax.set_title(f"{name}\n{mean:.4g}")
        ax.set_xticks([])
    fig.suptitle(f"n_samples={report.n_samples}")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


class ReportService:
    """汇总若干运行目录：损失曲线 + 探针表"""

    def build(self, runs: Sequence[PathLike], out_dir: PathLike) -> Dict[str, List[str]]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        produced: Dict[str, List[str]] = {"loss_curves": [], "probe_plots": [], "metrics": []}
        for run in runs:
            run = Path(run)
            if not run.is_dir():
                raise DataError(f"run directory not found: {run}")
            history_path = run / "loss_history.json"
            if history_path.exists():
                target = plot_history(LossHistory.load(history_path), out_dir / f"{run.name}_losses.png", title=run.name)
                if target is not None:
                    produced["loss_curves"].append(str(target))
            probe_path = run / "vlms_probe.json"
            if probe_path.exists():
                rows = [ProbeRow(**row) for row in read_json(probe_path)["rows"]]
                produced["probe_plots"].append(str(plot_probe_table(rows, out_dir / f"{run.name}_vlms_probe.png",
                                                                    title=run.name)))
            metrics_path = run / "metrics.json"
            if metrics_path.exists():
                report = MetricReport(**read_json(metrics_path))
                produced["metrics"].append(str(plot_metrics(report, out_dir / f"{run.name}_metrics.png")))
            logger.info(f"[Report] {run.name}: history={history_path.exists()} probe={probe_path.exists()} "
                        f"metrics={metrics_path.exists()}")
        write_json(out_dir / "report.json", produced)
        return produced


report_service = ReportService()
