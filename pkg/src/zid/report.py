"""Figure rendering for the report-producing CLI paths.

Every figure lands next to its tab-separated text output: loss curves for
training runs, MAC/runtime scaling for the efficiency benchmark, and
per-pair quality bars for the metrics command.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import LossLog  # noqa: E402

__all__ = ["loss_figure", "bench_figure", "metrics_figure"]


def loss_figure(log_path, out_png) -> None:
    arr = LossLog.read(log_path)
    if arr.size == 0:
        return
    fig, ax = plt.subplots(figsize=(7, 4.2))
    steps = arr[:, 0]
    for col, label in ((1, "pixel l1"), (2, "contrastive"), (3, "diffusion"),
                       (4, "total")):
        ax.plot(steps, arr[:, col], label=label, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.set_title("training objective")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def bench_figure(rows: list[dict], out_png) -> None:
    """rows: one dict per resolution with keys resolution, total_gmac,
    spatial_oracle_gmac, mean_ms."""
    if not rows:
        return
    res = [r["resolution"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(res, [r["total_gmac"] for r in rows], "o-", label="model (channel attention)")
    ax1.plot(res, [r["spatial_oracle_gmac"] for r in rows], "s--",
             label="dense spatial attention oracle")
    ax1.set_xlabel("resolution")
    ax1.set_ylabel("GMac")
    ax1.set_yscale("log")
    ax1.legend(frameon=False, fontsize=8)
    ax1.set_title("compute scaling")
    ax2.bar([str(r) for r in res], [r["mean_ms"] for r in rows], color="#4878b0")
    ax2.set_xlabel("resolution")
    ax2.set_ylabel("mean wall time (ms)")
    ax2.set_title("inference runtime")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def metrics_figure(names: list[str], reports, out_png) -> None:
    if not names:
        return
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(6, 0.5 * len(names) + 4), 4))
    x = np.arange(len(names))
    ax1.bar(x, [r.psnr_db for r in reports], color="#4878b0")
    ax1.set_xticks(x, names, rotation=45, ha="right", fontsize=7)
    ax1.set_ylabel("PSNR (dB)")
    ax2.bar(x, [r.delta_e_00 for r in reports], color="#b05048")
    ax2.set_xticks(x, names, rotation=45, ha="right", fontsize=7)
    ax2.set_ylabel("CIEDE2000")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
