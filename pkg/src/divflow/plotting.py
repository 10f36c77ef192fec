"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(histories: dict, path):
    """Total, data and no-slip loss per epoch, one line per timeframe."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.8), sharex=True)
    for t, hist in sorted(histories.items()):
        ep = [row["epoch"] for row in hist]
        for ax, key in zip(axes, ("total", "L_d", "L_ns")):
            ax.semilogy(ep, [max(row[key], 1e-12) for row in hist], lw=0.8, label=f"t={t}")
    for ax, title in zip(axes, ("total", "data (cosine)", "no-slip")):
        ax.set_title(title)
        ax.set_xlabel("epoch")
    if len(histories) <= 8:
        axes[0].legend(frameon=False)
    return _save(fig, path)


def speed_slices(fields: dict, mask, path, t: int = 0, axis: int = 2, index: int | None = None):
    """Mid-slice speed maps for each named ``(nt, 3, nx, ny, nz)`` field."""
    names = list(fields)
    first = np.asarray(fields[names[0]])
    if index is None:
        index = first.shape[2 + axis] // 2
    sl = [slice(None)] * 3
    sl[axis] = index
    sl = tuple(sl)
    m = np.asarray(mask, bool)[sl]
    speeds = {k: np.where(m, np.linalg.norm(np.asarray(v[t], float), axis=0)[sl], np.nan) for k, v in fields.items()}
    vmax = np.nanmax([np.nanmax(s) for s in speeds.values()]) if m.any() else 1.0
    fig, axes = plt.subplots(1, len(names), figsize=(2.6 * len(names), 2.6), squeeze=False)
    for ax, name in zip(axes[0], names):
        im = ax.imshow(speeds[name].T, origin="lower", vmin=0, vmax=vmax, cmap="viridis")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="speed (m/s)")
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def metrics_bars(report: dict, path):
    keys = [k for k in ("vel_nrmse", "de", "div_rms", "wrapped_pct") if report.get(k) is not None]
    rows = report.get("per_timeframe", [])
    fig, axes = plt.subplots(1, len(keys), figsize=(2.4 * len(keys), 2.6), squeeze=False)
    for ax, key in zip(axes[0], keys):
        vals = [r[key] if r.get(key) is not None else np.nan for r in rows]
        ax.bar(range(len(vals)), vals, color="0.4")
        ax.axhline(report[key], color="C3", lw=1)
        ax.set_title(key)
        ax.set_xlabel("timeframe")
    return _save(fig, path)


def sweep_plot(rows: list[dict], param: str, path, metric: str = "vel_nrmse"):
    xs = [float(r[param]) for r in rows]
    ys = [float(r[metric]) for r in rows]
    order = np.argsort(xs)
    fig, ax = plt.subplots(figsize=(3.4, 2.6))
    ax.plot(np.asarray(xs)[order], np.asarray(ys)[order], "o-", color="k", ms=4)
    if min(xs) > 0 and max(xs) / min(xs) > 10:
        ax.set_xscale("log")
    ax.set_xlabel(param)
    ax.set_ylabel(metric)
    return _save(fig, path)


def plane_flow_bars(table: list[dict], path):
    fig, ax = plt.subplots(figsize=(max(3.0, 1.4 * len(table)), 2.6))
    width = 0.38
    for i, row in enumerate(table):
        ax.bar(i - width / 2, row["q1_lmin"], width, color="0.3")
        ax.bar(i + width / 2, row["q2_lmin"], width, color="0.7")
    ax.set_xticks(range(len(table)))
    ax.set_xticklabels([f'{r["plane1"]} vs {r["plane2"]}' for r in table])
    ax.set_ylabel("flow (L/min)")
    return _save(fig, path)
