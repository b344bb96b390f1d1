"""PNG figures written next to the CSV/JSONL reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STAGE_COLORS = {"ntp": "#4c72b0", "se": "#dd8452", "pf": "#55a868", "ca": "#c44e52"}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _get(rep, name):
    return rep[name] if isinstance(rep, dict) else getattr(rep, name)


def plot_stage_times(reports, path) -> Path:
    """Stacked per-stage wall time per snapshot; topology changes marked."""
    ts = [_get(r, "t") for r in reports]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    bottom = [0.0] * len(reports)
    for stage, color in STAGE_COLORS.items():
        vals = [1e3 * _get(r, "stage_times").get(stage, 0.0) for r in reports]
        if any(vals):
            ax.bar(ts, vals, bottom=bottom, color=color, label=stage.upper(), width=0.8)
            bottom = [b + v for b, v in zip(bottom, vals)]
    for r in reports:
        if _get(r, "topology_changed"):
            ax.axvline(_get(r, "t"), color="0.6", lw=0.6, ls=":", zorder=0)
    ax.set_xlabel("snapshot t")
    ax.set_ylabel("time (ms)")
    ax.set_title("Per-snapshot stage time (dotted: topology change)")
    if reports:
        ax.legend(loc="upper right", frameon=False, ncol=4)
    return _save(fig, Path(path))


def plot_se_iterations(reports, path) -> Path:
    pts = [(_get(r, "t"), _get(r, "se")) for r in reports if _get(r, "se")]
    fig, ax = plt.subplots(figsize=(8, 3))
    fresh = [(t, s["iterations"]) for t, s in pts if not s["reused_gain"]]
    reused = [(t, s["iterations"]) for t, s in pts if s["reused_gain"]]
    if fresh:
        ax.scatter(*zip(*fresh), marker="s", color="#dd8452", label="fresh gain (cold)")
    if reused:
        ax.scatter(*zip(*reused), marker="o", color="#4c72b0", label="reused gain (warm)")
    ax.set_xlabel("snapshot t")
    ax.set_ylabel("SE iterations")
    if pts:
        ax.legend(frameon=False)
    return _save(fig, Path(path))


def plot_contingencies(cases, path) -> Path:
    """Half-iterations per runnable case; screened cases shown as gaps on the axis."""
    fig, ax = plt.subplots(figsize=(8, 3))
    xs = list(range(len(cases)))
    its = [c["half_iterations"] for c in cases]
    colors = ["#55a868" if c["status"] == "converged" else
              "#c44e52" if c["status"] == "alert" else "0.8" for c in cases]
    ax.bar(xs, its, color=colors, width=1.0)
    for x, c in zip(xs, cases):
        if c["status"] not in ("converged", "alert"):
            ax.axvspan(x - 0.5, x + 0.5, color="0.85", zorder=0)
    pcg = [c["pcg_iterations"] for c in cases]
    if any(pcg):
        ax.plot(xs, pcg, color="k", lw=0.8, label="PCG iterations")
        ax.legend(frameon=False)
    ax.set_xlabel("contingency (case order)")
    ax.set_ylabel("FDPF half-iterations")
    ax.set_title("N-1 cases (grey: screened, red: alert)")
    return _save(fig, Path(path))


def plot_bench(summary: dict, path) -> Path:
    stages = summary["stage_seconds"]
    names = list(stages)
    fig, ax = plt.subplots(figsize=(5, 3))
    med = [1e3 * stages[s]["median"] for s in names]
    p95 = [1e3 * stages[s]["p95"] for s in names]
    ax.bar(names, med, color=[STAGE_COLORS.get(s, "0.5") for s in names], label="median")
    ax.scatter(names, p95, color="k", marker="_", s=200, label="p95")
    ax.set_ylabel("time per snapshot (ms)")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def render_figures(reports, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [plot_stage_times(reports, out_dir / "stage_times.png")]
    if any(_get(r, "se") for r in reports):
        paths.append(plot_se_iterations(reports, out_dir / "se_iterations.png"))
    last_ca = [r for r in reports if _get(r, "ca_cases")]
    if last_ca:
        paths.append(plot_contingencies(_get(last_ca[-1], "ca_cases"), out_dir / "contingencies.png"))
    return paths
