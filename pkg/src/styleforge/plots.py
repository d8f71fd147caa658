"""Matplotlib renderers: every trace and report written by the CLI gets a
figure next to its delimited file."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_loss_curves(rows, path, title="training loss"):
    """Plot every numeric series in a list of trace rows against step."""
    if not rows:
        return
    steps = [r["step"] for r in rows]
    keys = [k for k in rows[0] if k not in ("step", "sample")
            and isinstance(rows[0][k], (int, float))]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in keys:
        ax.plot(steps, [r.get(key, float("nan")) for r in rows], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if keys:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_report_figure(report_rows, path, title="evaluation"):
    """Horizontal bar chart of (metric, value) report rows."""
    rows = [(name, float(value)) for name, value in report_rows
            if name != "sentences"]
    if not rows:
        return
    names = [name for name, _ in rows]
    values = [value for _, value in rows]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(rows) + 1.5))
    bars = ax.barh(range(len(rows)), values, color="#4878a8")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_title(title)
    for bar, value in zip(bars, values):
        ax.text(bar.get_width(), bar.get_y() + bar.get_height() / 2,
                f" {value:.3g}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
