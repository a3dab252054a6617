"""SVG curves of running AUC and Logloss against epoch fraction."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed so repeated renders are byte-identical
_SVG_META = {"Date": None, "Creator": "emofm"}


def plot_traces(traces: Mapping[str, Sequence], path, title: str | None = None) -> None:
    """``traces`` maps a label to TracePoint-like rows (fraction, auc, logloss)."""
    plt.rcParams["svg.hashsalt"] = "emofm"
    fig, (ax_auc, ax_ll) = plt.subplots(1, 2, figsize=(10, 4))
    for label, trace in traces.items():
        frac = [p.fraction for p in trace]
        ax_auc.plot(frac, [p.auc for p in trace], label=label)
        ax_ll.plot(frac, [p.logloss for p in trace], label=label)
    ax_auc.set_xlabel("epoch fraction")
    ax_auc.set_ylabel("AUC")
    ax_ll.set_xlabel("epoch fraction")
    ax_ll.set_ylabel("Logloss")
    for ax in (ax_auc, ax_ll):
        ax.set_xlim(0.0, 1.0)
        ax.grid(alpha=0.3)
    ax_auc.legend(loc="lower right", fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
