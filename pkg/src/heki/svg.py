"""Static SVG line charts via matplotlib (Agg), with reproducible output."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "heki", "svg.fonttype": "none", "figure.figsize": (7.0, 4.2)}


def write_chart(path, series, title="", xlabel="", ylabel="", logx=False, logy=False, markers=False, styles=None):
    """Plot ``series = [(label, xs, ys), ...]`` and save an SVG to ``path``.

    ``styles`` optionally maps labels to matplotlib keyword dicts.
    """
    styles = styles or {}
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, xs, ys in series:
            kw = {"lw": 1.6, "marker": "o", "ms": 3} if markers else {"lw": 1.6}
            kw.update(styles.get(label, {}))
            ax.plot(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), label=label, **kw)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        if series:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
