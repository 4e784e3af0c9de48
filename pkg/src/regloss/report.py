"""Output writers: CSV tables, JSON documents and SVG line plots.

All writes go to a temporary file in the target directory and are renamed
into place.  Floats are written in their shortest round-trip form, and every
CSV ends with a ``# config <hash>, git <describe>`` comment line.  Figures
are rendered by matplotlib with a fixed SVG hash salt and no date stamp so
that identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import os
import subprocess
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["git_describe", "fmt", "write_csv", "write_json", "line_plot", "bar_plot",
           "track_plot", "atomic_write"]


@functools.lru_cache(maxsize=1)
def git_describe() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def fmt(x) -> str:
    """Shortest round-trip text for floats, plain ``str`` for everything else."""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    try:
        import numpy as np
        if isinstance(x, np.floating):
            return repr(float(x))
        if isinstance(x, np.integer):
            return str(int(x))
    except ImportError:  # pragma: no cover
        pass
    return str(x)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], config_hash: str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    buf.write(f"# config {config_hash}, git {git_describe()}\n")
    atomic_write(path, buf.getvalue().encode("utf-8"))


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    try:
        import numpy as np
        if isinstance(obj, np.generic):
            return _jsonable(obj.item())
        if isinstance(obj, np.ndarray):
            return _jsonable(obj.tolist())
    except ImportError:  # pragma: no cover
        pass
    return obj


def write_json(path, doc) -> None:
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    atomic_write(path, text.encode("utf-8"))


_RC = {"svg.hashsalt": "regloss", "svg.fonttype": "none", "font.size": 9,
       "axes.grid": True, "grid.alpha": 0.3}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def line_plot(path, series, xlabel: str, ylabel: str, title: str = "",
              logy: bool = False, styles: Optional[Sequence[str]] = None) -> None:
    """``series`` is a list of ``(label, xs, ys)``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for k, (label, xs, ys) in enumerate(series):
            style = styles[k] if styles else "-"
            ax.plot(list(xs), list(ys), style, label=label, linewidth=1.2, markersize=3)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(loc="best", fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def bar_plot(path, labels, values, ylabel: str, title: str = "", hline: Optional[float] = None,
             highlight: Optional[int] = None) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.5, 3.6))
        colors = ["#d62728" if k == highlight else "#1f77b4" for k in range(len(values))]
        ax.bar(range(len(values)), list(values), color=colors)
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=6)
        if hline is not None:
            ax.axhline(hline, color="k", linestyle="--", linewidth=1.0)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def track_plot(path, layout, title: str = "", curves=None) -> None:
    """Outline of the eight track pieces.

    ``curves`` (point arrays) are drawn on top in red; the CLI passes the
    mapped corner boundaries so their offset from the nominal arcs shows.
    """
    import numpy as np
    from matplotlib.patches import Rectangle, Wedge

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 5.0))
        for p in layout.pieces:
            if p.kind == "square":
                (x0, x1), (y0, y1) = p.bounds
                patch = Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False)
                cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            else:
                t0, t1 = sorted((math.degrees(p.theta_start), math.degrees(p.theta_end)))
                patch = Wedge(p.center, p.r_out, t0, t1, width=p.r_out - p.r_in, fill=False)
                tm = 0.5 * (p.theta_start + p.theta_end)
                rm = 0.5 * (p.r_in + p.r_out)
                cx, cy = p.center[0] + rm * np.cos(tm), p.center[1] + rm * np.sin(tm)
            ax.add_patch(patch)
            ax.text(cx, cy, str(p.index), ha="center", va="center")
        for c in curves or ():
            ax.plot(c[:, 0], c[:, 1], color="#d62728", linewidth=0.8)
        (x0, y0), (x1, y1) = layout.bounding_box()
        ax.set_xlim(x0 - 0.2, x1 + 0.2)
        ax.set_ylim(y0 - 0.2, y1 + 0.2)
        ax.set_aspect("equal")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)
