"""Report files: versioned JSON, per-row CSV, plot-ready columns and a log-log figure.

Every writer is deterministic given its inputs.  The only volatile value,
the generation time, lives in the single ``generated_at`` key of the JSON
header so reruns can be compared after dropping that key.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
TIMESTAMP_KEY = "generated_at"


def _plain(obj):
    """Recursively convert numpy and tuple values to JSON-ready Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def json_text(kind: str, body: dict, timestamp: str | None = None) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "report": kind,
           TIMESTAMP_KEY: timestamp or datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")}
    doc.update(_plain(body))
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def strip_timestamp(text: str) -> dict:
    doc = json.loads(text)
    doc.pop(TIMESTAMP_KEY, None)
    return doc


def csv_text(rows: list[dict]) -> str:
    """Rows share a header made from the union of keys, in first-seen order."""
    header = []
    for r in rows:
        for k in r:
            if k not in header:
                header.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _csv_value(r.get(k)) for k in header})
    return buf.getvalue()


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def loglog_text(lams, errors) -> str:
    """Two columns: log lambda and log |error|."""
    lines = ["# log_lambda log_error"]
    for l, e in zip(lams, errors):
        if e > 0:
            lines.append(f"{math.log(l)!r} {math.log(abs(e))!r}")
    return "\n".join(lines) + "\n"


def config_hash(mapping: dict) -> str:
    """Short stable hash of a resolved configuration."""
    text = json.dumps(_plain(mapping), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def plot_rate(path, report: dict) -> None:
    """Log-log figure of the mobility error with the fitted line and reference slopes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report["rows"]
    lams = np.array([r["lam"] for r in rows])
    errs = np.array([r["error_norm"] for r in rows])
    ses = np.array([r["error_norm_se"] for r in rows])
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    seeds = sorted({r["seed"] for r in rows})
    for s in seeds:
        sel = np.array([r["seed"] == s for r in rows])
        ax.errorbar(lams[sel], errs[sel], yerr=ses[sel], fmt="o", ms=3, alpha=0.6, lw=0.8)
    grid = np.unique(lams)
    med = np.array([np.median(errs[lams == l]) for l in grid])
    ax.plot(grid, med, "k-", lw=1.5, label="ensemble median")
    fit = report["fit"]["pooled"]
    xs = np.geomspace(grid.min(), grid.max(), 50)
    if fit.get("beta") is not None:
        ax.plot(xs, np.exp(fit["intercept"]) * xs ** fit["beta"], "C3--",
                label=f"pooled fit, slope {fit['beta']:.2f}")
    anchor = med[-1] if len(med) else 1.0
    top = grid.max()
    for slope, style, name in ((1.0, ":", "slope 1"),
                               (report["fit"]["reference_slopes"]["beta_star_sup"], "-.", "slope beta*")):
        if slope is not None:
            ax.plot(xs, anchor * (xs / top) ** slope, "0.4", ls=style, lw=1, label=name)
    if report.get("environment", {}).get("d") == 2:
        c = anchor / (top * math.sqrt(math.log(1 / top)))
        ax.plot(xs, c * xs * np.sqrt(np.log(1 / xs)), "0.6", ls="--", lw=1, label="lam sqrt(log 1/lam)")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel("|l_X / lambda - Sigma_X e1|")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None, "CreationDate": None})
    plt.close(fig)


def write_text(path, text: str) -> Path:
    p = Path(path)
    tmp = p.with_name(p.name + ".part")
    tmp.write_text(text)
    tmp.replace(p)
    return p
