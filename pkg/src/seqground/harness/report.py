"""Deterministic JSON / CSV / aligned-text report files.

Reports carry no timestamps or timings, so identical runs produce identical
bytes; wall-clock numbers go to a separate ``timing.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

from .. import __version__
from .ablation import ComparisonTable, VariantRow
from .metrics import SUBSET_KEYS, MetricsReport

REPORT_FORMAT = "seqground-report"
REPORT_VERSION = 1


def revision() -> str:
    """Version plus a digest of the package sources, in ``git describe`` style."""
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha1()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"v{__version__}-g{h.hexdigest()[:12]}"


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.4f}" if isinstance(x, float) else str(x)


def table_to_dict(table: ComparisonTable) -> dict:
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "kind": "comparison",
        "revision": revision(),
        "baseline": table.baseline,
        "seeds": table.seeds,
        "rows": [{
            "variant": r.variant,
            "config_hash": r.config_hash,
            "mean": r.mean,
            "spread": r.spread,
            "delta": r.delta,
            "subset_delta_t_acc": r.subset_delta_t_acc,
            "reports": [rep.to_dict() for rep in r.reports],
        } for r in table.rows],
    }


def table_from_dict(doc: dict) -> ComparisonTable:
    if doc.get("format") != REPORT_FORMAT or doc.get("kind") != "comparison":
        raise ValueError("not a seqground comparison report")
    rows = [VariantRow(r["variant"], r["config_hash"], [MetricsReport.from_dict(x) for x in r["reports"]],
                       r["mean"], r["spread"], r["delta"], r["subset_delta_t_acc"]) for r in doc["rows"]]
    return ComparisonTable(doc["baseline"], list(doc["seeds"]), rows)


CSV_FIELDS = ["variant", "seed", "config_hash", "s_acc", "t_acc", "delta_s_acc", "delta_t_acc",
              *[f"t_acc@{k}" for k in SUBSET_KEYS], "param_count", "fusion_param_count"]


def table_to_csv(table: ComparisonTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in table.rows:
        for rep in r.reports:
            w.writerow([r.variant, rep.seed, r.config_hash, _fmt(rep.s_acc), _fmt(rep.t_acc),
                        _fmt(r.delta["s_acc"]), _fmt(r.delta["t_acc"]),
                        *[_fmt(rep.subset_t_acc.get(k)) for k in SUBSET_KEYS],
                        rep.param_count, rep.fusion_param_count])
    return buf.getvalue()


def table_to_text(table: ComparisonTable) -> str:
    head = ["variant", "s-acc", "t-acc", "ds-acc", "dt-acc", *[f"dt@{k}" for k in SUBSET_KEYS]]
    lines = [head]
    for r in table.rows:
        def ms(key):
            sp = r.spread.get(key)
            return f"{100 * r.mean[key]:.1f}" + (f"+-{100 * sp:.1f}" if sp is not None else "")
        lines.append([r.variant, ms("s_acc"), ms("t_acc"), f"{100 * r.delta['s_acc']:+.1f}",
                      f"{100 * r.delta['t_acc']:+.1f}",
                      *[f"{100 * r.subset_delta_t_acc[k]:+.1f}" if k in r.subset_delta_t_acc else "-"
                        for k in SUBSET_KEYS]])
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    out = [f"baseline: {table.baseline}   seeds: {table.seeds}   revision: {revision()}"]
    out += ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
            for row in lines]
    return "\n".join(out) + "\n"


def metrics_to_dict(rep: MetricsReport, config: dict | None = None) -> dict:
    return {"format": REPORT_FORMAT, "version": REPORT_VERSION, "kind": "metrics", "revision": revision(),
            "config": config, "metrics": rep.to_dict()}


def metrics_to_csv(rep: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fields = ["variant", "seed", "s_acc", "t_acc", *[f"t_acc@{k}" for k in SUBSET_KEYS]]
    w.writerow(fields)
    w.writerow([rep.variant, rep.seed, _fmt(rep.s_acc), _fmt(rep.t_acc),
                *[_fmt(rep.subset_t_acc.get(k)) for k in SUBSET_KEYS]])
    return buf.getvalue()


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def report_emit(report, out_dir, formats=("json", "csv", "txt"), stem: str | None = None,
                config: dict | None = None) -> list[Path]:
    """Write ``report`` (a ComparisonTable or MetricsReport) into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    if isinstance(report, ComparisonTable):
        stem = stem or "comparison"
        docs = {"json": _dump(table_to_dict(report)), "csv": table_to_csv(report), "txt": table_to_text(report)}
        timing = {f"{r.variant}@{rep.seed}": rep.wall_clock for r in report.rows for rep in r.reports}
    elif isinstance(report, MetricsReport):
        stem = stem or "report"
        docs = {"json": _dump(metrics_to_dict(report, config)), "csv": metrics_to_csv(report)}
        timing = {"wall_clock": report.wall_clock}
    else:
        raise TypeError(f"cannot emit {type(report).__name__}")
    written = []
    for fmt in formats:
        if fmt not in docs:
            continue
        path = out / f"{stem}.{fmt}"
        path.write_text(docs[fmt])
        written.append(path)
    if any(v is not None for v in timing.values()):
        (out / f"{stem}.timing.json").write_text(_dump(timing))
    return written


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())

