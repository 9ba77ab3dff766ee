"""Render run summaries as plain text, CSV or markdown tables.

Accuracies are shown in percent with two decimals. Gains are the difference
of the two displayed values, so a rendered table is self-consistent.
"""

from __future__ import annotations

import csv
import io

from ..errors import ValidationError

FORMATS = ("plain", "csv", "markdown")


def pct(x) -> str:
    return f"{100.0 * x:.2f}"


def gain_str(base, ours) -> str:
    g = round(float(pct(ours)) - float(pct(base)), 2)
    if g == 0:
        g = 0.0  # avoid "-0.00"
    return f"{g:+.2f}"


def _render(header, rows, fmt: str) -> str:
    if fmt not in FORMATS:
        raise ValidationError(f"format must be one of {FORMATS}, got {fmt!r}")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt_row = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()  # noqa: E731
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt_row(header), sep] + [fmt_row(r) for r in rows]) + "\n"


def emit_comparison_table(summaries, fmt: str = "plain") -> str:
    """Rows are losses, columns are dataset settings; each loss gets a baseline line and a ``+Ours`` line.

    CSV is long-form (one line per cell) with the same numbers.
    """
    if fmt not in FORMATS:
        raise ValidationError(f"format must be one of {FORMATS}, got {fmt!r}")
    cells, row_order, col_order = {}, [], []
    for s in summaries:
        if s.baseline_mean is None or s.ours_mean is None:
            raise ValidationError(f"run {s.name!r} has no complete baseline/ours results")
        key = (s.row_label, s.column_label)
        if key in cells:
            raise ValidationError(f"two runs share the cell {key}")
        cells[key] = s
        if s.row_label not in row_order:
            row_order.append(s.row_label)
        if s.column_label not in col_order:
            col_order.append(s.column_label)
    for r in row_order:
        have = [c for c in col_order if (r, c) in cells]
        if have != col_order:
            raise ValidationError(f"row {r!r} covers {have}, expected the shared axis {col_order}")

    if fmt == "csv":
        rows = []
        for r in row_order:
            for c in col_order:
                s = cells[(r, c)]
                rows.append([r, c, pct(s.baseline_mean), pct(s.ours_mean), gain_str(s.baseline_mean, s.ours_mean)])
        return _render(["loss", "dataset", "baseline", "ours", "gain"], rows, fmt)

    rows = []
    for r in row_order:
        rows.append([r] + [pct(cells[(r, c)].baseline_mean) for c in col_order])
        rows.append(["+Ours"] + [
            f"{pct(cells[(r, c)].ours_mean)} ({gain_str(cells[(r, c)].baseline_mean, cells[(r, c)].ours_mean)})"
            for c in col_order
        ])
    return _render(["Loss"] + col_order, rows, fmt)


def emit_method_table(rows, fmt: str = "plain") -> str:
    """Baseline and one line per transfer method, with gains over the baseline."""
    out = []
    base = rows[0].mean if rows else None
    for i, r in enumerate(rows, start=1):
        acc = "n/a" if r.mean is None else pct(r.mean)
        gain = "-" if r.method is None or r.mean is None or base is None else gain_str(base, r.mean)
        out.append([str(i), r.label, acc, gain])
    return _render(["#", "Method", "Accuracy", "Gain"], out, fmt)


def emit_placement_table(report: dict, fmt: str = "plain") -> str:
    """Check-mark matrix of blocks carrying a residual layer, plus accuracy."""
    n = report["num_blocks"]
    out = []
    for i, row in enumerate(report["rows"], start=1):
        marks = ["✓" if k in row["blocks"] else "-" for k in range(1, n + 1)]
        acc = "n/a" if row["mean"] is None else pct(row["mean"])
        out.append([str(i)] + marks + [acc])
    return _render(["#"] + [f"Block{k}" for k in range(1, n + 1)] + ["Accuracy (%)"], out, fmt)
