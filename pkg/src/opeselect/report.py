"""Render a SelectionReport as a markdown or TSV table, or as JSON."""
from __future__ import annotations

from typing import Dict, List, Union

from .selection import SelectionReport

DECIMALS = 4
FORMATS = ("markdown", "tsv", "json")


def _cell(report: SelectionReport, situation: str, name: str) -> Union[float, str]:
    d = report.direction(situation)
    if not d.defined:
        return "undefined"
    if name in d.rrmse:
        return d.rrmse[name]
    if name in d.failures:
        return "failed"
    return "undefined"


def _fmt(v: Union[float, str]) -> str:
    return v if isinstance(v, str) else f"{v:.{DECIMALS}f}"


def render_markdown(report: SelectionReport) -> str:
    """One row per direction, one column per estimator; the best cell is bold."""
    names = list(report.estimators)
    lines = [
        f"Relative RMSE of off-policy estimators (K={report.k}, seed={report.seed})",
        "",
        "| OPE situation | " + " | ".join(names) + " |",
        "| --- | " + " | ".join("---" for _ in names) + " |",
    ]
    for d in report.directions:
        cells = []
        for name in names:
            text = _fmt(_cell(report, d.situation, name))
            cells.append(f"**{text}**" if name == d.best else text)
        lines.append(f"| {d.situation} | " + " | ".join(cells) + " |")
    lines.append("")
    gt = ", ".join(f"V({k}) = {v:.{DECIMALS}f}" for k, v in report.ground_truths.items())
    lines.append(f"Ground truth (on-policy means): {gt}")
    notes = []
    for d in report.directions:
        if not d.defined:
            notes.append(f"- {d.situation}: {d.undefined_reason}")
        for name, msg in d.failures.items():
            notes.append(f"- {d.situation} / {name} failed: {msg}")
    if notes:
        lines.append("")
        lines.extend(notes)
    return "\n".join(lines) + "\n"


def render_tsv(report: SelectionReport) -> str:
    """Tab-separated table; the best cell carries a ``*`` suffix."""
    names = list(report.estimators)
    lines = ["\t".join(["situation"] + names)]
    for d in report.directions:
        cells = []
        for name in names:
            text = _fmt(_cell(report, d.situation, name))
            cells.append(text + "*" if name == d.best else text)
        lines.append("\t".join([d.situation] + cells))
    return "\n".join(lines) + "\n"


def render(report: SelectionReport, fmt: str = "markdown") -> str:
    if fmt == "markdown":
        return render_markdown(report)
    if fmt == "tsv":
        return render_tsv(report)
    if fmt == "json":
        return report.to_json()
    raise ValueError(f"unknown output format {fmt!r}; choose from {FORMATS}")


def parse_markdown_table(text: str) -> Dict[str, Dict[str, Union[float, str]]]:
    """Read the cells of :func:`render_markdown` back; bold markers are dropped."""
    rows: List[List[str]] = [
        [c.strip() for c in line.strip().strip("|").split("|")]
        for line in text.splitlines()
        if line.startswith("|")
    ]
    header, body = rows[0], rows[2:]
    out: Dict[str, Dict[str, Union[float, str]]] = {}
    for row in body:
        cells: Dict[str, Union[float, str]] = {}
        for name, raw in zip(header[1:], row[1:]):
            raw = raw.strip("*")
            try:
                cells[name] = float(raw)
            except ValueError:
                cells[name] = raw
        out[row[0]] = cells
    return out


def best_from_markdown(text: str) -> Dict[str, str]:
    """Situation -> estimator whose cell is bold."""
    rows = [
        [c.strip() for c in line.strip().strip("|").split("|")]
        for line in text.splitlines()
        if line.startswith("|")
    ]
    header = rows[0]
    out = {}
    for row in rows[2:]:
        for name, raw in zip(header[1:], row[1:]):
            if raw.startswith("**"):
                out[row[0]] = name
    return out
