"""
Markdown report rendering.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from jinja2 import Template

from .logging import get_logger

TOGGLE_COLUMNS = ("CS", "AS", "MIL", "Seg", "FT")
CHECK = "✓"

REPORT_TEMPLATE = """# wsolkit report

## Localization ablation

CorLoc on the training images at IoU >= {{ iou_threshold }}.

| {{ toggle_columns | join(" | ") }} | {% for name in class_names %}{{ name }} | {% endfor %}mean CorLoc | mAP |
|{% for _ in toggle_columns %}:-:|{% endfor %}{% for _ in class_names %}--:|{% endfor %}--:|--:|
{% for row in rows -%}
| {{ row.marks | join(" | ") }} | {% for value in row.per_class %}{{ value }} | {% endfor %}{{ row.mean }} | {{ row.map }} |
{% endfor %}
{%- if sources | length > 1 %}
Rows come from: {{ sources | join(", ") }}
{% endif %}
## Detection

{% if map is not none -%}
mAP on the test images: **{{ map }}** ({{ ap_method }} AP).
{%- else -%}
mAP is undefined: no class has ground truth on the test images.
{%- endif %}

| class | AP | Cor | Loc | Sim | Oth | BG | Dup |
|---|--:|--:|--:|--:|--:|--:|--:|
{% for item in detection_rows -%}
| {{ item.name }} | {{ item.ap }} | {{ item.errors.Cor }} | {{ item.errors.Loc }} | {{ item.errors.Sim }} | {{ item.errors.Oth }} | {{ item.errors.BG }} | {{ item.errors.Dup }} |
{% endfor %}
## Proposal mining

Overlap threshold t = {{ mining.overlap }}.

| M | CorLoc@M | recall@M |
|--:|--:|--:|
{% for row in mining_rows -%}
| {{ row.m }} | {{ row.corloc }} | {{ row.recall }} |
{% endfor %}"""


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    return f"{100.0 * float(value):.1f}"


class ReportGenerator:
    """Renders the consolidated evaluation payload as a Markdown document."""

    def __init__(self) -> None:
        self.template = Template(REPORT_TEMPLATE, keep_trailing_newline=True)

    def generate(self, report: dict[str, Any], output_path: Path | None = None) -> str:
        content = self.template.render(**self._prepare_context(report))
        if output_path is not None:
            output_path.parent.mkdir(parents=True, exist_ok=True)
            output_path.write_text(content, encoding="utf-8")
            get_logger(__name__).info("Report rendered", output_path=str(output_path))
        return content

    def _prepare_context(self, report: dict[str, Any]) -> dict[str, Any]:
        class_names = list(report.get("class_names", []))
        rows = []
        for row in report.get("ablation", []):
            toggles = row.get("toggles", {})
            corloc = row.get("corloc", {})
            per_class = corloc.get("per_class", {})
            rows.append(
                {
                    "marks": [CHECK if toggles.get(name) else "" for name in TOGGLE_COLUMNS],
                    "per_class": [_fmt(per_class.get(name)) for name in class_names],
                    "mean": _fmt(corloc.get("mean")),
                    "map": _fmt(row["map"]) if "map" in row else "",
                }
            )

        detection = report.get("detection", {})
        detection_rows = [
            {"name": name, "ap": _fmt(item.get("ap")), "errors": item.get("errors", {})}
            for name, item in sorted(
                detection.get("classes", {}).items(), key=lambda pair: pair[1].get("class", 0)
            )
        ]

        mining = report.get("mining", {})
        corloc_m = mining.get("corloc_at_m", {})
        recall_m = mining.get("recall_at_m", {})
        mining_rows = [
            {
                "m": m,
                "corloc": _fmt(corloc_m[m].get("mean")),
                "recall": _fmt(recall_m.get(m, {}).get("mean")),
            }
            for m in sorted(corloc_m, key=int)
        ]

        sources = sorted({str(row.get("source", "")) for row in report.get("ablation", [])})
        return {
            "iou_threshold": report.get("iou_threshold", 0.5),
            "toggle_columns": TOGGLE_COLUMNS,
            "class_names": class_names,
            "rows": rows,
            "sources": sources,
            "map": None if detection.get("map") is None else _fmt(detection["map"]),
            "ap_method": detection.get("ap_method", "all-points"),
            "detection_rows": detection_rows,
            "mining": {"overlap": mining.get("overlap", "n/a")},
            "mining_rows": mining_rows,
        }
