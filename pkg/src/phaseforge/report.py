"""Results database plus the settings-grid (table1) and layer-sweep (table2) reports.

The database is a long-format CSV: one row per (config, setting, phonetic
model, causality, layer label, metric) cell, plus the seed and checkpoint
hash of the run that produced it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

REPORT_METRICS = ("CBAK", "COVL", "CSIG", "PESQ", "VISQOL")
SETTING_LABELS = {"base": "Base", "regularization": "Reg", "supervision": "Sup",
                  "conditioning": "Cond"}
SETTING_ORDER = ("Base", "Reg", "Sup", "Cond")
MISSING = "-"
CAUSALITY = ((True, "Causal"), (False, "Non-causal"))


@dataclass(frozen=True)
class ResultRow:
    config: str
    setting: str
    phonetic_model: str
    causal: bool
    metric: str
    value: float
    layer: str = ""
    seed: int | None = None
    checkpoint_sha256: str = ""

    @property
    def table1_key(self):
        return (self.config, self.setting, self.phonetic_model, self.causal, self.metric)


def format_value(value: float) -> str:
    """Two decimals when that is exact, otherwise the shortest round-trip repr."""
    text = f"{value:.2f}"
    return text if float(text) == value else repr(float(value))


def _parse_bool(text: str) -> bool:
    if text in ("True", "true", "1"):
        return True
    if text in ("False", "false", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def save_db(path, rows: list[ResultRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(ResultRow)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            record = asdict(row)
            record["value"] = format_value(row.value)
            record["seed"] = "" if row.seed is None else row.seed
            writer.writerow(record)
    return path


def load_db(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        for record in csv.DictReader(fh):
            rows.append(ResultRow(
                config=record["config"], setting=record["setting"],
                phonetic_model=record["phonetic_model"], causal=_parse_bool(record["causal"]),
                metric=record["metric"], value=float(record["value"]),
                layer=record.get("layer") or "",
                seed=int(record["seed"]) if record.get("seed") else None,
                checkpoint_sha256=record.get("checkpoint_sha256") or ""))
    return rows


def metric_columns(rows: list[ResultRow], metrics=None) -> list[str]:
    if metrics is not None:
        return list(metrics)
    present = {r.metric for r in rows}
    if not present:
        return list(REPORT_METRICS)
    return [m for m in REPORT_METRICS if m in present] + sorted(present - set(REPORT_METRICS))


def _unique(seq):
    return list(dict.fromkeys(seq))


# ---------------------------------------------------------------------------
# table1: configs x settings x phonetic models, causal and non-causal blocks
# ---------------------------------------------------------------------------

def table1_rows(rows: list[ResultRow], metrics=None) -> list[list[str]]:
    rows = [r for r in rows if not r.layer]
    metrics = metric_columns(rows, metrics)
    header = ["Config", "Setting", "Phonetic Model"]
    header += [f"{label} {m}" for _, label in CAUSALITY for m in metrics]
    cells = {r.table1_key: r.value for r in rows}
    table = [header]
    for config in _unique(r.config for r in rows):
        mine = [r for r in rows if r.config == config]
        order = [("Base", MISSING)] if any(r.setting == "Base" for r in mine) else []
        for model in _unique(r.phonetic_model for r in mine if r.setting != "Base"):
            for setting in SETTING_ORDER[1:]:
                order.append((setting, model))
        order += _unique((r.setting, r.phonetic_model) for r in mine
                         if (r.setting, r.phonetic_model) not in order)
        for setting, model in order:
            line = [config, setting, model]
            for causal, _ in CAUSALITY:
                for m in metrics:
                    value = cells.get((config, setting, model, causal, m))
                    line.append(MISSING if value is None else format_value(value))
            table.append(line)
    return table


def parse_table1(text: str) -> list[ResultRow]:
    reader = list(csv.reader(io.StringIO(text)))
    header, body = reader[0], reader[1:]
    out = []
    for line in body:
        config, setting, model = line[:3]
        for name, cell in zip(header[3:], line[3:]):
            if cell == MISSING:
                continue
            label, metric = name.split(" ", 1)
            out.append(ResultRow(config, setting, model, label == "Causal", metric, float(cell)))
    return out


# ---------------------------------------------------------------------------
# table2: layer selection sweep
# ---------------------------------------------------------------------------

def _layer_sort_key(label: str):
    if label == "Baseline":
        return (0, 0, label)
    if label.isdigit():
        return (1, int(label), label)
    if label.startswith("Avg"):
        return (2, 0, label)
    if label.startswith("Lrn-W-Avg"):
        return (3, 0, label)
    return (4, 0, label)


def table2_rows(rows: list[ResultRow], metrics=None) -> list[list[str]]:
    rows = [r for r in rows if r.layer]
    metrics = metric_columns(rows, metrics)
    cells = {(r.layer, r.metric): r.value for r in rows}
    table = [["Layer #", *metrics]]
    for label in sorted(_unique(r.layer for r in rows), key=_layer_sort_key):
        table.append([label] + [MISSING if (label, m) not in cells else format_value(cells[(label, m)])
                                for m in metrics])
    return table


def parse_table2(text: str) -> dict[tuple[str, str], float]:
    reader = list(csv.reader(io.StringIO(text)))
    header = reader[0]
    return {(line[0], metric): float(cell)
            for line in reader[1:] for metric, cell in zip(header[1:], line[1:]) if cell != MISSING}


def table2_cells(rows: list[ResultRow]) -> dict[tuple[str, str], float]:
    return {(r.layer, r.metric): r.value for r in rows if r.layer}


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def to_csv(table: list[list[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    return buf.getvalue()


def to_markdown(table: list[list[str]]) -> str:
    header, body = table[0], table[1:]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(line) + " |" for line in body]
    return "\n".join(lines) + "\n"


def relative_improvements(rows: list[ResultRow]) -> list[list[str]]:
    """Per-metric percentage change of every non-baseline cell over its config's Base cell."""
    base = {(r.config, r.causal, r.metric): r.value for r in rows
            if not r.layer and r.setting == "Base"}
    table = [["Config", "Setting", "Phonetic Model", "Causal", "Metric", "Relative %"]]
    for r in rows:
        if r.layer or r.setting == "Base":
            continue
        ref = base.get((r.config, r.causal, r.metric))
        if ref:
            change = 100.0 * (r.value - ref) / abs(ref)
            table.append([r.config, r.setting, r.phonetic_model, str(r.causal), r.metric,
                          f"{change:.3f}"])
    return table


def report(rows_or_path, out_dir, metrics=None, layer_weights: dict | None = None) -> dict[str, Path]:
    """Write table1/table2 CSV + Markdown, relative improvements and the weight chart."""
    rows = load_db(rows_or_path) if isinstance(rows_or_path, (str, Path)) else list(rows_or_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, table in (("table1", table1_rows(rows, metrics)), ("table2", table2_rows(rows, metrics)),
                        ("improvements", relative_improvements(rows))):
        written[f"{name}.csv"] = out_dir / f"{name}.csv"
        written[f"{name}.csv"].write_text(to_csv(table))
        if name != "improvements":
            written[f"{name}.md"] = out_dir / f"{name}.md"
            written[f"{name}.md"].write_text(to_markdown(table))
    if layer_weights:
        from .phonetic import _plot_weights

        path = out_dir / "layer_weights.png"
        _plot_weights(layer_weights, path, "Learned layer weights")
        written[path.name] = path
    return written
