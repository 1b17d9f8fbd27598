"""RunReport: one row per (seed, ratio), emitted as CSV and markdown."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from remi.errors import FormatError

EVALUATOR_NAMES = ("mf_wb", "mf_bb", "mia_wb", "mia_bb")
PHASES = ("before", "after", "retrain")

INT_COLUMNS = ("seed", "n_forget", "unlearn_epochs")
STR_COLUMNS = ("status", "guide")
BOOL_COLUMNS = ("unlearn_converged",)
# wall-clock columns; everything else is reproduced bit-exactly from the same config
TIMING_COLUMNS = ("t_unlearn", "t_privacy_loss", "t_retrain", "speedup")


def _columns():
    cols = ["seed", "ratio", "n_forget", "status", "guide", "guide_heldout_acc"]
    for what in ("acc_df", "acc_dr", "acc_test"):
        cols += [f"{what}_{p}" for p in PHASES]
    for name in EVALUATOR_NAMES:
        cols += [f"attack_{name}_{p}" for p in PHASES]
        cols += [f"attack_{name}_do_{p}" for p in PHASES]
        cols.append(f"attack_{name}_after_xguide")
    cols += ["mean_prob_do"] + [f"mean_prob_df_{p}" for p in PHASES]
    cols += [f"kl_{p}" for p in PHASES]
    cols += [f"efficacy_proxy_{p}" for p in PHASES]
    cols += ["unlearn_epochs", "unlearn_converged"]
    cols += list(TIMING_COLUMNS)
    return tuple(cols)


COLUMNS = _columns()


def empty_row():
    return dict.fromkeys(COLUMNS)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(col, text):
    if text == "":
        return None
    if col in STR_COLUMNS:
        return text
    if col in INT_COLUMNS:
        return int(text)
    if col in BOOL_COLUMNS:
        if text not in ("True", "False"):
            raise FormatError(f"column {col}: expected True/False, got {text!r}")
        return text == "True"
    return float(text)


def _same(a, b):
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


@dataclass
class RunReport:
    name: str = "experiment"
    arch: str = ""
    rows: list = field(default_factory=list)

    def complete_rows(self):
        return [r for r in self.rows if r["status"] == "complete"]

    @property
    def incomplete(self):
        return any(r["status"] != "complete" for r in self.rows)

    def row(self, seed, ratio):
        for r in self.rows:
            if r["seed"] == seed and r["ratio"] == ratio:
                return r
        raise KeyError((seed, ratio))

    def equal(self, other, ignore=TIMING_COLUMNS):
        """Field-by-field equality, NaN-aware, skipping ``ignore`` columns."""
        if len(self.rows) != len(other.rows):
            return False
        return all(_same(a[c], b[c]) for a, b in zip(self.rows, other.rows) for c in COLUMNS if c not in ignore)

    # CSV -----------------------------------------------------------------------

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# name={self.name} arch={self.arch}\n")
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for r in self.rows:
                writer.writerow([_fmt(r[c]) for c in COLUMNS])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise FormatError(f"{path}: missing report header line")
            meta = dict(kv.split("=", 1) for kv in first[2:].split())
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != COLUMNS:
                raise FormatError(f"{path}: unexpected column layout")
            rows = [{c: _parse(c, v) for c, v in zip(COLUMNS, rec)} for rec in reader]
        return cls(meta.get("name", ""), meta.get("arch", ""), rows)

    # markdown ------------------------------------------------------------------

    def to_markdown(self):
        out = [f"# {self.name} ({self.arch})", ""]
        out += _table("Classification accuracy",
                      ["arch", "seed", "ratio", "phase", "D_f", "D_r", "test"],
                      [[self.arch, r["seed"], r["ratio"], p, r[f"acc_df_{p}"], r[f"acc_dr_{p}"], r[f"acc_test_{p}"]]
                       for r in self.rows for p in PHASES], self.rows, per_row=len(PHASES))
        out += _table("Attack accuracy on D_f (share flagged as members)",
                      ["seed", "ratio", "evaluator", "before", "after", "retrain", "D_o before", "D_o after"],
                      [[r["seed"], r["ratio"], e, r[f"attack_{e}_before"], r[f"attack_{e}_after"],
                        r[f"attack_{e}_retrain"], r[f"attack_{e}_do_before"], r[f"attack_{e}_do_after"]]
                       for r in self.rows for e in EVALUATOR_NAMES], self.rows, per_row=len(EVALUATOR_NAMES))
        out += _table("Cross-attack (guide x evaluator, D_f)",
                      ["seed", "ratio", "guide", "evaluator", "before", "after"],
                      [row for r in self.rows for row in _cross_rows(r)], self.rows, per_row=4)
        out += _table("Attack-probability distributions and efficacy",
                      ["seed", "ratio", "mean p D_f before", "mean p D_f after", "mean p D_o", "KL before",
                       "KL after", "efficacy_proxy before", "efficacy_proxy after", "efficacy_proxy retrain"],
                      [[r["seed"], r["ratio"], r["mean_prob_df_before"], r["mean_prob_df_after"], r["mean_prob_do"],
                        r["kl_before"], r["kl_after"], r["efficacy_proxy_before"], r["efficacy_proxy_after"],
                        r["efficacy_proxy_retrain"]] for r in self.rows], self.rows)
        out += _table("Latency (seconds)",
                      ["seed", "ratio", "epochs", "t_unlearn", "t_privacy_loss", "t_retrain", "speedup"],
                      [[r["seed"], r["ratio"], r["unlearn_epochs"], r["t_unlearn"], r["t_privacy_loss"],
                        r["t_retrain"], r["speedup"]] for r in self.rows], self.rows)
        return "\n".join(out)


def _cross_rows(r):
    guide = r["guide"]
    other = "mf_bb" if guide == "mf_wb" else "mf_wb"
    rows = []
    for g, suffix in ((guide, "after"), (other, "after_xguide")):
        for e in ("mf_wb", "mf_bb"):
            rows.append([r["seed"], r["ratio"], g, e, r[f"attack_{e}_before"], r[f"attack_{e}_{suffix}"]])
    return rows


def _cell(v):
    if v is None:
        return "incomplete"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _table(title, header, body, rows, per_row=1):
    lines = [f"## {title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for i, cells in enumerate(body):
        status = rows[i // per_row]["status"]
        text = [_cell(c) for c in cells]
        if status != "complete":
            text[-1] = f"{text[-1]} ({status})"
        lines.append("| " + " | ".join(text) + " |")
    return lines + [""]
