"""Metric reports: JSON documents, delimited tables, and rendered figures.

Every report embeds the seed and config hash of the run that produced it.
Figures are written next to the delimited output with fixed styling and no
software metadata, so re-running a command reproduces byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import PplRow

_FIG_DPI = 110


class ReportInvariantError(ValueError):
    """A report's stored aggregate disagrees with its per-query values."""


@dataclass
class MetricsReport:
    """NDCG, perplexity, and token-statistic results for one model/run."""

    k: int
    per_query_ndcg: dict[str, float]
    mean_ndcg: float
    ppl_pos: float | None = None
    ppl_neg: float | None = None
    ppl_delta: float | None = None
    doc_word_proportion: float | None = None
    stop_word_proportion: float | None = None
    skipped_empty_queries: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.per_query_ndcg:
            mean = math.fsum(self.per_query_ndcg.values()) / len(self.per_query_ndcg)
            if abs(mean - self.mean_ndcg) > 1e-12:
                raise ReportInvariantError(f"mean_ndcg {self.mean_ndcg} != per-query mean {mean}")
        if self.ppl_pos is not None and self.ppl_neg is not None:
            delta = self.ppl_neg - self.ppl_pos
            if self.ppl_delta is None or abs(delta - self.ppl_delta) > 1e-12:
                raise ReportInvariantError(f"ppl_delta {self.ppl_delta} != ppl_neg - ppl_pos = {delta}")

    @classmethod
    def build(cls, k: int, per_query_ndcg: dict[str, float], metadata: dict, **extras) -> "MetricsReport":
        mean = math.fsum(per_query_ndcg.values()) / len(per_query_ndcg) if per_query_ndcg else 0.0
        ppl_pos = extras.get("ppl_pos")
        ppl_neg = extras.get("ppl_neg")
        if ppl_pos is not None and ppl_neg is not None:
            extras = dict(extras, ppl_delta=ppl_neg - ppl_pos)
        return cls(k=k, per_query_ndcg=dict(per_query_ndcg), mean_ndcg=mean, metadata=metadata, **extras)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "per_query_ndcg": self.per_query_ndcg,
            "mean_ndcg": self.mean_ndcg,
            "ppl_pos": self.ppl_pos,
            "ppl_neg": self.ppl_neg,
            "ppl_delta": self.ppl_delta,
            "doc_word_proportion": self.doc_word_proportion,
            "stop_word_proportion": self.stop_word_proportion,
            "skipped_empty_queries": self.skipped_empty_queries,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        return cls(**payload)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def table(self) -> str:
        """Human-readable summary."""
        lines = [f"NDCG@{self.k}: {self.mean_ndcg:.4f} over {len(self.per_query_ndcg)} queries"]
        if self.ppl_pos is not None:
            lines.append(f"PPL(pos): {self.ppl_pos:.3f}  PPL(neg): {self.ppl_neg:.3f}  delta: {self.ppl_delta:.3f}")
        if self.doc_word_proportion is not None:
            lines.append(
                f"doc-word proportion: {self.doc_word_proportion:.3f}  "
                f"stop-word proportion: {self.stop_word_proportion:.3f}"
            )
        for key in sorted(self.metadata):
            lines.append(f"{key}: {self.metadata[key]}")
        return "\n".join(lines)


def write_per_query_tsv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"query_id\tndcg@{report.k}\n")
        for query_id, value in report.per_query_ndcg.items():
            fh.write(f"{query_id}\t{value:.17g}\n")


# ----------------------------------------------------------------------
# figures


def _save(fig, path) -> None:
    fig.savefig(path, dpi=_FIG_DPI, metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)


def render_ndcg_histogram(report: MetricsReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(list(report.per_query_ndcg.values()), bins=20, range=(0.0, 1.0), color="#4878cf", edgecolor="white")
    ax.set_xlabel(f"NDCG@{report.k}")
    ax.set_ylabel("queries")
    ax.set_title(f"mean NDCG@{report.k} = {report.mean_ndcg:.3f}")
    _save(fig, path)


def render_ppl_bars(rows: list[PplRow], path) -> None:
    labels = [row.label for row in rows]
    x = range(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.bar([i - width / 2 for i in x], [row.ppl_pos for row in rows], width, label="PPL positive", color="#4878cf")
    ax.bar([i + width / 2 for i in x], [row.ppl_neg for row in rows], width, label="PPL negative", color="#d65f5f")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylabel("perplexity")
    for i, row in enumerate(rows):
        ax.annotate(f"d={row.delta:.1f}", (i, max(row.ppl_pos, row.ppl_neg)), ha="center", va="bottom", fontsize=8)
    ax.legend(fontsize=8)
    _save(fig, path)


def render_sweep_curve(param: str, values: list, means: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(values, means, marker="o", color="#4878cf")
    ax.set_xlabel(param)
    ax.set_ylabel("mean NDCG")
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def render_ablation_bars(names: list[str], means: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5.6, 3.2))
    ax.bar(range(len(names)), means, color=["#4878cf"] + ["#999999"] * (len(names) - 1))
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean NDCG")
    _save(fig, path)
