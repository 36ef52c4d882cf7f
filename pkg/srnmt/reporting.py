"""Tabular and chart views of benchmark, ablation and training results."""

from pathlib import Path
from typing import List, Sequence

import pandas as pd
import plotly.express as px

from models import AblationRow, BenchReport, TrainLogEntry

BENCH_COLUMNS = ["kind", "layers", "d", "T", "B", "fwd_tok_s", "train_tok_s"]


def bench_frame(report: BenchReport) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in report.rows],
                        columns=BENCH_COLUMNS + ["peak_bytes"])


def bench_table(report: BenchReport) -> str:
    frame = bench_frame(report).round({"fwd_tok_s": 1, "train_tok_s": 1})
    header = f"threads={report.threads} warmup={report.warmup} repeats={report.repeats}"
    if any(row.kind == "lstm" for row in report.rows):
        header += f" lstm_input_feed={int(report.input_feed)}"
    return header + "\n" + frame.to_string(index=False)


def bench_rows(report: BenchReport) -> List[str]:
    """Machine rows: kind,layers,d,T,B,fwd_tok_s,train_tok_s"""
    frame = bench_frame(report)[BENCH_COLUMNS]
    return frame.to_csv(index=False, header=False, float_format="%.1f").strip().splitlines()


def ablation_frame(rows: Sequence[AblationRow]) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=list(AblationRow.model_fields))
    if frame.empty:
        return frame
    full = frame[frame.use_layer_norm & frame.multi_attention & frame.use_highway]
    if not full.empty and full.ppl.notna().all():
        frame["delta_ppl"] = frame.ppl - float(full.ppl.iloc[0])
    return frame


def ablation_table(rows: Sequence[AblationRow]) -> str:
    frame = ablation_frame(rows).copy()
    frame["ppl"] = [
        "failed to converge" if status == "failed_to_converge" else f"{ppl:.3f}"
        for status, ppl in zip(frame.status, frame.ppl)
    ]
    for flag in ("use_layer_norm", "multi_attention", "use_highway"):
        frame[flag] = frame[flag].map({True: "yes", False: "no"})
    return frame.drop(columns=["status"]).to_string(index=False)


def training_frame(entries: Sequence[TrainLogEntry]) -> pd.DataFrame:
    return pd.DataFrame([entry.model_dump() for entry in entries], columns=list(TrainLogEntry.model_fields))


def perplexity_chart(entries: Sequence[TrainLogEntry], path, title: str = "Validation perplexity over time") -> Path:
    """Write an HTML line chart of validation perplexity against wall-clock time"""
    frame = training_frame(entries).assign(stage_label=lambda f: "stage " + f["stage"].astype(str))
    fig = px.line(frame, x="wall_time", y="ppl", color="stage_label", markers=True, title=title)
    fig.update_layout(xaxis_title="Wall time (s)", yaxis_title="Perplexity", legend_title="Stage")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path))
    return path
