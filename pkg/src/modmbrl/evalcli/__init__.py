"""Command-line evaluation harness and report formats."""

from .cli import build_parser, main
from .commands import (cmd_ablate_blind, cmd_baseline, cmd_eval, cmd_gradcheck, cmd_train,
                       load_run, parse_levels, shape_diff)
from .report import CSV_HEADER, FIELDS, REPORT_VERSION, EvalReport, ReportRow, read_csv_report

__all__ = [n for n in dir() if not n.startswith("_")]
