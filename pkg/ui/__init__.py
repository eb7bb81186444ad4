"""
Text rendering for reports and attention dumps.
"""

from ui.attention_view import AttentionDump, attention_dump, render_attention
from ui.report_view import render_comparison, render_report, write_comparison, write_reports

__all__ = [
    'AttentionDump',
    'attention_dump',
    'render_attention',
    'render_comparison',
    'render_report',
    'write_comparison',
    'write_reports',
]
