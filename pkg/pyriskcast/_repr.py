"""Jupyter/IPython display representations.

This module contains all HTML rendering logic, keeping result classes clean.
Functions are only called when objects are displayed in Jupyter notebooks.
"""

from __future__ import annotations

import math
from html import escape
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .dataframe import ComparisonTable, ScoreReport
    from .infer import PosteriorFit


# --- Styling ---
# Minimal inline CSS with rc- prefix to avoid conflicts
_STYLES = """\
<style>
.rc{font-family:system-ui,-apple-system,sans-serif;font-size:13px;line-height:1.4}
.rc table{border-collapse:collapse;margin:4px 0}
.rc td,.rc th{padding:4px 10px 4px 0;text-align:left;vertical-align:top}
.rc th{color:#6b7280;font-weight:500;white-space:nowrap}
.rc .m{font-family:ui-monospace,monospace;font-size:12px}
.rc .b{font-weight:700}
.rc .d{color:#6b7280}
.rc .pill{display:inline-block;padding:1px 6px;border-radius:4px;font-size:11px;font-weight:500}
.rc .pill-green{background:#dcfce7;color:#166534}
.rc .pill-red{background:#fee2e2;color:#991b1b}
.rc .pill-yellow{background:#fef9c3;color:#854d0e}
.rc .pill-gray{background:#f3f4f6;color:#374151}
</style>"""

_MISSING = "n/a"


def _num(v: float | None, digits: int = 4) -> str:
    if v is None or not math.isfinite(v):
        return _MISSING
    return f'<span class="m">{v:.{digits}g}</span>'


def _pill(text: str, color: str) -> str:
    return f'<span class="pill pill-{color}">{escape(text)}</span>'


def _status_pill(status: str) -> str:
    color = {"ok": "green", "failed": "red", "not_converged": "yellow"}.get(status, "gray")
    return _pill(status, color)


def _row(label: str, value: str) -> str:
    return f"<tr><th>{label}</th><td>{value}</td></tr>"


def _table(header: Iterable[str], rows: Iterable[str]) -> str:
    head = "".join(f"<th>{escape(h)}</th>" for h in header)
    return f"<table><tr>{head}</tr>{''.join(rows)}</table>"


def _wrap(content: str) -> str:
    return f'{_STYLES}<div class="rc">{content}</div>'


# --- Result renderers ---


def comparison_html(table: ComparisonTable) -> str:
    """Comparison rows with the per-basis best DIC and CV values in bold."""
    rows = []
    for r in table:
        dic = _num(r.dic, 6)
        cv = _num(r.cv_log_score, 5)
        if r.best_dic:
            dic = f'<span class="b">{dic}</span>'
        if r.best_cv:
            cv = f'<span class="b">{cv}</span>'
        rows.append(
            f'<tr><td class="m">{escape(r.model_id)}</td><td>{_status_pill(r.status.value)}</td>'
            f"<td>{dic}</td><td>{_num(r.pd)}</td><td>{cv}</td>"
            f'<td class="d">{escape(r.message)}</td></tr>'
        )
    return _wrap(_table(("model", "status", "DIC", "pD", "CV log-score", ""), rows))


def score_html(report: ScoreReport) -> str:
    rows = []
    for r in report:
        flag = _pill(r.flag.value, "yellow") if r.flag is not None else ""
        rows.append(
            f'<tr><td class="m">{escape(r.region)}</td><td>{escape(r.set.value)}</td>'
            f"<td>{_num(r.nrmse)}</td><td>{_num(r.nis)}</td><td>{flag}</td></tr>"
        )
    return _wrap(_table(("region", "set", "NRMSE", "NIS", "flag"), rows))


def fit_html(fit: PosteriorFit) -> str:
    hyper = ", ".join(
        f"{name.removeprefix('log_')}={_num(math.exp(value))}"
        for name, value in fit.hyper_hat.model_dump().items()
        if value is not None
    )
    it = fit.iterations
    rows = [
        _row("Model", f'<span class="m">{escape(fit.model_id)}</span>'),
        _row("Status", _status_pill("ok" if fit.converged else "not_converged")),
        _row("Log marginal", _num(fit.log_marginal, 8)),
        _row("Hyperparameters", hyper or _MISSING),
        _row("Latent dimension", str(fit.latent_mode.size)),
        _row("Iterations", f"{it.objective_evaluations} evaluations, {it.newton_total} Newton steps"),
    ]
    return _wrap(f"<table>{''.join(rows)}</table>")
