"""
Formatting utilities for certificates and reports
"""

import math

import numpy as np
import pandas as pd

HISTORY_COLUMNS = ['iteration', 'gamma', 'gamma_upper', 'improvement', 'margin', 'v_step', 'solves', 'wall_time']


def format_gamma(value, digits=6):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "N/A"
    return f"{value:.{digits}g}"


def format_wall_time(seconds):
    """Format a duration as M:SS.mmm, or H:MM:SS for long solves"""
    if seconds is None or pd.isna(seconds) or seconds < 0:
        return "N/A"
    if seconds >= 3600:
        hours = int(seconds // 3600)
        minutes = int(seconds % 3600 // 60)
        return f"{hours}:{minutes:02d}:{int(seconds % 60):02d}"
    minutes = int(seconds // 60)
    return f"{minutes}:{seconds % 60:06.3f}"


def format_polynomial(polynomial, precision=4, tol=1e-10):
    """Readable text of a polynomial with small coefficients dropped"""
    rounded = polynomial.prune(tol)
    if rounded.is_zero():
        return "0"
    parts = []
    for monomial, coefficient in zip(rounded.monomials(), rounded.coefficients()):
        text = f"{float(coefficient):.{precision}g}"
        name = str(monomial)
        if name in ('', '1'):
            parts.append(text)
        elif text == '1':
            parts.append(name)
        elif text == '-1':
            parts.append(f"-{name}")
        else:
            parts.append(f"{text}*{name}")
    return ' + '.join(parts).replace('+ -', '- ')


def format_matrix(matrix, precision=4):
    if matrix is None:
        return "N/A"
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return "[]"
    rows = ['  '.join(f"{value:>{precision + 7}.{precision}g}" for value in row) for row in matrix]
    return '\n'.join(rows)


def history_frame(certificate, timings=None):
    """Per-iteration gamma table of a certificate, with wall times when given"""
    frame = pd.DataFrame(certificate.history)
    if timings and not frame.empty:
        frame = frame.merge(pd.DataFrame(timings), on='iteration', how='left')
    for column in HISTORY_COLUMNS:
        if column not in frame.columns:
            frame[column] = np.nan
    return frame[HISTORY_COLUMNS]


def certificate_summary(certificate, timings=None):
    """Flat dict describing a certificate for logs and API responses"""
    wall = sum(record['wall_time'] for record in timings) if timings else None
    return {
        'plant': certificate.metadata.get('plant'),
        'iqc': certificate.metadata.get('iqc'),
        'hardness': certificate.hardness,
        'gamma': certificate.gamma,
        'T': certificate.T,
        'R': certificate.R,
        'deg_V': certificate.metadata.get('deg_V'),
        'iterations': len(certificate.history),
        'verified': certificate.verified,
        'wall_time': wall,
        'wall_time_text': format_wall_time(wall),
    }


def report_frame(summary):
    """Two-column metric table of a validation summary"""
    rows = [{'metric': key, 'value': value} for key, value in summary.items() if key != 'counterexample']
    counterexample = summary.get('counterexample')
    if counterexample:
        rows.append({'metric': 'counterexample', 'value': counterexample.get('kind')})
    return pd.DataFrame(rows)
