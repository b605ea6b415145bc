import html
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import plotly.figure_factory as ff
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from config import VISUALIZATION
from core.models import DisplacementField, Image

# Configure logging
logger = logging.getLogger(__name__)


def format_metric(value, digits: int = 4) -> str:
    """Format a metric value for tables; missing values show as n/a."""
    try:
        if value is None or (isinstance(value, float) and np.isnan(value)):
            return "n/a"
        magnitude = abs(float(value))
        if magnitude != 0 and (magnitude < 10 ** -(digits - 1) or magnitude >= 1e5):
            return f"{float(value):.{digits - 1}e}"
        return f"{float(value):.{digits}f}"
    except Exception as e:
        logger.error(f"Error formatting metric: {str(e)}")
        return str(value)


def _error_figure(message: str) -> go.Figure:
    fig = go.Figure()
    fig.add_annotation(
        x=0.5, y=0.5,
        text=message,
        showarrow=False,
        font=dict(size=14, color="red"),
        xref="paper",
        yref="paper"
    )
    return fig


def _style(fig: go.Figure, title: str, height: int) -> go.Figure:
    fig.update_layout(
        title={'text': title, 'x': 0.5, 'xanchor': 'center'},
        height=height,
        margin=dict(t=60, l=50, r=20, b=50),
        plot_bgcolor='white',
        paper_bgcolor='white'
    )
    fig.update_xaxes(showgrid=True, gridwidth=1, gridcolor='lightgray')
    fig.update_yaxes(showgrid=True, gridwidth=1, gridcolor='lightgray')
    return fig


def middle_slice(data: np.ndarray, ndim: int) -> np.ndarray:
    """2D view of a grid: the array itself, or the middle slice along axis 0 for 3D."""
    if ndim == 3:
        return data[data.shape[0] // 2]
    return data


def create_loss_trace_chart(trace: pd.DataFrame, component: str = 'total') -> go.Figure:
    """
    Line chart of a loss component against the step, one line per scale.

    Args:
        trace: Loss trace with columns step, reconstruction, smoothness, total
            and optionally scale
        component: Column to plot
    """
    try:
        fig = go.Figure()
        colors = VISUALIZATION['COLORS']['SCALE_COLORS']
        groups = trace.groupby('scale', sort=False) if 'scale' in trace.columns else [(1.0, trace)]
        offset = 0
        for i, (scale, frame) in enumerate(groups):
            # steps restart at every scale; lay scales out one after another
            fig.add_trace(go.Scatter(
                x=frame['step'] + offset,
                y=frame[component],
                mode='lines',
                name=f"scale {scale:g}",
                line=dict(width=2, color=colors[i % len(colors)])
            ))
            offset += len(frame)
        fig.update_layout(xaxis_title="Step", yaxis_title=component.capitalize(), hovermode='x unified')
        return _style(fig, f"Loss trace ({component})", VISUALIZATION['CHART_HEIGHTS']['TRACE'])
    except Exception as e:
        logger.error(f"Error creating loss trace chart: {str(e)}")
        return _error_figure(f"Error creating chart: {str(e)}")


def create_field_magnitude_heatmap(field: DisplacementField, title: str = "Displacement magnitude (px)") -> go.Figure:
    """Heatmap of per-point displacement norms (middle slice for 3D fields)."""
    try:
        magnitude = middle_slice(field.norms(), field.ndim)
        fig = go.Figure(go.Heatmap(z=magnitude, colorscale=VISUALIZATION['COLORSCALE'], colorbar=dict(title="px")))
        fig.update_yaxes(autorange='reversed', scaleanchor='x')
        return _style(fig, title, VISUALIZATION['CHART_HEIGHTS']['FIELD'])
    except Exception as e:
        logger.error(f"Error creating field heatmap: {str(e)}")
        return _error_figure(f"Error creating chart: {str(e)}")


def create_field_quiver(field: DisplacementField, stride: Optional[int] = None) -> go.Figure:
    """
    Arrow plot of the in-plane displacement on a subsampled grid.

    Rows run down the y axis, columns along x.
    """
    try:
        stride = stride or VISUALIZATION['QUIVER_STRIDE']
        vectors = middle_slice(field.vectors, field.ndim)
        if field.ndim == 3:
            vectors = vectors[..., 1:]
        rows, cols = np.mgrid[0:vectors.shape[0]:stride, 0:vectors.shape[1]:stride]
        sampled = vectors[::stride, ::stride]
        fig = ff.create_quiver(
            cols.ravel(), rows.ravel(),
            sampled[..., 1].ravel(), sampled[..., 0].ravel(),
            scale=1.0,
            line=dict(width=1, color=VISUALIZATION['COLORS']['TOTAL'])
        )
        fig.update_yaxes(autorange='reversed', scaleanchor='x')
        fig.update_layout(showlegend=False)
        return _style(fig, "Displacement field", VISUALIZATION['CHART_HEIGHTS']['FIELD'])
    except Exception as e:
        logger.error(f"Error creating quiver plot: {str(e)}")
        return _error_figure(f"Error creating chart: {str(e)}")


def create_image_comparison(images: Sequence[Tuple[str, Image]]) -> go.Figure:
    """Side-by-side grayscale panels, e.g. moving, fixed, warped and difference."""
    try:
        fig = make_subplots(rows=1, cols=len(images), subplot_titles=[name for name, _ in images])
        for i, (name, img) in enumerate(images, start=1):
            fig.add_trace(
                go.Heatmap(z=middle_slice(img.data, img.ndim), colorscale='gray', showscale=False, name=name),
                row=1, col=i
            )
            fig.update_yaxes(autorange='reversed', row=1, col=i)
        return _style(fig, "Images", VISUALIZATION['CHART_HEIGHTS']['IMAGE'])
    except Exception as e:
        logger.error(f"Error creating image comparison: {str(e)}")
        return _error_figure(f"Error creating chart: {str(e)}")


def create_benchmark_chart(report: pd.DataFrame, metric: str = 'ee_median') -> go.Figure:
    """Box plot of a benchmark metric per method and scale schedule, final fields only."""
    try:
        fig = go.Figure()
        colors = VISUALIZATION['COLORS']['SCALE_COLORS']
        if 'final' in report.columns:
            report = report[report['final'].astype(bool)]
        keys = ['method', 'scales'] if 'method' in report.columns else ['scales']
        for i, (key, frame) in enumerate(report.groupby(keys, sort=False)):
            key = key if isinstance(key, tuple) else (key,)
            name = f"{{{key[-1]}}}" if len(key) == 1 else f"{key[0]} {{{key[-1]}}}"
            fig.add_trace(go.Box(
                y=frame[metric],
                name=name,
                boxpoints='all',
                marker_color=colors[i % len(colors)]
            ))
        fig.update_layout(yaxis_title=metric, showlegend=False)
        return _style(fig, f"Benchmark: {metric}", VISUALIZATION['CHART_HEIGHTS']['BENCHMARK'])
    except Exception as e:
        logger.error(f"Error creating benchmark chart: {str(e)}")
        return _error_figure(f"Error creating chart: {str(e)}")


def create_pair_metrics_chart(metrics: pd.DataFrame) -> go.Figure:
    """Masked MSE and NLCC per tracked frame pair."""
    try:
        fig = make_subplots(specs=[[{"secondary_y": True}]])
        fig.add_trace(go.Scatter(
            x=metrics['pair'], y=metrics['masked_mse'], mode='lines+markers', name='masked MSE',
            line=dict(color=VISUALIZATION['COLORS']['RECONSTRUCTION'])
        ), secondary_y=False)
        fig.add_trace(go.Scatter(
            x=metrics['pair'], y=metrics['masked_nlcc'], mode='lines+markers', name='masked NLCC',
            line=dict(color=VISUALIZATION['COLORS']['SMOOTHNESS'])
        ), secondary_y=True)
        fig.update_xaxes(title_text="Frame pair")
        return _style(fig, "Tracking metrics", VISUALIZATION['CHART_HEIGHTS']['TRACE'])
    except Exception as e:
        logger.error(f"Error creating tracking chart: {str(e)}")
        return _error_figure(f"Error creating chart: {str(e)}")


def build_html_report(title: str, sections: List[Tuple[str, go.Figure]], tables: Optional[List[Tuple[str, pd.DataFrame]]] = None) -> str:
    """Standalone HTML page with the given figures and tables."""
    parts = [f"<html><head><meta charset='utf-8'><title>{html.escape(title)}</title></head><body>",
             f"<h1>{html.escape(title)}</h1>"]
    for heading, df in tables or []:
        parts.append(f"<h2>{html.escape(heading)}</h2>")
        parts.append(df.to_html(index=False, float_format=lambda v: format_metric(v)))
    for i, (heading, fig) in enumerate(sections):
        parts.append(f"<h2>{html.escape(heading)}</h2>")
        parts.append(fig.to_html(full_html=False, include_plotlyjs='cdn' if i == 0 else False))
    parts.append("</body></html>")
    return "\n".join(parts)
