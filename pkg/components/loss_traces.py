"""
Loss Traces component plotting optimization progress per scale.
"""
import streamlit as st

from utils.visualizations import create_loss_trace_chart


def render_loss_traces(trace):
    """
    Render loss trace charts with a selector for the loss term.

    Args:
        trace: Loss trace DataFrame (optionally with a scale column)
    """
    if trace is None or trace.empty:
        st.info("No loss trace in this run.")
        return

    st.header("Loss Traces")
    component = st.radio("Loss term", ["total", "reconstruction", "smoothness"], horizontal=True)
    if 'pair' in trace.columns:
        pair = st.selectbox("Frame pair", sorted(trace['pair'].unique()))
        trace = trace[trace['pair'] == pair]
    st.plotly_chart(create_loss_trace_chart(trace, component), use_container_width=True)
