"""
Data Tables component for displaying run metrics in a tabbed interface.
"""
import streamlit as st

from services.synthetic_service import SyntheticService
from utils.visualizations import create_benchmark_chart, create_pair_metrics_chart


def render_data_tables(run):
    """
    Render metrics and benchmark tables in a tabbed interface.

    Args:
        run: Run artifacts dictionary
    """
    metrics = run.get('metrics')
    benchmark = run.get('benchmark')
    if metrics is None and benchmark is None:
        return

    st.header("Detailed Data")
    tabs = st.tabs(["Metrics", "Benchmark"])

    with tabs[0]:
        if metrics is not None:
            st.dataframe(metrics.round(6))
            if 'pair' in metrics.columns and len(metrics) > 1:
                st.plotly_chart(create_pair_metrics_chart(metrics), use_container_width=True)
        else:
            st.info("No metrics table in this run.")

    with tabs[1]:
        if benchmark is not None:
            st.subheader("Median per schedule")
            st.dataframe(SyntheticService.summarize(benchmark).round(4))
            metric = st.selectbox("Metric", ['ee_median', 'ee_mean', 'ee_max', 'masked_mse', 'masked_nlcc'])
            st.plotly_chart(create_benchmark_chart(benchmark, metric), use_container_width=True)
            st.dataframe(benchmark)
        else:
            st.info("No benchmark report in this run.")
