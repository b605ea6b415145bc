"""
Field View component for displacement fields and images of a run.
"""
import streamlit as st

from utils.visualizations import create_field_magnitude_heatmap, create_field_quiver, create_image_comparison, format_metric


def render_field_view(fields, images):
    """
    Render a chosen displacement field and the run's images.

    Args:
        fields: Dict of file name to DisplacementField
        images: Dict of file name to Image
    """
    if fields:
        st.header("Displacement Fields")
        name = st.selectbox("Field", list(fields))
        displacement = fields[name]
        norms = displacement.norms()
        col1, col2, col3 = st.columns(3)
        col1.metric("Grid", " x ".join(str(d) for d in displacement.dims))
        col2.metric("Mean |u| (px)", format_metric(float(norms.mean()), 3))
        col3.metric("Max |u| (px)", format_metric(float(norms.max()), 3))

        tab1, tab2 = st.tabs(["Magnitude", "Arrows"])
        with tab1:
            st.plotly_chart(create_field_magnitude_heatmap(displacement), use_container_width=True)
        with tab2:
            stride = st.slider("Arrow spacing", min_value=1, max_value=32, value=8)
            st.plotly_chart(create_field_quiver(displacement, stride), use_container_width=True)

    if images:
        st.header("Images")
        st.plotly_chart(create_image_comparison(list(images.items())), use_container_width=True)
