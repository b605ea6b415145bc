"""
Run Summary component showing the manifest of a run.
"""
import streamlit as st

from config import EXIT_CODES


def render_run_summary(manifest):
    """
    Render headline settings and status of a run.

    Args:
        manifest: Parsed manifest.json dictionary
    """
    if not manifest:
        st.info("No manifest found for this run.")
        return

    config = manifest.get('config', {})
    status = manifest.get('exit_status', EXIT_CODES['OK'])
    status_names = {code: name for name, code in EXIT_CODES.items()}

    st.header("Run Summary")
    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Mode", config.get('mode', 'n/a'))
    col2.metric("Status", status_names.get(status, str(status)))
    col3.metric("Scales", ", ".join(f"{s:g}" for s in manifest.get('schedule', [])) or "n/a")
    col4.metric("Seed / precision", f"{manifest.get('seed')} / {manifest.get('precision')}-bit")

    if manifest.get('error'):
        st.error(manifest['error'])

    with st.expander("Full configuration"):
        st.json(manifest)
