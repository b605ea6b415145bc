import logging
import sys
import traceback

import streamlit as st

# Configure logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                    stream=sys.stdout)
logger = logging.getLogger(__name__)

logger.info("Starting Registration Run Inspector")

try:
    from components.data_tables import render_data_tables
    from components.field_view import render_field_view
    from components.file_upload import render_run_loader
    from components.loss_traces import render_loss_traces
    from components.run_summary import render_run_summary
    logger.info("Successfully imported all modules")
except Exception as e:
    logger.error(f"Error importing modules: {str(e)}")
    logger.error(traceback.format_exc())
    st.error(f"Failed to import required modules: {str(e)}")
    st.stop()

st.set_page_config(page_title="Registration Run Inspector", layout="wide")

st.markdown("""
    <style>
    .main {
        padding: 2rem;
    }
    .stPlotlyChart {
        background-color: white;
        border-radius: 5px;
        padding: 1rem;
        box-shadow: 0 2px 4px rgba(0,0,0,0.1);
    }
    </style>
""", unsafe_allow_html=True)


def main():
    try:
        if 'run' not in st.session_state:
            st.session_state.run = None
            st.session_state.run_dir = ''

        st.title("Registration Run Inspector")
        run = render_run_loader()
        if run is None:
            st.info("Enter a run directory or upload run files to begin.")
            return

        render_run_summary(run.get('manifest'))
        render_loss_traces(run.get('trace'))
        render_field_view(run.get('fields', {}), run.get('images', {}))
        render_data_tables(run)
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}")
        logger.error(traceback.format_exc())
        st.error(f"An unexpected error occurred: {str(e)}")


if __name__ == "__main__":
    main()
