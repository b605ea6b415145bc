"""
File Upload component for choosing a run directory or uploading run artifacts.
"""
import logging

import streamlit as st

from core.errors import TensorParseError
from core.models import DisplacementField, Image, LabelMap
from services.data_service import DataService

logger = logging.getLogger(__name__)


def _empty_run():
    return {'manifest': None, 'trace': None, 'metrics': None, 'benchmark': None,
            'fields': {}, 'images': {}, 'labels': {}}


def render_run_loader():
    """
    Render the run selection interface.

    Returns:
        dict: run artifacts as produced by DataService.load_run_directory,
        or None when nothing has been loaded
    """
    col1, col2 = st.columns([3, 1])

    with col1:
        directory = st.text_input("Run directory", value=st.session_state.get('run_dir', ''),
                                  help="Output directory of a regtool run")
        uploads = st.file_uploader("...or upload run files", type=["mft", "pgm", "csv", "json"],
                                   accept_multiple_files=True, key="run_uploader")

    with col2:
        if st.session_state.get('run') is not None:
            if st.button("Reset", help="Forget the loaded run"):
                st.session_state.run = None
                st.session_state.run_dir = ''
                st.rerun()

    if directory and directory != st.session_state.get('run_dir'):
        try:
            st.session_state.run = DataService.load_run_directory(directory)
            st.session_state.run_dir = directory
        except (FileNotFoundError, TensorParseError, ValueError) as e:
            logger.error(f"Error loading run directory: {str(e)}", exc_info=True)
            st.error(f"Could not load run directory: {str(e)}")

    if uploads:
        run = _empty_run()
        for upload in uploads:
            logger.info(f"File uploaded: {upload.name}, size: {upload.size} bytes")
            try:
                if upload.name.endswith('.csv'):
                    table = DataService.load_csv(upload)
                    key = 'benchmark' if 'ee_median' in table.columns else 'trace' if 'step' in table.columns else 'metrics'
                    run[key] = table
                elif upload.name.endswith('.json'):
                    run['manifest'] = DataService.load_manifest(upload)
                else:
                    tensor = DataService.load_tensor(upload)
                    if isinstance(tensor, DisplacementField):
                        run['fields'][upload.name] = tensor
                    elif isinstance(tensor, Image):
                        run['images'][upload.name] = tensor
                    elif isinstance(tensor, LabelMap):
                        run['labels'][upload.name] = tensor
            except (TensorParseError, ValueError) as e:
                logger.error(f"Error reading {upload.name}: {str(e)}")
                st.error(f"Could not read {upload.name}: {str(e)}")
        st.session_state.run = run

    return st.session_state.get('run')
