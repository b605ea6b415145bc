"""
UI Components for the Registration Run Inspector.
This package contains reusable UI components to organize the application interface.
"""
