"""
Services package containing the training, registration, evaluation and
pipeline logic of the Registration Tool.
"""
