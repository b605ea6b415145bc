"""
Configuration settings for the Registration Tool.
Centralizes optimization defaults, network layout, file-format constants and
other parameters.
"""

# Test-time training / objective defaults
REGISTRATION = {
    'LAMBDA': 10.0,
    'STEPS': 3500,
    'LEARNING_RATE': 1e-3,
    'BETA1': 0.9,
    'BETA2': 0.999,
    'ADAM_EPS': 1e-8,
    'NLCC_EPS': 1e-5,
    'WINDOW_2D': 6,
    'WINDOW_3D': 5,
    'MIN_WINDOW': 3,
    'SMOOTHNESS_REDUCTION': 'sum',
    'DIVERGENCE_FACTOR': 10.0,
    'DIVERGENCE_PATIENCE': 100,
    'LOG_EVERY': 100,
    'SEED': 0,
}

# Displacement predictor layout
NETWORK = {
    'ENCODER_CHANNELS': [16, 32, 32, 32],
    'DECODER_CHANNELS': [32, 32, 32, 16],
    'KERNEL_SIZE': 3,
    'NEGATIVE_SLOPE': 0.2,
    'MIN_EXTENT': 2,
    'PRECISION': 64,
}

# Coarse-to-fine scale profiles
SCHEDULES = {
    'hippo2': [0.5, 1.0],
    'echo4': [0.125, 0.25, 0.5, 1.0],
    'DEFAULT_PROFILE': 'hippo2',
}

# Intensity normalization and region masking
PREP = {
    'CLIP_SIGMAS': 6.0,
    'MASK_LOWER': 0.005,
    'MASK_UPPER': 0.995,
    'DILATION_RADIUS': 16,
}

# Evaluation settings
EVALUATION = {
    'NLCC_RADIUS': 10,
    'NLCC_EPS': 1e-10,
    'FOREGROUND_CLASSES': [1, 2],
}

# Synthetic benchmark defaults
SYNTHETIC = {
    'DIMS': [64, 64],
    'MAX_DISP': 5.0,
    'FIELD_SMOOTHNESS': 8.0,
    'TEXTURE_SMOOTHNESS': 2.0,
    'GAUSSIAN_TRUNCATE': 3.0,
    'CASES': 10,
    'PRETRAIN_CASES': 0,
    'PRETRAIN_SEED_OFFSET': 10000,
}

# File formats
FILES = {
    'TENSOR_MAGIC': b'MFT1',
    'CHECKPOINT_MAGIC': b'MFC1',
    'TENSOR_VERSION': 1,
    'CHECKPOINT_VERSION': 1,
    'ROLES': ['image', 'field', 'mask', 'labels'],
    'FIELD_FILE': 'field.mft',
    'WARPED_FILE': 'warped.mft',
    'TRACE_FILE': 'loss_trace.csv',
    'METRICS_FILE': 'metrics.csv',
    'MANIFEST_FILE': 'manifest.json',
    'REPORT_FILE': 'report.html',
    'CHECKPOINT_FILE': 'checkpoint.mfc',
    'BENCHMARK_FILE': 'benchmark.csv',
}

# Process exit codes
EXIT_CODES = {
    'OK': 0,
    'CONFIG_ERROR': 2,
    'PARSE_ERROR': 3,
    'OPTIMIZATION_ABORT': 4,
}

# Visualization settings
VISUALIZATION = {
    'COLORS': {
        'RECONSTRUCTION': '#3498db',  # Blue
        'SMOOTHNESS': '#e74c3c',      # Red
        'TOTAL': '#2c3e50',           # Dark blue
        'SCALE_COLORS': [
            '#1f77b4',
            '#d62728',
            '#2ca02c',
            '#9467bd',
            '#8c564b',
            '#17becf',
        ]
    },
    'CHART_HEIGHTS': {
        'TRACE': 400,
        'FIELD': 500,
        'IMAGE': 350,
        'BENCHMARK': 400,
    },
    'QUIVER_STRIDE': 8,
    'COLORSCALE': 'Viridis',
}
