"""
Process-level settings for the uflow pipeline.

Values are read from the environment once, at import time. Pipeline
parameters (paths, extractor, flow, training, NFA) live in the run config
file instead, see ``uflow.config``.
"""
import os

LOG_LEVEL = os.getenv("UFLOW_LOG", "WARNING").upper()

# A single intra-op thread keeps torch reductions bit-reproducible across runs.
TORCH_THREADS = int(os.getenv("UFLOW_TORCH_THREADS", "1"))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
