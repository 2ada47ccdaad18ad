"""Dense box detection for depalletizing: losses, targets, synthetic data,
post-processing, evaluation and a small trainable reference network."""
import os

if os.environ.get("PALLETDET_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["PALLETDET_THREADS"])

__version__ = "0.1.0"
