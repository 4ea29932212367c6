"""Single-stage corpus-callosum detector/classifier with Eigen-CAM, built on a small numpy autodiff engine."""
__version__ = "0.1.0"
