"""Articulated shape reconstruction from monocular video by analysis-by-synthesis."""

import torch

torch.set_default_dtype(torch.float64)

__version__ = "0.1.0"
