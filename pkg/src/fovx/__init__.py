"""Field-of-view extension for diffusion MRI.

Imputes DWI slices lost to an incomplete field of view with four 2.5D
slab-to-slice generators (b0/b1300 x sagittal/coronal) conditioned on a
T1-weighted image, and evaluates the result.
"""

__version__ = "0.1.0"
