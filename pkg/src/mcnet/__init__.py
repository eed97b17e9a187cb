"""MC-Net: multiscale encoder, max-pooling integration module and cross
multiscale deconvolution decoder for image segmentation, built on a small
numpy autodiff engine."""

__version__ = "0.1.0"
