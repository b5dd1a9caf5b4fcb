"""ODESig: latent-ODE reconstruction of irregular multi-ROI signals"""

__version__ = "0.1.0"
