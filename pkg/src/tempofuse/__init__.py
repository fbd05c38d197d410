"""EDM subgenre classification from Mel-spectrograms and Fourier/autocorrelation tempograms."""

__version__ = "0.1.0"
