"""GAN-based augmentation of EHR event sequences for CNN risk prediction."""

__version__ = "0.1.0"
