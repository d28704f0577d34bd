"""
A-RWKV Spectrogram Classifier

Bidirectional WKV7 sequence model with 2D token shift for audio spectrograms
"""

__version__ = "1.0.0"
__author__ = "Rahul Dohare"
__description__ = "Linear-complexity spectrogram classification with Bi-WKV"
