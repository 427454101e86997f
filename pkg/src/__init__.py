"""QTune - Learned quantization tables and attention pre-editing for standard JPEG."""

__version__ = "1.0.0"
__author__ = "QTune Team"
__description__ = "JPEG encoder optimizer emitting files any stock JPEG decoder can read"
