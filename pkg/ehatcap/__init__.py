"""
EHAT captioning toolkit
~~~~~~~~~~~~~~~~~~~~~~~

Bilingual image captioning with embedded heterogeneous attention: a small
numpy autodiff engine, the EHAT decoder, two-stage training, caption metrics
and a synthetic bilingual corpus.
"""

__version__ = "1.0.0"
