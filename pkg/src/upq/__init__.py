"""Progressive low-bit quantization laboratory.

FP32 weights -> balanced INT4 via block-wise PTQ -> INT2 via stretched elastic
quantization with distillation-based QAT, on a small decoder-only transformer.
"""

__version__ = "0.1.0"
