"""Export image-folder features and class-prompt embeddings to EMBF files.

Runs an encoder over a class-per-subdirectory image tree, producing the
three files the adaptation engine consumes: a text classifier (one
prompt-ensembled row per class), a test feature file with augmented views
and view groups, and an optional labeled shot file.
"""

from .encoders import EncoderLoadError, ToyEncoder, load_encoder
from .export import ExportResult, ExportSpec, load_export_spec, run_export

__version__ = "0.1.0"
