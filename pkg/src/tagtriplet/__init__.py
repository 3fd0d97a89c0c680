"""
tagtriplet - Track embeddings from multi-label tags
LSI tag relatedness, online triplet mining and retrieval evaluation for music audio
"""

__version__ = "0.3.0"

from .config import PipelineConfig
from .errors import TagTripletError
from .lsi import LsiModel, fit_lsi
from .tagspace import TagCorpus, build_matrix, parse_tag_file
from .trainer import train

__all__ = [
    "PipelineConfig",
    "TagTripletError",
    "LsiModel",
    "fit_lsi",
    "TagCorpus",
    "build_matrix",
    "parse_tag_file",
    "train",
]
