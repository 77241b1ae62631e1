from .base import CorrespondenceSet, Frame, GaugePointmap, Pointmap, PointmapProvider, ProviderError
from .files import FilesProvider, export_dataset
from .synthetic import SyntheticProvider, SyntheticScene, SyntheticSceneConfig, generate_sequence

__all__ = [
    "CorrespondenceSet", "FilesProvider", "Frame", "GaugePointmap", "Pointmap", "PointmapProvider",
    "ProviderError", "SyntheticProvider", "SyntheticScene", "SyntheticSceneConfig", "export_dataset",
    "generate_sequence",
]
