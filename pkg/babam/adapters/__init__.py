"""Concrete sources and detectors (image folders, oracle, whole-class, PIRM)."""

from .image_folder import ImageFolderSource, load_image_directory, save_image_directory
from .oracle_detector import OracleDetector
from .class_detector import WholeClassDetector
from .pirm_detector import PirmDetector

__all__ = [
    "ImageFolderSource",
    "load_image_directory",
    "save_image_directory",
    "OracleDetector",
    "WholeClassDetector",
    "PirmDetector",
]
