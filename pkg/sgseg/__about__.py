__all__ = [
    "__name__",
    "__cli__",
    "__author__",
    "__email__",
    "__version__",
    "__url__",
    "__description__",
]

__name__ = "sgseg"
__cli__ = "sgseg"
__version__ = "0.1.0"

__author__ = "sgseg developers"
__email__ = ""
__url__ = ""

__description__ = "Segmentación guiada por lenguaje con auto-guía (inferencia sin texto) + CLI"
