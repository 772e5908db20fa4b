"""capforge: a self-contained audio-captioning pipeline on a synthetic world."""

__version__ = "0.1.0"
