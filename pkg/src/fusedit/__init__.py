"""Zero-shot multi-concept video editing by feature injection and attention fusion."""

__version__ = "0.1.0"
