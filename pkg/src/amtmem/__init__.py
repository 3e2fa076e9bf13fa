"""Multi-instrument music transcription with segment memory, at toy scale."""

__version__ = "0.1.0"
