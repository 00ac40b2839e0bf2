class ExportError(Exception):
    """Anything that should stop the export with a message instead of a trace."""
