class AdapterError(Exception):
    """Adapter-level failure (model loading, image mismatch, bad inputs)."""
