import warnings


def ignored_option_warning(message: str):
    """Emit a warning that a requested option has no effect."""
    warnings.warn(f"[atlasaug] {message}", RuntimeWarning, stacklevel=2)
