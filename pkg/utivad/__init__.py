"""Speech/silence detection for ultrasound-to-speech pipelines."""

try:
    from importlib.metadata import version as _pkg_version
    __version__ = _pkg_version("utivad")
except Exception:
    __version__ = "0.1.0"  # fallback when running from source
