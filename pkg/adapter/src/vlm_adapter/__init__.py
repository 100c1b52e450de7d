"""Optional sidecar for the pointlift pipeline.

Runs a vision-language encoder over rendered view PNGs to produce per-mask
feature files (`view_<id>.ou3d`) and a class embedding table (`.ou3t`) that
the main pipeline consumes in files-provider mode. The interchange files are
the only coupling; the main package never imports this one.
"""

__version__ = "0.1.0"
