"""Image-space RAKI and GRAPPA with analytical noise propagation."""

__version__ = "0.1.0"
