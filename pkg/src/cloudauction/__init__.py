"""Options-based sequential auctions for cloud-of-clouds markets."""

__version__ = "0.1.0"
