"""Desk-scale laboratory for distilling long-tailed datasets into small
balanced synthetic sets via decoupled trajectory matching."""

__version__ = "0.1.0"
