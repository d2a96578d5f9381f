"""Trade postings, escrow, reputation, provenance and the platform service."""

from .core import Market, TradeListing, TradeState, TradeStatus
from .platform import Platform

__all__ = ["Market", "Platform", "TradeListing", "TradeState", "TradeStatus"]
