"""Pose-synchronizing selective forwarding unit with datagram-path signaling takeover."""

__version__ = "0.1.0"
