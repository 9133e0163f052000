"""Message delivery backends and the wire codec."""
