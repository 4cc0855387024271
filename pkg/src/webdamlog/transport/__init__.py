"""Message transports: wire codec, simulated network, TCP sockets."""
