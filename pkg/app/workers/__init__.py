"""In-process workers for sharded simulation and concurrent experiments."""
