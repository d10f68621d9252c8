"""Neural network OS fingerprinting from Nmap signatures and DCE-RPC endpoint listings."""
__version__ = "0.1.0"
