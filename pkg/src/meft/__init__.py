"""Memory-efficient fine-tuning of wide parallel adapters.

Adapters live in a host store; each step only the neurons selected by
Key-Experts routing travel to the device, and only their optimizer state is
updated.
"""

__version__ = "0.1.0"
