"""spectype: speculative type confusion toolkit for a miniature eBPF-style bytecode."""

__version__ = "0.1.0"
