"""Zero-inference dehazing: decoupled backbone, diffusion-prior training head,
synthetic-haze harness, metrics, and an efficiency benchmarking CLI."""

__version__ = "0.1.0"
