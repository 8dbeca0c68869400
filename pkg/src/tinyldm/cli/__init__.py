"""Command-line surface, run configuration, checkpoint container and prompt triggers."""
