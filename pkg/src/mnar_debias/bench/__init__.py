"""Experiment harness: data loaders, cross-validated pipelines, reports, CLI."""
