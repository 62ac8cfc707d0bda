"""Run artifacts on disk."""
from .artifact_store import ArtifactStore, RunManifest

__all__ = ["ArtifactStore", "RunManifest"]
