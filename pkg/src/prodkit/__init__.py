"""prodkit: distributed dataset-production framework.

Submodules are imported explicitly by consumers; this package root stays
import-light so worker-side code (the pilot) starts fast.
"""

__version__ = "0.1.0"
