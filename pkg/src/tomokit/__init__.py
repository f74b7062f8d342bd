"""
tomokit - Deep-unfolding SAR tomography on synthetic building scenes.

The package simulates multi-baseline echoes of parametric building scenes,
reconstructs elevation profiles with ISTA/FISTA, trains an unfolded
pre-imaging network followed by two encoder-decoder refiners, and scores
reconstructions with point-cloud completeness and accuracy.

Modules:
    geometry: Acquisition geometry, steering matrix and coordinate transforms
    scenes: Parametric building primitives and random scene catalogs
    simulator: Occlusion-aware echo simulation and dataset generation
    container: Binary dataset, volume and checkpoint files
    solvers: ISTA/FISTA sparse reconstruction
    autodiff, layers, optim, gradcheck: Minimal tensor engine and training tools
    prenet, refine: The network
    training, evaluation, exporters: Pipelines and reports
    config: INI run configuration
    cli: Command-line interface
    version: Version information (isolated to prevent circular imports)

Important: Imports in this file are ordered specifically to prevent circular imports.
The version is imported first, followed by the numerical modules, and finally the CLI.
"""

# Version information
from .version import __version__

# Make modules available at package level
from . import errors
from . import geometry
from . import scenes
from . import simulator
from . import container
from . import solvers
from . import autodiff
from . import prenet
from . import refine
from . import evaluation

# Import CLI last to avoid circular imports
from . import cli
