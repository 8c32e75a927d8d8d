"""Neural forecasting of ocean surface currents from heterogeneous synthetic observations.

Modules
-------
geo_grid
    Grids, masked fields, regions, climatology normalisation and the on-disk dataset format.
synth_ocean
    Moving-eddy worlds, geostrophy and the simulated observing systems.
net
    The forecasting network and its checkpoints.
training
    Masked, magnitude-weighted losses and the three-stage curriculum.
forecast
    Domain tiling, Gaussian patch merging, forecast products and persistence.
metrics
    Drifter-referenced angle, magnitude and vector-error scores.
analysis
    Embedding clusters, SWOT/nadir crossovers and the stage-1 target ablation.
"""

__version__ = "0.1.0"

from .errors import ConfigError, InputError, NumericalError, OrcastError

__all__ = ["ConfigError", "InputError", "NumericalError", "OrcastError", "__version__"]
