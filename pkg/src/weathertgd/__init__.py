"""weathertgd: training-free multi-agent caption optimization for weather
time series via text gradient descent."""

from .agents import Caption
from .config import RunConfig, load_config
from .optimizer import RunResult, run

__version__ = "0.1.0"

__all__ = ["Caption", "RunConfig", "RunResult", "load_config", "run", "__version__"]
