from importlib.metadata import PackageNotFoundError, version

from rotaquant.logging import configure_logging

try:
    __version__ = version("rotaquant")
except PackageNotFoundError:
    # package is not installed
    __version__ = "0.0.0"

# set xarray global options
import xarray as xr

xr.set_options(keep_attrs=True, display_expand_data=False)

# initialize logger upon import
configure_logging()
