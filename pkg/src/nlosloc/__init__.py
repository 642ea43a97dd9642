"""NLoS emitter localization from sparse RSS samples over building grids."""

__version__ = "0.1.0"
