"""Figure rendering for the asymptotics toolkit's CSV outputs."""

__version__ = "0.1.0"

from .render import (FigureSpec, RenderError, binned_mass, density_binned_mass,
                     freedman_diaconis_width, read_csv, render)

__all__ = ["FigureSpec", "RenderError", "binned_mass", "density_binned_mass",
           "freedman_diaconis_width", "read_csv", "render"]
