__version__ = "0.1.0"

from .render import (  # noqa: F401
    FigureSpec,
    GridLayer,
    RenderError,
    read_grid_csv,
    read_metrics_csv,
    render,
    render_losses,
    render_slice,
)
