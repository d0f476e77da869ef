"""Knowledge distillation with review refinement for density-map crowd counting."""

__version__ = "0.1.0"
