"""Selection-augmented end-to-end task-oriented dialogue on a numpy autodiff substrate."""

__version__ = "0.1.0"
