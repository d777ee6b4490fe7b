"""In-context segmentation as in-context coloring.

Segmentation tasks are cast as an inpainting problem over a 2x2 canvas:
an example (source, target) pair on top, the query below, with the query
target hidden and reconstructed.  Targets are segment maps recolored with
a random palette per sample, so the model has to read the task from the
context instead of memorizing colors.
"""

__version__ = "0.1.0"
