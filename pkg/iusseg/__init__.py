"""iusseg: simulation-based pre-training and evaluation of 3D intracranial
ultrasound segmentation.

Subpackages:
    volume:   Volume3D grids, MetaImage I/O, sampling and resampling
    tissue:   tissue maps bound to acoustic properties, phantoms
    simulate: ray-traced B-mode frames and sweeps
    compound: sweep to volume reconstruction
    metrics:  overlap and surface-distance metrics, case reports
    augment:  similarity augmentation and patch sampling
    learn:    dense fully-convolutional network, Dice loss, Adam, training
    pipeline: splits, dataset generation, experiment runs
    inform:   report emission across runs
"""

__version__ = '0.1.0'
