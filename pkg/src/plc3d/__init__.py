"""Open-vocabulary 3D segmentation from region captions, at desk scale.

Submodules: ``geom`` (cameras, projection, region association), ``fusion``
(caption-source fusion), ``lang`` (text embeddings), ``synth`` (synthetic
scenes and caption sources), ``learn`` (encoder, losses, training),
``evalkit`` (metrics), ``pipeline``/``cli`` (orchestration).
"""

__version__ = "0.1.0"
