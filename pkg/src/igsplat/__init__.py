"""Joint appearance/instance-feature splatting with bottom-up instantiation.

Train anchor-based splats against RGB targets and 2D instance masks, segment
3D instances by over-segmentation plus graph aggregation, and answer
open-vocabulary queries through embedding association.
"""

__version__ = "0.1.0"
