"""Featureness: keypoint probability plus distilled uncertainty as a per-pixel feature filter.

Modules: ``imgcore`` (images, warps), ``datagen`` (synthetic corpus and rendered
sequences), ``nn`` (numpy conv nets), ``detector`` (stage-1 training), ``bayes``
(stage-2 MC dropout), ``uhead`` (stage-3 distillation), ``featuremask`` (the
mask itself), ``features`` (FAST/BRIEF/Shi-Tomasi/matching), ``vo``
(monocular visual odometry) and ``cli``.
"""

__version__ = "0.1.0"
