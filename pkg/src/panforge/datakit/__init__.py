"""Synthetic paired tasks, image files and dataset manifests."""

from panforge.datakit.imageio import load_image, save_image
from panforge.datakit.manifest import DatasetManifest, build_manifest, load_manifest
from panforge.datakit.synth import (PairedSample, gen_inpaint_pair, gen_label_shape_pair, gen_streak_pair,
                                    generate)

__all__ = ["PairedSample", "DatasetManifest", "build_manifest", "load_manifest", "load_image", "save_image",
           "gen_streak_pair", "gen_inpaint_pair", "gen_label_shape_pair", "generate"]
