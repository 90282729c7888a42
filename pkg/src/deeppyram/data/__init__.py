from .augment import AugmentConfig, augment, brightness_contrast, motion_blur, motion_kernel, rotate, shift_scale
from .io import load_dataset, load_sample, read_split, save_dataset, save_sample, stack
from .synth import CLASS_NAMES, Geometry, SegSample, SynthSpec, rasterize, sample_geometry, synth_generate
