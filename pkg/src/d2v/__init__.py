"""Decoupled dynamic/static/shadow volume rendering and training."""

from .cameras import Camera, Ray, generate_ray
from .fields import DynamicField, FieldOutput, ShadowField, StaticField, load_field
from .losses import LossWeights, Schedule, schedule_value
from .metrics import MetricsReport, evaluate_decoupling, extract_dynamic_mask, jaccard, psnr
from .model import SceneModel, build_model
from .renderer import (RenderOutput, SampleRecord, importance_samples,
                       render_composite, stratified_samples)
from .scenes import SCENE_PRESETS, SyntheticScene, scene_preset
from .trainer import TrainConfig, gradient_check, sample_ray_batch, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Camera", "Ray", "generate_ray",
    "StaticField", "DynamicField", "ShadowField", "FieldOutput", "load_field",
    "LossWeights", "Schedule", "schedule_value",
    "MetricsReport", "evaluate_decoupling", "extract_dynamic_mask", "jaccard", "psnr",
    "SceneModel", "build_model",
    "RenderOutput", "SampleRecord", "render_composite",
    "stratified_samples", "importance_samples",
    "SCENE_PRESETS", "SyntheticScene", "scene_preset",
    "TrainConfig", "gradient_check", "sample_ray_batch", "train", "train_step",
    "__version__",
]
