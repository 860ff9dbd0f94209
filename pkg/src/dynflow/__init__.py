"""Dynamic scene reconstruction from monocular video with motion-consistent flows."""
from .encoding import AnnealState, anneal_alpha, encode_point, encode_time, window_weight
from .fields import FieldConfig, SceneModel, init_scene_model, load_model, save_model
from .geometry import Aabb, CameraModel, Ray, TriMesh, Twist, se3_apply
from .rendering import composite, importance_depths, render_image, render_rays, stratified_depths
from .training import SCHEDULES, TrainSchedule, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AnnealState", "anneal_alpha", "encode_point", "encode_time", "window_weight",
    "FieldConfig", "SceneModel", "init_scene_model", "load_model", "save_model",
    "Aabb", "CameraModel", "Ray", "TriMesh", "Twist", "se3_apply",
    "composite", "importance_depths", "render_image", "render_rays", "stratified_depths",
    "SCHEDULES", "TrainSchedule", "load_checkpoint", "save_checkpoint", "train",
]
