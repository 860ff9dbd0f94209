from .dataset import (DATASET_VERSION, DatasetError, DatasetVersionError, EvalSplit,
                      FrameDataset, load_dataset, save_dataset)
from .sampling import (CorrespondenceSet, SamplingError, extract_background, grid_location_search,
                       localize_meshes, mask_iou, sample_correspondences, sample_free_points,
                       subsample_frames)
from .synth import (BodyPart, SynthConfig, canonical_to_frame, generate_synthetic_sequence,
                    orbit_camera, part_transforms, render_mask, render_mesh)

__all__ = [
    "DATASET_VERSION", "DatasetError", "DatasetVersionError", "EvalSplit", "FrameDataset",
    "load_dataset", "save_dataset", "CorrespondenceSet", "SamplingError", "extract_background",
    "grid_location_search", "localize_meshes", "mask_iou", "sample_correspondences",
    "sample_free_points", "subsample_frames", "BodyPart", "SynthConfig", "canonical_to_frame",
    "generate_synthetic_sequence", "orbit_camera", "part_transforms", "render_mask", "render_mesh",
]
