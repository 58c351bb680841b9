from .dataset import (
    DatasetError,
    DatasetManifest,
    ManifestEntry,
    SampleCache,
    load_manifest,
    load_sample,
    prep_lanes,
    synth_generate,
)
from .lanes import (
    TEST_LANE_WIDTH,
    TRAIN_LANE_WIDTH,
    AnnotationError,
    LaneAnnotation,
    lane_centerline,
    lane_mask,
    rasterize_lane,
)
from .synth import SynthConfig, SynthScene, generate_scene
from .transforms import LetterboxInfo, Sample, letterbox_info, mixup, mosaic, place, resize_letterbox
