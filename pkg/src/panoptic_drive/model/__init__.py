from .backbone import (
    FPN,
    SPP,
    ConvBNAct,
    ElanBlock,
    Encoder,
    FeatureMap,
    PyramidFeatures,
    StructureError,
    elan_block,
    forward_encoder,
    fpn_fuse,
    spp_fuse,
)
from .heads import (
    PAN,
    AnchorSet,
    Detection,
    DetectHead,
    DrivableHead,
    LaneHead,
    decode_boxes,
    decode_xywh,
    encode_box,
    nms,
)
from .network import NetOutput, PanopticNet, param_count
