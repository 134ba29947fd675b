"""Spiking BEV keypoint detection: integer Integrate-and-Fire inference with
4-bit weights and 6-bit thresholds, quantization-aware training, evaluation."""
from .codec import BoxNorm, Detection, EncoderParams, HeadReadout, decode_boxes, decode_keypoints, \
    encode_rate
from .engine import ArchConfig, NetworkGraph, build_network, encode_and_forward, forward
from .estimators import BEVRasterizer, RateEncoder, SpikingBEVDetector
from .evaluation import EvalResult, activity_report, average_precision, rotated_iou
from .ingest import BoxLabel, GridMeta, PointCloud, SceneLabel, labels_to_targets, \
    load_kitti_labels, load_kitti_pointcloud, pointcloud_to_bev
from .neuron import spike_act, spike_act_grad
from .quant import quantize_thresholds, quantize_weights
from .spkl import SPKLError
from .train import LossWeights, TrainConfig, train

__version__ = "0.1.0"
