"""
Neural modules: frozen foundation stubs, SideFormer, open-set RPN, cascade
ROI head and the assembled detector.
"""

from sideov.models.foundation import (ClipVisualStub, FloodFillSegmenter, SamEncoderStub,  # NOQA
                                      TextEncoderStub)
from sideov.models.sideformer import SideFormer  # NOQA
from sideov.models.rpn import OpenSetRPN, ProposalMode  # NOQA
from sideov.models.roi_head import CascadeROIHead, Detection  # NOQA
from sideov.models.detector import Detector, DetectionResult  # NOQA
