"""Cross-modal retrieval of lane graphs from sensor feature vectors."""
from .errors import CapacityError, DomainError, GraphFormatError, Pix2MapError, StructuralError, TrainingError
from .lanegraph import (EgoPose, LaneSegment, NodeGraph, SegmentGraph, extract_window, read_graph,
                        resample_graph, segment_to_node_graph, validate, write_graph)

__version__ = "0.1.0"
