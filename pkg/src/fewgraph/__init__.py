"""Few-shot class-incremental learning with sample- and class-level graphs.

A small feature extractor is trained once on a data-rich base session;
afterwards every few-shot session is absorbed by building a sample-level
graph over its support embeddings, refining class features through learned
edges, calibrating them against the existing class graph with attention,
and inserting the result as new prototype nodes. Prediction is
nearest-node by cosine similarity over all classes seen so far.
"""

from ._kernels import BACKEND
from .class_graph import (
    AttentionParams,
    CalibratedClassFeature,
    ClassGraph,
    build_base_graph,
    calibrate,
    cgn_loss,
    insert_calibrated,
    predict,
)
from .datasets import LabeledDataset, make_synthetic_reference
from .harness import (
    ExperimentConfig,
    SessionReport,
    emit_results,
    evaluate_session,
    performance_dropping,
    run_experiment,
)
from .protocol import (
    Episode,
    ProtocolConfig,
    SessionStream,
    build_session_stream,
    cumulative_label_set,
    sample_episode,
)
from .sample_graph import (
    EdgeEncoderParams,
    RefinedClassFeature,
    SampleGraph,
    TripletConfig,
    build_sample_graph,
    edge_encode,
    refine_class_features,
    triplet_loss,
)
from .trainer import (
    MixCoefficient,
    ModelState,
    TrainConfig,
    manifold_mixup,
    sample_pseudo_task,
    stage1_pre_construct,
    stage2_meta_train,
    stage3_incremental,
    total_loss,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AttentionParams",
    "CalibratedClassFeature",
    "ClassGraph",
    "EdgeEncoderParams",
    "Episode",
    "ExperimentConfig",
    "LabeledDataset",
    "MixCoefficient",
    "ModelState",
    "ProtocolConfig",
    "RefinedClassFeature",
    "SampleGraph",
    "SessionReport",
    "SessionStream",
    "TrainConfig",
    "TripletConfig",
    "build_base_graph",
    "build_sample_graph",
    "build_session_stream",
    "calibrate",
    "cgn_loss",
    "cumulative_label_set",
    "edge_encode",
    "emit_results",
    "evaluate_session",
    "insert_calibrated",
    "make_synthetic_reference",
    "manifold_mixup",
    "performance_dropping",
    "predict",
    "refine_class_features",
    "run_experiment",
    "sample_episode",
    "sample_pseudo_task",
    "stage1_pre_construct",
    "stage2_meta_train",
    "stage3_incremental",
    "total_loss",
    "triplet_loss",
]
