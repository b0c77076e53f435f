"""Place description for 3D point clouds: local geometric features, a graph
feature network and NetVLAD global descriptors, with training, retrieval
evaluation and environment analysis."""
from .analysis import ClusterResult, SimilarityMap, cluster_descriptors, similarity_map, uniqueness
from .features import (FEATURE_NAMES, AdaptiveNeighborhoodConfig, DegenerateNeighborhoodError, EigenTriple,
                       compute_local_features, covariance_eigen, optimal_k, shannon_entropy)
from .network import (NetworkConfig, NetworkError, desk_config, describe, forward_batch, forward_full, init_params,
                      prepare_cloud)
from .pointcloud import (CloudError, DatasetManifest, ManifestError, PointCloud, SubmapRecord, downsample_random,
                         generate_synthetic_place, load_cloud, load_manifest, normalize_cloud, save_cloud)
from .retrieval import (DescriptorIndex, RecallReport, RetrievalError, load_index, query_topn, recall_at_n,
                        robustness_eval, save_index)
from .spatial import KdTree, NeighborList, SpatialError, build, knn, knn_graph
from .tensor import NumericError, ParamStore, Tensor, load_checkpoint, save_checkpoint
from .training import (LossConfig, PlaceRegistry, Quadruplet, SamplingError, TrainConfig, TrainingError,
                       lazy_quadruplet_loss, sample_quadruplets, train)

__version__ = "0.1.0"
