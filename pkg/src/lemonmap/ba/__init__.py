"""Eigenvalue-based plane bundle adjustment."""
from .cluster import PointCluster, cluster_coordinate, scatter_matrix
from .features import extract_planes
from .problem import BADerivatives, BAProblem, FeatureAssociation
from .solver import (LMResult, cluster_sensitivities, derivatives, feature_costs, lm_solve,
                     plane_cost, pose_covariance)

__all__ = ["PointCluster", "cluster_coordinate", "scatter_matrix", "extract_planes",
           "BADerivatives", "BAProblem", "FeatureAssociation", "LMResult",
           "cluster_sensitivities", "derivatives", "feature_costs", "lm_solve", "plane_cost",
           "pose_covariance"]
