"""Voxel- and cluster-wise familywise-error inference with a synthetic-null harness."""

__version__ = "0.1.0"

from .volio import Mask, NiftiMeta, Volume3, Volume4, make_ellipsoid_mask, read_nifti, write_nifti
from .synth import (
    Ar1Spec,
    KernelSpec,
    NonstationarityField,
    ParadigmSpec,
    first_level_beta,
    gaussian_volume,
    paradigm_regressor,
    smooth,
    synth_null_subject,
)
from .glm import GlmResult, SubjectStack, mema_t, one_sample_t, random_split, two_sample_t
from .geometry import (
    RoughnessMap,
    SacfCurve,
    SmoothnessEstimate,
    cluster_incidence_map,
    estimate_fwhm_residuals,
    estimate_sacf,
    fwhm_to_sacf_sigma,
    roughness_map,
    sacf_sigma_to_fwhm,
)
from .cluster import CdtSpec, Cluster, ClusterTable, cdt_to_threshold, label_clusters, max_extent
from .rft import RftContext, bonferroni_p, cluster_fwe_p, rft_cluster_threshold, voxel_fwe_p
from .mc import McNull, mc_build_null, mc_cluster_fwe_p, mc_extent_threshold
from .perm import PermNull, perm_build_null, perm_cluster_fwe_p, perm_voxel_fwe_p
from .harness import (
    AdhocSpec,
    CampaignSpec,
    FweReport,
    RatioReport,
    binomial_ci,
    compare_backends,
    run_adhoc,
    run_campaign,
)

__all__ = [
    "AdhocSpec",
    "Ar1Spec",
    "CampaignSpec",
    "CdtSpec",
    "Cluster",
    "ClusterTable",
    "FweReport",
    "GlmResult",
    "KernelSpec",
    "Mask",
    "McNull",
    "NiftiMeta",
    "NonstationarityField",
    "ParadigmSpec",
    "PermNull",
    "RatioReport",
    "RftContext",
    "RoughnessMap",
    "SacfCurve",
    "SmoothnessEstimate",
    "SubjectStack",
    "Volume3",
    "Volume4",
    "binomial_ci",
    "bonferroni_p",
    "cdt_to_threshold",
    "cluster_fwe_p",
    "cluster_incidence_map",
    "compare_backends",
    "estimate_fwhm_residuals",
    "estimate_sacf",
    "first_level_beta",
    "fwhm_to_sacf_sigma",
    "gaussian_volume",
    "label_clusters",
    "make_ellipsoid_mask",
    "max_extent",
    "mc_build_null",
    "mc_cluster_fwe_p",
    "mc_extent_threshold",
    "mema_t",
    "one_sample_t",
    "paradigm_regressor",
    "perm_build_null",
    "perm_cluster_fwe_p",
    "perm_voxel_fwe_p",
    "random_split",
    "read_nifti",
    "rft_cluster_threshold",
    "roughness_map",
    "run_adhoc",
    "run_campaign",
    "sacf_sigma_to_fwhm",
    "smooth",
    "synth_null_subject",
    "two_sample_t",
    "voxel_fwe_p",
    "write_nifti",
]
