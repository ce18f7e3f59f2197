"""Fusion plans checked against a metadata constraint graph."""
from .graph import METADATA_GRAPH, MetadataGraph, OpAttrs, PlanContext, Verdict, winograd_channel_rule
from .plan import (
    ActivationArgs,
    ActivationOp,
    BatchNormArgs,
    BatchNormInferenceOp,
    BiasArgs,
    BiasOp,
    ConvArgs,
    ConvForwardOp,
    FusedKernel,
    FusionPlan,
    fusion_add_op,
    fusion_compile,
    fusion_execute,
    fusion_plan_create,
    fusion_set_args,
)

__all__ = [
    "ActivationArgs",
    "ActivationOp",
    "BatchNormArgs",
    "BatchNormInferenceOp",
    "BiasArgs",
    "BiasOp",
    "ConvArgs",
    "ConvForwardOp",
    "FusedKernel",
    "FusionPlan",
    "METADATA_GRAPH",
    "MetadataGraph",
    "OpAttrs",
    "PlanContext",
    "Verdict",
    "fusion_add_op",
    "fusion_compile",
    "fusion_execute",
    "fusion_plan_create",
    "fusion_set_args",
    "winograd_channel_rule",
]
