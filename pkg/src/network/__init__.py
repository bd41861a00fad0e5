from network.denoiser import GeometryContext, ResBlock, ViewAlignDenoiser, timestep_embedding
from network.frm import (FusionRefiner, LossReport, SqueezeExcitation, refine,
                         refinement_loss, total_loss)
from network.mvam import (FeatureMap, MultiViewAlignment, align_feature_map, align_patch,
                          attention_weights, encode_displacements, project_qkv)
