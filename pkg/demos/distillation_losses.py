"""
Feature and inter-related distillation on toy activations
==========================================================

"""

# Two tiny "activation maps" for a batch of three instances
import torch
from incdet.distill import feature_distillation_loss, inter_related_loss, pairwise_feature_distance

torch.manual_seed(0)
source = torch.randn(3, 2, 4, 4)
target = source + 0.1 * torch.randn(3, 2, 4, 4)

# Feature distillation: the summed squared gap between target and source
print("feature loss (sum): ", feature_distillation_loss(target, source).item())
print("feature loss (mean):", feature_distillation_loss(target, source, "mean").item())

# The pairwise geometry between instances is what the inter-related term compares
print("D(0,1) source:", pairwise_feature_distance(source[0], source[1]).item())
print("D(0,1) target:", pairwise_feature_distance(target[0], target[1]).item())
print("inter-related loss:", inter_related_loss([target], [source]).item())

# Shifting every instance by the same offset leaves all pairwise distances alone,
# so the inter-related loss ignores it while feature distillation does not
shifted = target + 5.0
print("after a shared shift, feature loss:", feature_distillation_loss(shifted, source).item())
print("after a shared shift, inter-related loss:", inter_related_loss([shifted], [source]).item())
