"""
Image-level, instance-level and consensus losses
================================================

Hand-sized inputs to the three alignment losses, so the numbers can be
checked on paper.
"""
import math

import torch

from dayolo.adaptation import (DomainAdaptation, ScaleWeights, mlcr_loss, msia_loss, ria_loss,
                               roi_pool)

# Image level: one target image (label 1) with a 1x2 probability map.
maps = [torch.tensor([[[0.8, 0.6]]])]
print("RIA:", ria_loss(maps, [1], ScaleWeights(1.0, 0.0, 0.0)).item(),
      "expected", -(math.log(0.8) + math.log(0.6)))

# Decreasing per-scale weights (regressive) versus equal weights.
print("regressive weights:", ScaleWeights().as_tuple(), " equal:", ScaleWeights.equal(0.5).as_tuple())

# Instance level: one source instance (label 0) that the classifier scores 0.1.
p = torch.tensor([0.1])
print("MSIA:", msia_loss(p, [0], [0], [0], ScaleWeights()).item(), "expected", -math.log(0.9))

# Consensus: the instance should agree with the mean of its image's map.
maps = [torch.full((1, 4, 4), 0.7), torch.full((1, 2, 2), 0.5), torch.full((1, 1, 1), 0.5)]
print("MLCR:", mlcr_loss(maps, torch.tensor([0.5]), [0], [0]).item(), "expected 0.2")

# ROI pooling takes the max of each bin under the box.
fmap = torch.arange(16.0).reshape(1, 4, 4)
print("ROI pool (whole map, 2x2 bins):\n", roi_pool(fmap, (0.5, 0.5, 1.0, 1.0), 2)[0])

# The module bundles three image-level and three instance-level classifiers.
torch.manual_seed(0)
da = DomainAdaptation()
feats = [torch.randn(2, c, s, s) for c, s in ((64, 16), (128, 8), (256, 4))]
boxes = [[[(0.5, 0.5, 0.3, 0.3)], [], []], [[], [(0.3, 0.3, 0.4, 0.4)], []]]
out = da(feats, boxes)
print("map shapes:", [tuple(m.shape) for m in out.prob_maps])
print("instances:", out.instance_probs.shape[0], "at scales", out.scale_index.tolist())
