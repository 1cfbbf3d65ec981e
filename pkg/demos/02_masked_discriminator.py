"""What a mask-gated patch discriminator can and cannot see.

A mask multiplies the feature maps after every block, so pixels far enough
from the mask support never reach the patch scores. With an all-ones mask the
discriminator is the ordinary one.
"""
import numpy as np
import torch
from scipy import ndimage

from attnsplit.networks import MaskedPatchDiscriminator, init_weights

torch.manual_seed(0)
d = init_weights(MaskedPatchDiscriminator(blocks=2), torch.Generator().manual_seed(0))
x = torch.rand(1, 3, 32, 32)

mask = torch.zeros(1, 1, 32, 32)
mask[..., 8:14, 18:26] = 1
print("patch grid:", tuple(d(x, mask).shape[-2:]), " locality radius:", d.locality_radius, "px")

# all ones reproduces the unmasked scores exactly
print("mask = 1 equals unmasked:", torch.equal(d(x), d(x, torch.ones_like(mask))))

# scramble everything outside the dilated support: the scores do not move
r = d.locality_radius
near = ndimage.binary_dilation(mask[0, 0].numpy() > 0, np.ones((2 * r + 1, 2 * r + 1)))
far = torch.from_numpy(~near)
scrambled = x.clone()
scrambled[:, :, far] = torch.rand(3, int(far.sum()))
print("far-field scramble changes scores:", not torch.equal(d(x, mask), d(scrambled, mask)))

# touching a pixel inside the support does
poked = x.clone()
poked[..., 10, 20] += 0.3
print("in-support poke changes scores:  ", not torch.equal(d(x, mask), d(poked, mask)))
