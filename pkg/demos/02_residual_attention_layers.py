# Residual units and the trunk/mask attention module.
import numpy as np

from agegender.layers import AttentionModule, AttentionModuleSpec, ResidualUnit, ResidualUnitSpec
from agegender.tensor import Tensor

rng = np.random.default_rng(1)
x = Tensor(rng.standard_normal((2, 8, 16, 16)), dtype="f32")

unit = ResidualUnit(ResidualUnitSpec(8, 16, stride=2), rng=rng)
print("residual unit 8->16, stride 2:", unit(x).dims)

module = AttentionModule(AttentionModuleSpec(8, trunk_depth=2, mask_levels=2), rng=rng)
out, mask = module(x)
print("attention out", out.dims, "mask", mask.dims)
print("mask min %.3g, 1 - mask max %.3g" % (mask.data.min(), 1 - mask.data.max()))

# (1 + M) * T never shrinks the trunk features below T
trunk = x
for u in module.trunk._modules.values():
    trunk = u(trunk)
ratio = out.data / np.where(trunk.data == 0, 1, trunk.data)
print("out / trunk in [%.3f, %.3f]" % (ratio[trunk.data != 0].min(), ratio[trunk.data != 0].max()))

# the mask needs sizes that survive every halving
try:
    module(Tensor(rng.standard_normal((1, 8, 10, 10)), dtype="f32"))
except ValueError as e:
    print("rejected:", e)
