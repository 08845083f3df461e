"""
Gradient reversal
=================

The reversal layer is the identity going forward and flips (and scales) the
gradient going backward.  Placed in front of a domain classifier it makes the
classifier minimize its loss while the features feeding it maximize it.
"""
import torch

from dayolo.grl import GrlConfig, grl_apply

x = torch.tensor([0.5, -1.0, 2.0], requires_grad=True)
y = grl_apply(x, lambda_grl=0.5)
print("forward unchanged:", torch.equal(y, x))

(y ** 2).sum().backward()
print("plain gradient 2x:     ", (2 * x).detach().tolist())
print("reversed, scaled by 0.5:", x.grad.tolist())

# A tiny adversarial game: a linear "feature" w*x feeds a logistic domain
# classifier through the reversal layer.  The classifier keeps trying to
# separate the domains while w is pushed toward zero and then oscillates
# around it; near w = 0 the domains are indistinguishable and the loss sits
# at ln 2.
torch.manual_seed(0)
src = torch.randn(64) + 1.0
tgt = torch.randn(64) - 1.0
w = torch.tensor(1.0, requires_grad=True)
clf = torch.nn.Linear(1, 1)
opt = torch.optim.SGD([w, *clf.parameters()], lr=0.05)
labels = torch.cat([torch.zeros(64), torch.ones(64)])
for step in range(201):
    feats = grl_apply(torch.cat([src, tgt])[:, None] * w, 1.0)
    loss = torch.nn.functional.binary_cross_entropy_with_logits(clf(feats).squeeze(1), labels)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  classifier loss {loss.item():.3f}  feature scale {w.item():+.3f}")

# The reversal strength can ramp from 0 up to its final value.
ramp = GrlConfig(lambda_grl=1.0, schedule="ramp", gamma=10.0, total_steps=100)
print("ramp:", [round(ramp.value(s), 3) for s in (0, 10, 25, 50, 100)])
