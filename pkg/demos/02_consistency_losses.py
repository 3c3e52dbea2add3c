# %% The two consistency losses on hand-made features
#
# Contrastive loss: a left feature should be closer to its matching right
# feature than to nearby right features and to queued keys.
# Whitening loss: penalize covariance entries that differ most between views.

import numpy as np
import torch

from stereo_consistency.geometry import collect_positive_pairs
from stereo_consistency.scf import (
    FeatureMap, MomentumEncoderPair, NegativeQueue, ScfConfig, infonce_lower_bound,
    momentum_update, queue_push, scf_loss,
)
from stereo_consistency.ssw import CovarianceStats, covariance, instance_normalize, select_mask, ssw_loss

torch.manual_seed(0)
rng = np.random.default_rng(0)

left = torch.randn(16, 8, 8)
d = np.full((8, 8), 2.0)
pairs = collect_positive_pairs(d, np.ones((8, 8), bool), stride=1)

# right view: the left features shifted by the disparity, plus noise
right = torch.randn_like(left)
right[:, :, :-2] = left[:, :, 2:]
cfg = ScfConfig(n_negatives=20, window=7)

for noise in (0.0, 0.5, 2.0):
    r = right + noise * torch.randn_like(right)
    res = scf_loss(FeatureMap(left), FeatureMap(r, view="right"), pairs, None, cfg, np.random.default_rng(1))
    print(f"noise {noise}: loss {res.loss.item():.3f} over {res.n_pairs} pairs")
print("floor with orthogonal negatives:", round(infonce_lower_bound(20, cfg.tau), 6))

# %% Queue and momentum encoder
q = NegativeQueue(capacity=5)
queue_push(q, torch.randn(3, 16))
queue_push(q, torch.randn(4, 16))
print("queue holds", len(q), "keys (oldest dropped)")

pair = MomentumEncoderPair([torch.ones(3)], [torch.zeros(3)], m=0.9)
for _ in range(3):
    momentum_update(pair)
print("key after 3 updates at m=0.9:", pair.key[0].tolist())

# %% Selective whitening
# channels 0 and 1 co-vary in the left view only
x = torch.randn(4, 4, 256)
xl = x.clone()
xl[:, 1] = 0.8 * xl[:, 0] + 0.2 * xl[:, 1]
cl = covariance(instance_normalize(xl))
cr = covariance(instance_normalize(x))

stats = CovarianceStats(n_layers=1, warmup_steps=1)
stats.accumulate([cl], [cr])
print("variance matrix:\n", np.round(stats.V[0], 3))
print("selected pairs:", np.argwhere(np.triu(stats.masks[0])).tolist())
print("whitening loss:", ssw_loss([instance_normalize(xl)], stats).value.item())
