"""Online policy tuning for few-step autoregressive generators.

Modules: tensorgrad (autodiff + optimizer), flowgen (toy generator and
pretraining), streamctx (bounded streaming context), rewardlab (judges,
ranking, risk masking), nftcore (group-relative policy optimization),
longtune (streaming window tuning), theoryx (numerical guarantee checks),
config/runio/cli (run surface).
"""

from . import (cli, config, flowgen, longtune, nftcore, rewardlab, rng, runio,
               streamctx, tensorgrad, theoryx)

__version__ = "0.1.0"

__all__ = [
    "cli", "config", "flowgen", "longtune", "nftcore", "rewardlab", "rng",
    "runio", "streamctx", "tensorgrad", "theoryx", "__version__",
]
