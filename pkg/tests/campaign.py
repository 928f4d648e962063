"""Shared n=80 reduction campaign used by the acceptance and preprocessing tests.

Reduction of ~420 matrices takes roughly half an hour on one core, so shards
live in the pytest cache and are reused (and resumed) across runs.  Run
``pytest --cache-clear`` to force a fresh campaign.
"""
from picante.lwe import LweParams, gen_instance
from picante.preprocess import ReductionConfig, preprocess_campaign

N80_PARAMS = LweParams(n=80, q=113, h=9)
N80_SEED = 2024
N80_TARGET = 50_000


def n80_instance():
    return gen_instance(N80_PARAMS, N80_SEED)


def run_n80_campaign(shard_dir, progress=None):
    return preprocess_campaign(n80_instance(), ReductionConfig(), N80_TARGET,
                               shard_dir=shard_dir, fill=True, keep_transform=True,
                               progress=progress)
