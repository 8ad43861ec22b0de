import functools

from mmar.mctest import build_cloud_niid, size_power_cell

CLOUD_SEED = 0
OUTER_SEED = 1


@functools.lru_cache(maxsize=None)
def niid_cloud(T, reps=5000):
    return build_cloud_niid(T, reps, seed=CLOUD_SEED)


@functools.lru_cache(maxsize=None)
def power_cell(H, lam, T, outer, levels=(0.10, 0.05, 0.01)):
    return size_power_cell(H, lam, T, outer, niid_cloud(T), levels, seed=OUTER_SEED)
