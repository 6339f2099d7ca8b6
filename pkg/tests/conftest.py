import os
import sys
from pathlib import Path

# single-threaded BLAS before numpy loads: reproducible timings and results
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from partcascade import trainer as tr
from partcascade.toyworld import ToySpec, generate_dataset


@pytest.fixture(scope="session")
def tiny_table_dataset():
    return generate_dataset(ToySpec(family="table", rng_seed=7, d_s=8), 48)


@pytest.fixture(scope="session")
def tiny_chair_dataset():
    return generate_dataset(ToySpec(family="chair", rng_seed=9, d_s=8), 48)


@pytest.fixture(scope="session")
def tiny_train_config():
    return tr.TrainConfig(batch=16, total_steps=200, T=50, beta_end=0.2,
                          seed=3)


@pytest.fixture(scope="session")
def tiny_models(tiny_table_dataset, tiny_train_config):
    """A barely-trained cascade pair for plumbing tests (not quality)."""
    d_s = tiny_table_dataset.shapes[0].d_s
    p1 = tr.train_phase1(tiny_table_dataset, tr.toy_denoiser_config(16),
                         tiny_train_config).params
    p2 = tr.train_phase2(tiny_table_dataset,
                         tr.toy_denoiser_config(d_s, phase2=True),
                         tiny_train_config).params
    return p1, p2, tiny_train_config.schedule()
