import pytest
import torch

from nodule_align.annotations import build_split
from nodule_align.config import TrainConfig
from nodule_align.fixtures import gen_fixture
from nodule_align.training import train


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """60-nodule fixture shared by training-level tests."""
    out = tmp_path_factory.mktemp("small_dataset")
    records = gen_fixture(60, seed=0, out_dir=out)
    return out, records


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    """200-nodule quadrant-lesion fixture used by the acceptance smoke run."""
    out = tmp_path_factory.mktemp("smoke_dataset")
    records = gen_fixture(200, seed=0, out_dir=out, quadrant_lesion=True)
    return out, records


@pytest.fixture(scope="session")
def smoke_run(smoke_dataset, tmp_path_factory):
    """Seed-0 reference run: 200 nodules, stub encoder, T=8, 5 epochs on CPU."""
    data_dir, records = smoke_dataset
    out = tmp_path_factory.mktemp("smoke_run")
    config = TrainConfig(variant="LIDC-A", fold=0, seed=0, num_groups=8,
                         epochs=5, batch_size=8, lr0=0.001)
    split = build_split(records, config.variant, config.fold, config.seed)
    import time
    t0 = time.monotonic()
    ckpt_path, history = train(config, split, data_dir, out)
    wall = time.monotonic() - t0
    return {
        "data_dir": data_dir,
        "records": records,
        "config": config,
        "split": split,
        "out_dir": out,
        "checkpoint": ckpt_path,
        "history": history,
        "wall_seconds": wall,
    }
