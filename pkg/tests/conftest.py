import os

import pytest
import torch

# bit-reproducibility across runs requires a fixed thread count
torch.set_num_threads(1)


def hetrec_movielens_path() -> str | None:
    """Path to the HetRec 2011 MovieLens tag file, if available."""
    path = os.environ.get("BOXREC_MOVIELENS")
    if path and os.path.exists(path):
        return path
    return None


@pytest.fixture
def movielens_file():
    path = hetrec_movielens_path()
    if path is None:
        pytest.skip(
            "HetRec MovieLens file not available; set BOXREC_MOVIELENS to "
            "user_taggedmovies-timestamps.dat to run this check"
        )
    return path
