import numpy as np
import pytest


def llama2_70b_dims():
    """Full 70B-architecture (name, d, k) list.

    80 layers, hidden 8192, FFN inner 28672, grouped-query k/v at 1024,
    vocab 32000. Norm gains count as (d, 1) vectors. Total ~68.98e9.
    """
    dims = [("embed", 32000, 8192)]
    for i in range(80):
        dims += [
            (f"layer{i}.attn.q", 8192, 8192),
            (f"layer{i}.attn.k", 1024, 8192),
            (f"layer{i}.attn.v", 1024, 8192),
            (f"layer{i}.attn.o", 8192, 8192),
            (f"layer{i}.ffn.gate", 28672, 8192),
            (f"layer{i}.ffn.up", 28672, 8192),
            (f"layer{i}.ffn.down", 8192, 28672),
            (f"layer{i}.norm_attn", 8192, 1),
            (f"layer{i}.norm_ffn", 8192, 1),
        ]
    dims += [("final_norm", 8192, 1), ("lm_head", 32000, 8192)]
    return dims


@pytest.fixture
def llama70b_dims():
    return llama2_70b_dims()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
