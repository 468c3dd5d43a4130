import numpy as np
import pandas as pd
import pytest

from txresilience.data import TransactionTable


def make_table(rows, mcc_default="5411"):
    """Rows of (client, merchant, date, amount[, mcc[, district]])."""
    recs = []
    for r in rows:
        c, m, d, a = r[:4]
        mcc = r[4] if len(r) > 4 else mcc_default
        dist = r[5] if len(r) > 5 else "D01"
        recs.append({"client_id": c, "merchant_id": m, "timestamp": pd.Timestamp(d), "amount": float(a), "mcc": int(mcc), "district_id": dist, "region_id": "R"})
    return TransactionTable.from_frame(pd.DataFrame(recs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_generation():
    from txresilience import synthgen

    cfg = synthgen.ScenarioConfig.load("small")
    return synthgen.generate(cfg, seed=3)
