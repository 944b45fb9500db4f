import json

import numpy as np
import pytest

from selectenc.attack import AttackConfig
from selectenc.dataio import synth_images
from selectenc.fedsim import Client, FedRound, adversary_pipeline, dump_transcript, local_update, plaintext_fedavg, run_round
from selectenc.models import build, lenet_small


@pytest.fixture(scope="module")
def params():
    return build(lenet_small((8, 8, 1), 10), 0)


def make_clients(n, per=2, weights=None, seed=1):
    images = synth_images(n * per, seed, 10, (8, 8, 1))
    weights = weights or [1.0 / n] * n
    return [Client(i, images[i * per : (i + 1) * per], w) for i, w in enumerate(weights)]


class TestRound:
    def test_single_client_is_its_local_update(self, params):
        clients = make_clients(1)
        out = run_round(FedRound(clients, params, metric="Grad", ratio=0.3))
        local, _ = local_update(params, clients[0].images, 1, 0.1)
        assert out.new_global.theta.tobytes() == local.tobytes()

    @pytest.mark.parametrize("metric", ["Grad", "ProdSig", "Param"])
    @pytest.mark.parametrize("ratio", [0.0, 0.3, 1.0])
    def test_matches_plaintext_fedavg_bitwise(self, params, metric, ratio):
        rnd = FedRound(make_clients(3, weights=[0.5, 0.3, 0.2]), params, metric=metric, ratio=ratio)
        assert run_round(rnd).new_global.theta.tobytes() == plaintext_fedavg(rnd).theta.tobytes()

    def test_multi_epoch_equivalence(self, params):
        rnd = FedRound(make_clients(2), params, local_epochs=3, metric="Grad", ratio=0.3)
        assert run_round(rnd).new_global.theta.tobytes() == plaintext_fedavg(rnd).theta.tobytes()

    def test_parallel_clients_give_identical_aggregate(self, params):
        rnd = FedRound(make_clients(3), params, metric="Grad", ratio=0.3)
        a, b = run_round(rnd, workers=1), run_round(rnd, workers=3)
        assert a.new_global.theta.tobytes() == b.new_global.theta.tobytes()

    def test_client_order_does_not_matter(self, params):
        clients = make_clients(3, weights=[0.5, 0.3, 0.2])
        a = run_round(FedRound(clients, params, ratio=0.3))
        b = run_round(FedRound(list(reversed(clients)), params, ratio=0.3))
        assert a.new_global.theta.tobytes() == b.new_global.theta.tobytes()

    def test_weights_must_sum_to_one(self, params):
        with pytest.raises(ValueError):
            FedRound(make_clients(2, weights=[0.5, 0.6]), params)

    def test_needs_clients(self, params):
        with pytest.raises(ValueError):
            FedRound([], params)

    def test_intercepts_leak_only_plaintext(self, params):
        out = run_round(FedRound(make_clients(3), params, metric="Grad", ratio=0.3), transcript=True)
        for view, log in zip(out.intercepts, out.transcript["clients"]):
            hidden = np.zeros(params.m, dtype=bool)
            hidden[log["mask_indices"]] = True
            assert view.leaked == params.m - hidden.sum() == params.m - int(np.ceil(0.3 * params.m))
            np.testing.assert_array_equal(view.known, ~hidden)
            assert np.all(np.asarray(log["plaintext"])[hidden] == 0)

    def test_transcript_dump(self, params, tmp_path):
        out = run_round(FedRound(make_clients(2), params, ratio=0.1), transcript=True)
        dump_transcript(out, tmp_path / "t.json")
        data = json.loads((tmp_path / "t.json").read_text())
        assert [c["client"] for c in data["clients"]] == [0, 1]
        assert data["clients"][0]["ciphertext"]["key_id"] == "round-key"


class TestAdversary:
    def test_full_encryption_is_infeasible(self, params):
        out = run_round(FedRound(make_clients(2), params, ratio=1.0))
        res = adversary_pipeline(out, params, AttackConfig(iterations=2, restarts=1))
        assert [r.status for r in res] == ["AttackInfeasible"] * 2

    def test_unprotected_intercepts_are_recovered(self, params):
        clients = make_clients(2)
        out = run_round(FedRound(clients, params, ratio=0.0))
        truths = [c.images[0].pixels for c in clients]
        res = adversary_pipeline(out, params, AttackConfig(iterations=2000, restarts=1), truths)
        assert all(r.status == "ok" for r in res)
        assert np.median([r.quality.mse for r in res]) < 0.01

    def test_deterministic(self, params):
        out = run_round(FedRound(make_clients(2), params, ratio=0.3))
        cfg = AttackConfig(iterations=10, restarts=1)
        a, b = adversary_pipeline(out, params, cfg), adversary_pipeline(out, params, cfg)
        assert all(x.result.x_star.tobytes() == y.result.x_star.tobytes() for x, y in zip(a, b))
