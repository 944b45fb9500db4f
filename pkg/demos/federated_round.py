"""One federated round with 30% Grad-selected encryption, then an honest-but-curious server attack.

Run: python demos/federated_round.py
"""

from selectenc.attack import AttackConfig
from selectenc.dataio import synth_images
from selectenc.fedsim import Client, FedRound, adversary_pipeline, plaintext_fedavg, run_round
from selectenc.models import build, lenet_small

params = build(lenet_small((8, 8, 1), 10), seed=0)
images = synth_images(6, seed=5, classes=10, shape=(8, 8, 1))
clients = [Client(i, images[2 * i : 2 * i + 2], 1 / 3) for i in range(3)]

rnd = FedRound(clients, params, metric="Grad", ratio=0.3)
out = run_round(rnd, seed=0, transcript=True)
same = out.new_global.theta.tobytes() == plaintext_fedavg(rnd).theta.tobytes()
print(f"aggregate bitwise equal to plaintext FedAvg: {same}")
for entry in out.transcript["clients"]:
    print(f"client {entry['client']}: {len(entry['mask_indices'])} of {params.m} coordinates encrypted")

# intercepts use exclude mode: encrypted coordinates are simply missing from the objective
truths = [c.images[0].pixels for c in clients]
for o in adversary_pipeline(out, params, AttackConfig(iterations=500, restarts=1), truths):
    print(f"client {o.client}: {o.status}, reconstruction mse {o.quality.mse:.5f}")
