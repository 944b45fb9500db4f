"""One FedAvg round where every client ships part of its model in (mock) ciphertext."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import encryption as enc
from .attack import AttackConfig, AttackInfeasible, ReconstructionResult, invert
from .evalmetrics import QualityReport, quality
from .models import ParamVector, loss_and_grad, onehot
from .significance import compute


@dataclass
class Client:
    client_id: int
    images: list  # LabeledImage shard
    weight: float


@dataclass
class FedRound:
    clients: list
    global_params: ParamVector
    local_epochs: int = 1
    lr: float = 0.1
    metric: str = "Grad"
    ratio: float = 0.0
    key_id: str = "round-key"

    def __post_init__(self):
        if not self.clients:
            raise ValueError("a round needs at least one client")
        total = math.fsum(c.weight for c in self.clients)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"client weights sum to {total!r}, expected 1")


@dataclass
class RoundOutput:
    new_global: ParamVector
    intercepts: list  # AttackerView per client, in client order
    labels: list  # one-hot label of each intercepted sample
    transcript: dict = field(default_factory=dict)


def local_update(params: ParamVector, images, epochs: int, lr: float) -> tuple[np.ndarray, np.ndarray]:
    """``epochs`` full-batch gradient steps; returns (local theta, first-step gradient of the first sample)."""
    theta = params.theta.copy()
    k = params.spec.num_classes
    first = None
    for _ in range(epochs):
        cur = params.with_theta(theta)
        total = np.zeros_like(theta)
        for img in images:
            g = loss_and_grad(cur, img.pixels, onehot(img.label, k))[1].values
            if first is None:
                first = g
            total += g
        theta = theta - lr * (total / len(images))
    return theta, first


def _local_updates(rnd: FedRound, clients: list, workers: int) -> list:
    def work(c):
        return local_update(rnd.global_params, c.images, rnd.local_epochs, rnd.lr)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(work, clients))
    return [work(c) for c in clients]


def run_round(rnd: FedRound, seed: int = 0, transcript: bool = False, workers: int = 1) -> RoundOutput:
    """Clients train locally, split their model by mask into plaintext and ciphertext,
    and the server aggregates sum_i alpha_i W_i without decrypting individual clients.

    Plaintext parts are folded into the running ciphertext accumulator client by
    client, so every coordinate is summed in client order exactly as in plain
    FedAvg. With ``workers > 1`` local training runs concurrently; aggregation
    still happens in client-id order.
    """
    params = rnd.global_params
    k = params.spec.num_classes
    acc = enc.mock_encrypt(np.zeros(params.m), rnd.key_id)
    intercepts, labels, log = [], [], []
    clients = sorted(rnd.clients, key=lambda c: c.client_id)
    for c, (w_i, g0) in zip(clients, _local_updates(rnd, clients, workers)):
        x0, y0 = c.images[0].pixels, onehot(c.images[0].label, k)
        scores = compute(rnd.metric, params, x0, y0, g0)
        mask = enc.top_s_mask(scores, rnd.ratio)
        hidden = mask.bits.astype(bool)
        plain = np.where(hidden, 0.0, w_i)
        cipher = enc.mock_encrypt(np.where(hidden, w_i, 0.0), rnd.key_id)
        # server side
        acc = enc.mock_add(acc, enc.mock_scale(cipher, c.weight))
        acc = enc.mock_add_plain(acc, c.weight * plain)
        intercepts.append(enc.attacker_view(g0, mask, seed=seed + c.client_id))
        labels.append(y0)
        if transcript:
            log.append({
                "client": c.client_id,
                "weight": c.weight,
                "mask_indices": mask.indices.tolist(),
                "plaintext": plain.tolist(),
                "ciphertext": {"key_id": cipher.key_id, "length": int(cipher.payload.size)},
            })
    new = params.with_theta(enc.mock_decrypt(acc, rnd.key_id))
    meta = {"metric": rnd.metric, "ratio": rnd.ratio, "seed": seed, "clients": log} if transcript else {}
    return RoundOutput(new, intercepts, labels, meta)


def plaintext_fedavg(rnd: FedRound) -> ParamVector:
    """Reference aggregation without any encryption."""
    params = rnd.global_params
    acc = np.zeros(params.m)
    for c in sorted(rnd.clients, key=lambda c: c.client_id):
        w_i, _ = local_update(params, c.images, rnd.local_epochs, rnd.lr)
        acc = acc + c.weight * w_i
    return params.with_theta(acc)


def dump_transcript(out: RoundOutput, path) -> None:
    with open(path, "w") as fh:
        json.dump(out.transcript, fh, indent=1)


@dataclass
class InterceptOutcome:
    client: int
    result: ReconstructionResult | None
    quality: QualityReport | None
    status: str


def adversary_pipeline(out: RoundOutput, params: ParamVector, cfg: AttackConfig, truths=None) -> list[InterceptOutcome]:
    """Invert every intercepted gradient; score against ``truths`` when given."""
    results = []
    for i, (view, y0) in enumerate(zip(out.intercepts, out.labels)):
        try:
            r = invert(params, y0, view, cfg, sample_index=i)
        except AttackInfeasible:
            results.append(InterceptOutcome(i, None, None, "AttackInfeasible"))
            continue
        q = quality(r.x_star, truths[i]) if truths is not None else None
        results.append(InterceptOutcome(i, r, q, "ok"))
    return results
