"""Round-based protocol driver.

One round: select clients -> broadcast the current global-module
parameters (and, by default, the server head) to the selected clients ->
each client trains its local module and head for E epochs on masked
patches with the global module frozen, collecting patch features ->
median-balanced feature sets upload -> the server trains the global
module and its head on the merged features -> evaluation.

Every random draw derives from (seed, purpose, client_id, round) streams,
so client updates can run on any thread-pool size with byte-identical
results. The learning-rate schedule is indexed by round: round t trains
at cosine_warmup_lr(t+1, rounds+1, warmup, lr).
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bpf as bpf_mod
from . import checkpoint, data, tensor as T, vit
from .errors import ConfigError
from .optim import AdamW, cosine_warmup_lr
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FLConfig:
    k: int = 100
    p_select: float = 0.1
    rounds: int = 30
    local_epochs: int = 3
    server_epochs: int = 1
    beta: float = 0.1
    r_m: float = 0.75
    seed: int = 0
    lr: float = 5e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    batch_size: int = 32
    augment: bool = True
    broadcast_head: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if not 0 < self.p_select <= 1:
            raise ConfigError(f"selection ratio must lie in (0, 1], got {self.p_select}")
        if self.k < 1 or self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("k, rounds and local_epochs must be >= 1")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")


@dataclass
class RoundMetrics:
    round_idx: int
    selected: list[int]
    mean_client_loss: float
    server_loss: float | None
    test_acc: float | None
    bytes_up: int
    bytes_down: int
    client_macs: int

    def to_json_line(self) -> str:
        return json.dumps({
            "round": self.round_idx,
            "selected": self.selected,
            "mean_client_loss": self.mean_client_loss,
            "server_loss": self.server_loss,
            "test_acc": self.test_acc,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "client_macs": self.client_macs,
        })


def select_clients(k: int, p_select: float, rng) -> np.ndarray:
    """Uniform sample without replacement of max(1, round(P*K)) ids."""
    if not 0 < p_select <= 1:
        raise ConfigError(f"selection ratio must lie in (0, 1], got {p_select}")
    count = max(1, round(p_select * k))
    return np.sort(rng.choice(k, size=count, replace=False))


def lr_for_round(fl: FLConfig, round_idx: int) -> float:
    warmup = int(fl.warmup_frac * fl.rounds)
    return cosine_warmup_lr(round_idx + 1, fl.rounds + 1, warmup, fl.lr)


def _copy_group(group: dict[str, T.Tensor], trainable: bool) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v.detach_array(), requires_grad=trainable)
            for k, v in group.items()}


def _assign_group(dst: dict[str, T.Tensor], src: dict[str, T.Tensor]):
    for k, t in dst.items():
        t.data[...] = src[k].data


def _group_arrays(group: dict[str, T.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in group.items()}


def _dump_len(group: dict[str, T.Tensor]) -> int:
    return len(checkpoint.dump_tensors(_group_arrays(group)))


class ClientState:
    def __init__(self, client_id: int, ref: vit.ParamSet, shard: data.ClientDataset,
                 wd: float):
        self.client_id = client_id
        self.phi = _copy_group(ref.phi, trainable=True)
        self.theta = _copy_group(ref.theta, trainable=True)
        self.w_global = _copy_group(ref.w_global, trainable=False)
        self.shard = shard
        self.opt = AdamW({**self.phi, **self.theta}, weight_decay=wd)

    def params(self) -> vit.ParamSet:
        return vit.ParamSet(self.phi, self.w_global, self.theta)


class ServerState:
    def __init__(self, ref: vit.ParamSet, wd: float):
        self.w_global = _copy_group(ref.w_global, trainable=True)
        self.theta = _copy_group(ref.theta, trainable=True)
        self.opt = AdamW({**self.w_global, **self.theta}, weight_decay=wd)
        self.latest_bpf: list[bpf_mod.BalancedFeatureSet] = []


@dataclass
class ClientResult:
    client_id: int
    payload: bytes
    mean_loss: float | None
    macs: int
    w_checksum_before: str = ""
    w_checksum_after: str = ""


class Experiment:
    """EFTViT-style hierarchical run over a fixed dataset and partition."""

    def __init__(self, vcfg: vit.ViTConfig, fl: FLConfig, train_ds: data.Dataset,
                 test_ds: data.Dataset, audit: bool = False, threads: int = 1):
        self.vcfg = vcfg
        self.fl = fl
        self.test_ds = test_ds
        self.audit = audit
        self.threads = max(1, threads)
        self.audit_log: list[dict] = []

        part_rng = stream(fl.seed, "partition")
        self.partition = data.dirichlet_partition(train_ds.y, fl.k, fl.beta,
                                                  part_rng, seed=fl.seed)
        shards = data.split_clients(train_ds, self.partition)

        ref = vit.init_params(vcfg, stream(fl.seed, "init"))
        self.server = ServerState(ref, fl.weight_decay)
        self.clients = [ClientState(c, ref, shards[c], fl.weight_decay)
                        for c in range(fl.k)]

    # -- protocol steps ----------------------------------------------------

    def run_round(self, round_idx: int) -> RoundMetrics:
        fl = self.fl
        sel = select_clients(fl.k, fl.p_select, stream(fl.seed, "select", round_idx))
        lr = lr_for_round(fl, round_idx)

        w_bytes = _dump_len(self.server.w_global)
        theta_bytes = _dump_len(self.server.theta) if fl.broadcast_head else 0
        for cid in sel:
            client = self.clients[cid]
            _assign_group(client.w_global, self.server.w_global)
            if fl.broadcast_head:
                _assign_group(client.theta, self.server.theta)
                client.opt.reset_moments(list(client.theta))
        bytes_down = (w_bytes + theta_bytes) * len(sel)

        if self.audit:
            server_sum = checkpoint.checksum(_group_arrays(self.server.w_global))
            coherent = all(
                checkpoint.checksum(_group_arrays(self.clients[c].w_global)) == server_sum
                for c in sel
            )
            self.audit_log.append({"round": round_idx, "event": "broadcast",
                                   "coherent": coherent})

        if self.threads == 1 or len(sel) == 1:
            results = [self._client_update(self.clients[c], round_idx, lr) for c in sel]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(
                    lambda c: self._client_update(self.clients[c], round_idx, lr), sel))
        results.sort(key=lambda r: r.client_id)

        if self.audit:
            frozen_ok = all(r.w_checksum_before == r.w_checksum_after for r in results)
            self.audit_log.append({"round": round_idx, "event": "freeze",
                                   "intact": frozen_ok})

        bytes_up = sum(len(r.payload) for r in results)
        losses = [r.mean_loss for r in results if r.mean_loss is not None]
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        macs = sum(r.macs for r in results)

        server_loss = self._server_update([r.payload for r in results], round_idx, lr)
        if self.audit:
            bpf_ids = [s.client_id for s in self.server.latest_bpf]
            self.audit_log.append({"round": round_idx, "event": "bpf",
                                   "client_ids": bpf_ids,
                                   "fresh": bpf_ids == [int(c) for c in sel]})

        test_acc = None
        if (round_idx + 1) % fl.eval_every == 0 or round_idx == fl.rounds - 1:
            test_acc = self.evaluate()

        return RoundMetrics(round_idx, [int(c) for c in sel], mean_loss, server_loss,
                            test_acc, bytes_up, bytes_down, macs)

    def _client_update(self, client: ClientState, round_idx: int, lr: float) -> ClientResult:
        fl, vcfg = self.fl, self.vcfg
        shard = client.shard
        before = checkpoint.checksum(_group_arrays(client.w_global)) if self.audit else ""
        if shard.n_k == 0:
            log.warning("client %d has no samples; skipped in round %d",
                        client.client_id, round_idx)
            empty = bpf_mod.BalancedFeatureSet(client.client_id, [], {}, 0)
            return ClientResult(client.client_id, bpf_mod.serialize_bpf(empty),
                                None, 0, before, before)

        rng = stream(fl.seed, "client", client.client_id, round_idx)
        pool: list[bpf_mod.PatchFeatureRecord] = []
        params = client.params()
        losses = []
        macs = 0
        for epoch in range(fl.local_epochs):
            for xb, yb in data.batches(shard.x, shard.y, fl.batch_size, rng):
                if fl.augment:
                    xb = data.augment_batch(xb, rng)
                batch = vit.make_masked_batch(xb, yb, fl.r_m, rng, vcfg)
                with T.Graph() as g:
                    h_p = vit.local_forward(params.phi, batch, vcfg)
                    bpf_mod.collect(pool, client.client_id, epoch,
                                    h_p.detach_array(), yb, batch.kept_indices)
                    h_r = vit.global_forward(params.w_global, h_p, vcfg)
                    logits = vit.head_forward(params.theta, h_r)
                    loss = T.cross_entropy(logits, yb)
                    T.backward(loss, g)
                client.opt.step(lr)
                client.opt.zero_grad()
                losses.append(loss.item())
                macs += g.mac_counter

        counts = {int(c): int((shard.y == c).sum()) for c in shard.classes_present}
        median = bpf_mod.class_median(counts)
        balanced = bpf_mod.median_balance(pool, counts, median, rng)
        payload = bpf_mod.serialize_bpf(balanced)
        after = checkpoint.checksum(_group_arrays(client.w_global)) if self.audit else ""
        return ClientResult(client.client_id, payload, float(np.mean(losses)),
                            macs, before, after)

    def _server_update(self, payloads: list[bytes], round_idx: int, lr: float):
        fl = self.fl
        sets = [bpf_mod.deserialize_bpf(p) for p in payloads]
        sets.sort(key=lambda s: s.client_id)
        self.server.latest_bpf = sets  # previous round's features are gone
        records = [r for s in sets for r in s.records]
        if not records:
            return None

        kept = len(records[0].kept_indices)
        d = records[0].features.shape[1]
        assert all(len(r.kept_indices) == kept and r.features.shape == (kept + 1, d)
                   for r in records), "mixed feature shapes in one round"

        rng = stream(fl.seed, "server", round_idx)
        feats = np.stack([r.features for r in records])
        labels = np.array([r.label for r in records], dtype=np.int64)
        losses = []
        for _ in range(fl.server_epochs):
            for fb, yb in data.batches(feats, labels, fl.batch_size, rng):
                with T.Graph() as g:
                    h_r = vit.global_forward(self.server.w_global,
                                             T.Tensor(fb), self.vcfg)
                    logits = vit.head_forward(self.server.theta, h_r)
                    loss = T.cross_entropy(logits, yb)
                    T.backward(loss, g)
                self.server.opt.step(lr)
                self.server.opt.zero_grad()
                losses.append(loss.item())
        return float(np.mean(losses))

    # -- evaluation ---------------------------------------------------------

    def evaluate(self) -> float:
        """Mean over all clients of full-image accuracy with the client's
        (phi, theta) and the latest server w_global."""
        return float(np.mean(self.per_client_accuracy()))

    def per_client_accuracy(self) -> list[float]:
        accs = []
        for client in self.clients:
            params = vit.ParamSet(client.phi, self.server.w_global, client.theta)
            accs.append(_accuracy(params, self.test_ds, self.fl, self.vcfg))
        return accs

    def run(self, metrics_cb=None) -> tuple[list[RoundMetrics], list[float]]:
        metrics, timings = [], []
        for r in range(self.fl.rounds):
            t0 = time.perf_counter()
            row = self.run_round(r)
            timings.append(time.perf_counter() - t0)
            metrics.append(row)
            if metrics_cb:
                metrics_cb(row)
        return metrics, timings

    # -- checkpointing -------------------------------------------------------

    def save_checkpoints(self, root):
        from pathlib import Path

        root = Path(root)
        (root / "server").mkdir(parents=True, exist_ok=True)
        checkpoint.save_tensors(root / "server" / "w_global.bin",
                                _group_arrays(self.server.w_global))
        checkpoint.save_tensors(root / "server" / "theta_server.bin",
                                _group_arrays(self.server.theta))
        for client in self.clients:
            cdir = root / "clients" / str(client.client_id)
            cdir.mkdir(parents=True, exist_ok=True)
            checkpoint.save_tensors(cdir / "phi.bin", _group_arrays(client.phi))
            checkpoint.save_tensors(cdir / "theta_local.bin", _group_arrays(client.theta))
        checkpoint.write_manifest(root / "manifest.txt", {
            "phi": list(self.clients[0].phi),
            "w_global": list(self.server.w_global),
            "theta": list(self.server.theta),
        })


def _accuracy(params: vit.ParamSet, ds: data.Dataset, fl: FLConfig,
              vcfg: vit.ViTConfig) -> float:
    hits = 0
    rng = stream(0, "eval")  # r_m=0: the rng is never consulted
    for start in range(0, len(ds), fl.batch_size):
        xb = ds.x[start:start + fl.batch_size]
        yb = ds.y[start:start + fl.batch_size]
        logits = vit.full_forward(params, xb, 0.0, rng, vcfg, labels=yb)
        hits += int((logits.data.argmax(axis=1) == yb).sum())
    return hits / len(ds)


# ---------------------------------------------------------------------------
# baselines: FedAvg over the designated trainable subset, full images


class BaselineExperiment:
    """Fed-Full (all parameters) or Fed-Head (head only) with FedAvg."""

    def __init__(self, kind: str, vcfg: vit.ViTConfig, fl: FLConfig,
                 train_ds: data.Dataset, test_ds: data.Dataset, threads: int = 1):
        if kind not in ("fed_full", "fed_head"):
            raise ConfigError(f"baseline kind must be fed_full|fed_head, got {kind!r}")
        self.kind = kind
        self.vcfg = vcfg
        self.fl = fl
        self.test_ds = test_ds
        self.threads = max(1, threads)

        part_rng = stream(fl.seed, "partition")
        self.partition = data.dirichlet_partition(train_ds.y, fl.k, fl.beta,
                                                  part_rng, seed=fl.seed)
        self.shards = data.split_clients(train_ds, self.partition)

        ref = vit.init_params(vcfg, stream(fl.seed, "init"))
        self.global_params = vit.ParamSet(
            _copy_group(ref.phi, True), _copy_group(ref.w_global, True),
            _copy_group(ref.theta, True))
        # per-client optimizer moments persist across selections
        self._opts: dict[int, AdamW] = {}
        self._local: dict[int, vit.ParamSet] = {}

    def _trainable_names(self, ps: vit.ParamSet) -> dict[str, T.Tensor]:
        if self.kind == "fed_full":
            return {**ps.phi, **ps.w_global, **ps.theta}
        return dict(ps.theta)

    def _local_params(self, cid: int) -> vit.ParamSet:
        if cid not in self._local:
            ps = vit.ParamSet(
                _copy_group(self.global_params.phi, self.kind == "fed_full"),
                _copy_group(self.global_params.w_global, self.kind == "fed_full"),
                _copy_group(self.global_params.theta, True))
            self._local[cid] = ps
            self._opts[cid] = AdamW(self._trainable_names(ps), self.fl.weight_decay)
        return self._local[cid]

    def run_round(self, round_idx: int) -> RoundMetrics:
        fl = self.fl
        sel = select_clients(fl.k, fl.p_select, stream(fl.seed, "select", round_idx))
        lr = lr_for_round(fl, round_idx)

        trainable_global = self._trainable_names(self.global_params)
        down_unit = len(checkpoint.dump_tensors(
            {k: v.data for k, v in trainable_global.items()}))
        bytes_down = down_unit * len(sel)

        def update(cid):
            return self._client_update(int(cid), round_idx, lr)

        if self.threads == 1 or len(sel) == 1:
            results = [update(c) for c in sel]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(update, sel))
        results.sort(key=lambda r: r[0])

        # FedAvg: dataset-size-weighted average of the trained subset
        weights = np.array([self.shards[cid].n_k for cid, _, _ in results], dtype=np.float64)
        live = weights > 0
        bytes_up = 0
        if live.any():
            weights = weights / weights[live].sum()
            for name, gt in trainable_global.items():
                acc = np.zeros(gt.shape, dtype=np.float64)
                for w, (cid, _, _) in zip(weights, results):
                    if w > 0:
                        acc += w * self._trainable_names(self._local[cid])[name].data
                gt.data[...] = acc.astype(gt.dtype)
        for cid, _, _ in results:
            if self.shards[cid].n_k > 0:
                bytes_up += down_unit

        losses = [loss for _, loss, _ in results if loss is not None]
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        macs = sum(m for _, _, m in results)

        test_acc = None
        if (round_idx + 1) % fl.eval_every == 0 or round_idx == fl.rounds - 1:
            test_acc = self.evaluate()
        return RoundMetrics(round_idx, [int(c) for c in sel], mean_loss, None,
                            test_acc, bytes_up, bytes_down, macs)

    def _client_update(self, cid: int, round_idx: int, lr: float):
        fl, vcfg = self.fl, self.vcfg
        shard = self.shards[cid]
        if shard.n_k == 0:
            log.warning("client %d has no samples; skipped in round %d", cid, round_idx)
            return (cid, None, 0)
        params = self._local_params(cid)
        # download: local copy starts from the current global model
        _assign_group(params.phi, self.global_params.phi)
        _assign_group(params.w_global, self.global_params.w_global)
        _assign_group(params.theta, self.global_params.theta)
        opt = self._opts[cid]

        rng = stream(fl.seed, "client", cid, round_idx)
        losses = []
        macs = 0
        for _ in range(fl.local_epochs):
            for xb, yb in data.batches(shard.x, shard.y, fl.batch_size, rng):
                if fl.augment:
                    xb = data.augment_batch(xb, rng)
                batch = vit.make_masked_batch(xb, yb, 0.0, rng, vcfg)
                with T.Graph() as g:
                    h_p = vit.local_forward(params.phi, batch, vcfg)
                    h_r = vit.global_forward(params.w_global, h_p, vcfg)
                    logits = vit.head_forward(params.theta, h_r)
                    loss = T.cross_entropy(logits, yb)
                    T.backward(loss, g)
                opt.step(lr)
                opt.zero_grad()
                losses.append(loss.item())
                macs += g.mac_counter
        return (cid, float(np.mean(losses)), macs)

    def evaluate(self) -> float:
        return _accuracy(self.global_params, self.test_ds, self.fl, self.vcfg)

    def run(self, metrics_cb=None):
        metrics, timings = [], []
        for r in range(self.fl.rounds):
            t0 = time.perf_counter()
            row = self.run_round(r)
            timings.append(time.perf_counter() - t0)
            metrics.append(row)
            if metrics_cb:
                metrics_cb(row)
        return metrics, timings
