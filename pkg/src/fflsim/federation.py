"""The synchronous federated round loop.

Each round the server broadcasts its parameters and the plan (tau_k, s_k);
every worker runs tau_k local SGD steps, sums its per-step mini-batch
gradients, optionally compresses that sum, and uploads it.  The server
averages whatever payloads survive the packet-failure draws, takes one
momentum SGD step with the average, and feeds the workers' mean training
loss back into the scheduler for the next plan.  Named schemes are presets
of three knobs (compression on/off, adaptive or pinned tau, adaptive or
pinned s), so the baselines are literally the adaptive engine with parts
switched off.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import compress, netsim, nn, schedule
from .config import ExperimentConfig
from .data import Dataset, Shard, gen_synthetic, load_idx, partition, PartitionSpec, split_per_class, take
from .errors import ConfigError
from .rng import substream

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "round", "sim_time_s", "tau_k", "s_k", "train_loss", "smoothed_loss", "test_acc",
    "received_workers", "atoms_sent_total", "round_time_s", "uplink_max_s", "downlink_s",
    "compute_max_s",
)


@dataclass
class SchemePolicy:
    """Knob preset for one scheme: compression on/off and whether each half
    of the plan adapts or stays pinned."""

    compress: bool
    adapt_tau: bool
    adapt_s: bool
    tau_pin: int | None = None
    s_pin: float | None = None


def policy_for(scheme: str, tau0: int, s0: float) -> SchemePolicy:
    if scheme == "ffl":
        return SchemePolicy(compress=True, adapt_tau=True, adapt_s=True)
    if scheme == "adacomm_like":
        return SchemePolicy(compress=False, adapt_tau=True, adapt_s=False, s_pin=s0)
    if scheme == "atomo_like":
        return SchemePolicy(compress=True, adapt_tau=False, adapt_s=False, tau_pin=1, s_pin=s0)
    if scheme == "fixed":
        return SchemePolicy(compress=True, adapt_tau=False, adapt_s=False, tau_pin=tau0, s_pin=s0)
    if scheme == "vanilla":
        return SchemePolicy(compress=False, adapt_tau=False, adapt_s=False, tau_pin=1, s_pin=s0)
    raise ConfigError(f"unknown scheme {scheme!r}")


@dataclass
class WorkerState:
    worker_id: int
    shard: Shard
    rng: np.random.Generator


@dataclass
class RoundRecord:
    round: int
    sim_time_s: float
    tau_k: int
    s_k: float
    train_loss: float
    smoothed_loss: float
    test_acc: float
    received_workers: int
    atoms_sent_total: int
    round_time_s: float
    uplink_max_s: float
    downlink_s: float
    compute_max_s: float
    # extra telemetry, not part of the CSV schema
    expected_atoms: float = 0.0
    expected_atoms_var: float = 0.0
    smoothed_acc: float = 0.0


def evaluate(params: nn.ParameterSet, test_set: Dataset, chunk: int = 512) -> tuple[float, float]:
    """Mean cross-entropy loss and top-1 accuracy over a dataset."""
    total_loss = 0.0
    correct = 0
    for start in range(0, test_set.n, chunk):
        stop = min(start + chunk, test_set.n)
        batch = nn.MiniBatch(test_set.features[start:stop], test_set.labels[start:stop])
        logits = nn.forward(params, batch)
        loss, _ = nn.softmax_cross_entropy(logits, batch.labels)
        total_loss += loss * (stop - start)
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    return total_loss / test_set.n, correct / test_set.n


def _build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    data_rng = substream(cfg.seed, "data")
    if cfg.dataset == "synthetic":
        full = gen_synthetic(
            cfg.synthetic_classes,
            cfg.synthetic_per_class + cfg.synthetic_test_per_class,
            cfg.synthetic_dim,
            cfg.synthetic_spread,
            data_rng,
        )
        return split_per_class(full, cfg.synthetic_per_class)
    train = load_idx(
        os.path.join(cfg.mnist_dir, "train-images-idx3-ubyte"),
        os.path.join(cfg.mnist_dir, "train-labels-idx1-ubyte"),
    )
    test = load_idx(
        os.path.join(cfg.mnist_dir, "t10k-images-idx3-ubyte"),
        os.path.join(cfg.mnist_dir, "t10k-labels-idx1-ubyte"),
    )
    if cfg.subset_n < train.n:
        train = take(train, data_rng.choice(train.n, size=cfg.subset_n, replace=False))
    if cfg.test_subset_n < test.n:
        test = take(test, data_rng.choice(test.n, size=cfg.test_subset_n, replace=False))
    return train, test


class Experiment:
    """One configured run: dataset, workers, server state, and the round loop."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.channel = cfg.channel()
        self.policy = policy_for(cfg.scheme, cfg.tau0, cfg.s0)
        self.train_set, self.test_set = _build_datasets(cfg)
        spec = PartitionSpec(cfg.partition_mode, cfg.workers, cfg.classes_per_worker)
        shards = partition(self.train_set, spec, substream(cfg.seed, "partition"))
        self.workers = [
            WorkerState(j, shards[j], substream(cfg.seed, "worker", j))
            for j in range(cfg.workers)
        ]
        mlp = nn.MlpSpec(
            (self.train_set.d_in, *cfg.hidden_layers, self.train_set.n_classes), cfg.activation
        )
        self.params = nn.init_params(mlp, substream(cfg.seed, "init"))
        self.velocity: nn.GradientBundle | None = None
        self.scheduler = schedule.SchedulerState(
            tau0=cfg.tau0, s0=cfg.s0, tau_ub=cfg.tau_ub, s_ub=cfg.s_ub,
            loss_smoothing=cfg.loss_smoothing,
        )
        self.ledger = netsim.TimeLedger()
        self.records: list[RoundRecord] = []
        self.round_index = 0
        self.skipped_rounds = 0
        self._next_plan = self._apply_policy(schedule.RoundPlan(cfg.tau0, cfg.s0))
        self._last_acc: float | None = None
        self._smoothed_acc: float | None = None
        self._probes: list[schedule.ProbeRound] = []
        self._bound_params: schedule.BoundParams | None = None

    # ---- plan handling ------------------------------------------------- #

    def _apply_policy(self, plan: schedule.RoundPlan) -> schedule.RoundPlan:
        tau = self.policy.tau_pin if not self.policy.adapt_tau else plan.tau_k
        s = self.policy.s_pin if not self.policy.adapt_s else plan.s_k
        return schedule.RoundPlan(int(tau), float(s))

    def _bound_defaults(self) -> schedule.BoundParams:
        cfg = self.cfg
        rates = [netsim.link_rate(self.channel, j) for j in range(cfg.workers)]
        alpha = cfg.bits_per_atom / (sum(rates) / len(rates))
        return schedule.BoundParams(
            eta=cfg.eta, L=cfg.L, sigma1=cfg.sigma1, sigma2=cfg.sigma2, alpha=alpha,
            M=cfg.workers, T_k=cfg.T_budget_s, Y_k=cfg.sec_per_local_step,
            F_inf=cfg.F_inf, beta=cfg.beta,
        )

    def _plan_after_feedback(self, mean_loss: float) -> None:
        """Fold the round's loss feedback into the scheduler and stage the
        next round's plan."""
        cfg = self.cfg
        if not (self.policy.adapt_tau or self.policy.adapt_s):
            schedule.observe_loss(self.scheduler, mean_loss)
            return
        if cfg.schedule == "conclusive":
            plan = schedule.plan_next(self.scheduler, mean_loss)
        else:
            f_hat = schedule.observe_loss(self.scheduler, mean_loss)
            if self.round_index + 1 < cfg.probe_rounds:
                plan = schedule.RoundPlan(cfg.tau0, cfg.s0)
            else:
                if self._bound_params is None:
                    self._bound_params = schedule.estimate_constants(
                        self._probes, self._bound_defaults()
                    )
                plan = schedule.optimal_full(
                    self._bound_params, f_hat, cfg.tau_ub, cfg.s_ub,
                    tau0=cfg.tau0, s0=cfg.s0,
                )
        self._next_plan = self._apply_policy(plan)

    # ---- the round ----------------------------------------------------- #

    def run_round(self) -> RoundRecord:
        cfg = self.cfg
        k = self.round_index
        plan = self._next_plan
        d = self.params.dim

        compute_s: list[float] = []
        uplink_s: list[float] = []
        received_flat: list[np.ndarray] = []
        received_losses: list[float] = []
        atoms_sent = 0
        expected_atoms = 0.0
        expected_var = 0.0
        sigma_pairs: list[tuple[float, float]] = []

        for worker in self.workers:
            _, g_sum, losses = nn.local_update_run(
                self.params, self.train_set, worker.shard, plan.tau_k, cfg.eta,
                cfg.batch_size, worker.rng, momentum=cfg.worker_momentum,
            )
            payload_atoms = 0
            if self.policy.compress:
                decomp = compress.decompose_bundle(g_sum, cfg.basis, plan.s_k)
                if decomp.n_atoms == 0:
                    log.warning("round %d worker %d: zero gradient, empty payload", k, worker.worker_id)
                    probs = compress.SelectionProbabilities(np.empty(0))
                else:
                    probs = compress.probabilities(decomp, plan.s_k)
                    terms = compress.sigma_terms(decomp)
                    sigma_pairs.append((terms.sigma1, terms.sigma2))
                cg = compress.sample(decomp, probs, substream(cfg.seed, "compress", worker.worker_id, k))
                payload_atoms = cg.payload_atoms
                flat = compress.reconstruct(cg)
                expected_atoms += float(probs.probs.sum())
                expected_var += float((probs.probs * (1.0 - probs.probs)).sum())
                up = netsim.uplink_time(payload_atoms, self.channel, worker.worker_id)
            else:
                flat = g_sum.flatten()
                up = netsim.dense_uplink_time(d, self.channel, worker.worker_id)
            atoms_sent += payload_atoms
            compute_s.append(
                plan.tau_k * self.channel.sec_per_local_step
                + payload_atoms * self.channel.sec_per_atom_compress
            )
            uplink_s.append(up)
            if netsim.packet_survives(substream(cfg.seed, "net", worker.worker_id, k), self.channel):
                received_flat.append(flat)
                received_losses.append(float(np.mean(losses)))

        downlink_bits = d * self.channel.bits_per_weight
        downlink_s = downlink_bits / self.channel.downlink_rate_bps
        total_s = netsim.round_time(compute_s, uplink_s, downlink_bits, self.channel)
        sim_time = self.ledger.append(
            netsim.RoundTiming(k, compute_s, uplink_s, downlink_s, total_s)
        )

        if received_flat:
            if cfg.schedule == "full" and self.policy.adapt_tau and k < cfg.probe_rounds:
                self._probes.append(
                    schedule.ProbeRound(
                        weights=self.params.flatten(),
                        gradient=sum(received_flat) / (len(received_flat) * plan.tau_k),
                        sigma_pairs=sigma_pairs,
                        atom_seconds=self.channel.bits_per_atom
                        / netsim.link_rate(self.channel, 0),
                    )
                )
            mean_flat = received_flat[0].copy()
            for other in received_flat[1:]:
                mean_flat += other
            mean_flat /= len(received_flat)
            ghat = self.params.from_flat(mean_flat)
            self.params, self.velocity = nn.sgd_step(
                self.params, ghat, cfg.eta, cfg.server_momentum, self.velocity
            )
            train_loss = float(np.mean(received_losses))
            self._plan_after_feedback(train_loss)
        else:
            self.skipped_rounds += 1
            train_loss = math.nan
            log.warning("round %d: no payload survived, model update skipped", k)

        if k % cfg.eval_stride == 0 or self._last_acc is None:
            _, acc = evaluate(self.params, self.test_set)
            self._last_acc = acc
            if self._smoothed_acc is None:
                self._smoothed_acc = acc
            else:
                c = cfg.loss_smoothing
                self._smoothed_acc = c * self._smoothed_acc + (1.0 - c) * acc

        record = RoundRecord(
            round=k,
            sim_time_s=sim_time,
            tau_k=plan.tau_k,
            s_k=plan.s_k,
            train_loss=train_loss,
            smoothed_loss=self.scheduler.smoothed if self.scheduler.smoothed is not None else math.nan,
            test_acc=self._last_acc,
            received_workers=len(received_flat),
            atoms_sent_total=atoms_sent,
            round_time_s=total_s,
            uplink_max_s=max(uplink_s),
            downlink_s=downlink_s,
            compute_max_s=max(compute_s),
            expected_atoms=expected_atoms,
            expected_atoms_var=expected_var,
            smoothed_acc=self._smoothed_acc,
        )
        self.records.append(record)
        self.round_index += 1
        return record

    def run(self) -> tuple[list[RoundRecord], dict]:
        cfg = self.cfg
        while True:
            self.run_round()
            if cfg.stop == "rounds" and self.round_index >= cfg.round_cap:
                break
            if cfg.stop == "time" and self.ledger.total_s >= cfg.T_budget_s:
                break
            if self.round_index >= cfg.round_cap:
                log.warning("round cap %d reached before the time budget", cfg.round_cap)
                break
        return self.records, self.summary()

    def summary(self) -> dict:
        cfg = self.cfg
        time_to_target: float | str = "inf"
        for record in self.records:
            if record.smoothed_acc >= cfg.target_accuracy:
                time_to_target = record.sim_time_s
                break
        last = self.records[-1]
        return {
            "scheme": cfg.scheme,
            "config": cfg.to_dict(),
            "rounds": len(self.records),
            "final_acc": last.test_acc,
            "final_smoothed_acc": last.smoothed_acc,
            "final_train_loss": last.train_loss,
            "final_smoothed_loss": last.smoothed_loss,
            "target_accuracy": cfg.target_accuracy,
            "time_to_target_s": time_to_target,
            "total_sim_time_s": self.ledger.total_s,
            "total_atoms_sent": sum(r.atoms_sent_total for r in self.records),
            "skipped_rounds": self.skipped_rounds,
        }


def write_metrics_csv(records: list[RoundRecord], path: str) -> None:
    """The per-round metrics table; byte-stable for identical runs."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([getattr(r, col) for col in CSV_COLUMNS])


def run_experiment(cfg: ExperimentConfig, output_dir: str | None = None) -> tuple[list[RoundRecord], dict]:
    """Run one experiment and write metrics.csv + summary.json to the output
    directory (cfg.output_dir unless overridden here)."""
    experiment = Experiment(cfg)
    records, summary = experiment.run()
    output_dir = output_dir if output_dir is not None else cfg.output_dir
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        write_metrics_csv(records, os.path.join(output_dir, "metrics.csv"))
        with open(os.path.join(output_dir, "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)
            f.write("\n")
    return records, summary
