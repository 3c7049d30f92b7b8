"""
Deployment cost model and scenario evaluation.

Costs are (FLOPs, latency ms, energy mJ) triples. Mobile/cloud scenarios
report the energy spent on the mobile device (cloud compute energy is the
cloud's); cloud-API scenarios report cloud energy. Latencies compose
additively along a path, except inside an ensemble where the selected
models run in parallel.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from errors import ConfigError, ShapeError
from contrastive import embedding_present
from multiplexer import frozen_outputs, frozen_probabilities
from router import Router

logger = logging.getLogger(__name__)

# Constants
SCENARIOS = ("mobile_only", "cloud_only", "hybrid", "cloud_hybrid_single", "cloud_hybrid_ensemble", "oracle")
CALLED_TOLERANCE = 1e-6
EVAL_BATCH_SIZE = 256


@dataclass(frozen=True)
class Cost:
    """FLOPs, latency (ms) and energy (mJ) of one path"""
    flops: float = 0.0
    latency_ms: float = 0.0
    energy_mj: float = 0.0

    def __add__(self, other):
        return Cost(self.flops + other.flops, self.latency_ms + other.latency_ms, self.energy_mj + other.energy_mj)

    def scale(self, k):
        return Cost(k * self.flops, k * self.latency_ms, k * self.energy_mj)

    def parallel(self, other):
        """Both run at once: work adds up, latency is the slower of the two"""
        return Cost(self.flops + other.flops, max(self.latency_ms, other.latency_ms), self.energy_mj + other.energy_mj)

    def to_dict(self):
        return asdict(self)


ZERO = Cost()


def compute_cost(flops, gflops, mj_per_mflop):
    """Compute cost of `flops` on a device sustaining `gflops` GFLOP/s"""
    if gflops <= 0:
        raise ConfigError(f"device throughput must be positive, got {gflops}")
    return Cost(float(flops), float(flops) / (gflops * 1e6), float(flops) / 1e6 * mj_per_mflop)


def link_cost(payload_bytes, mbps, radio_mw):
    """Transfer of `payload_bytes` over a `mbps` link with the radio drawing `radio_mw`"""
    if mbps <= 0:
        raise ConfigError(f"link rate must be positive, got {mbps}")
    latency = payload_bytes * 8 / (mbps * 1e3)
    return Cost(0.0, latency, radio_mw * latency / 1e3)


@dataclass
class CostProfile:
    """
    Per-model compute costs on both sides plus multiplexer and link costs.

    Attributes:
        model_ids: ids in zoo order
        mobile: per-model Cost on the mobile device
        cloud: per-model Cost on the cloud server
        mux_mobile: multiplexer on the device (mobile/cloud hybrid)
        mux_cloud: multiplexer on the server (cloud-API scenarios)
        upload: request upload (device side)
        download: response download (device side)
        local_index: model that runs on the device
        cloud_index: model the device offloads to
    """
    model_ids: list
    mobile: list
    cloud: list
    mux_mobile: Cost = ZERO
    mux_cloud: Cost = ZERO
    upload: Cost = ZERO
    download: Cost = ZERO
    local_index: int = 0
    cloud_index: int = -1

    def __post_init__(self):
        if not (len(self.model_ids) == len(self.mobile) == len(self.cloud)) or not self.model_ids:
            raise ConfigError("cost profile needs one mobile and one cloud cost per model")
        n = len(self.model_ids)
        self.cloud_index = self.cloud_index % n
        self.local_index = self.local_index % n
        for name, cost in self._entries():
            if min(cost.flops, cost.latency_ms, cost.energy_mj) < 0:
                raise ConfigError(f"cost profile entry {name} is negative: {cost}")

    def _entries(self):
        for model_id, mobile, cloud in zip(self.model_ids, self.mobile, self.cloud):
            yield f"mobile.{model_id}", mobile
            yield f"cloud.{model_id}", cloud
        for name in ("mux_mobile", "mux_cloud", "upload", "download"):
            yield name, getattr(self, name)

    @property
    def largest_index(self):
        flops = [c.flops for c in self.cloud]
        return int(np.argmax(flops))

    def offloaded(self, index):
        """The device's view of a cloud call: server latency counts, server energy does not"""
        cloud = self.cloud[index]
        return self.upload + Cost(cloud.flops, cloud.latency_ms, 0.0) + self.download

    @classmethod
    def from_flops(cls, model_ids, model_flops, mux_flops, payload_bytes, response_bytes,
                   mobile_gflops, cloud_gflops, mobile_mj_per_mflop, cloud_mj_per_mflop,
                   uplink_mbps, downlink_mbps, radio_mw_up, radio_mw_down, local_index=0, cloud_index=None):
        """
        Derive a profile from FLOP counts, device throughput and link rates.

        The cloud model defaults to the one with the most FLOPs.
        """
        mobile = [compute_cost(f, mobile_gflops, mobile_mj_per_mflop) for f in model_flops]
        cloud = [compute_cost(f, cloud_gflops, cloud_mj_per_mflop) for f in model_flops]
        if cloud_index is None:
            cloud_index = int(np.argmax(model_flops))
        return cls(
            model_ids=list(model_ids),
            mobile=mobile,
            cloud=cloud,
            mux_mobile=compute_cost(mux_flops, mobile_gflops, mobile_mj_per_mflop),
            mux_cloud=compute_cost(mux_flops, cloud_gflops, cloud_mj_per_mflop),
            upload=link_cost(payload_bytes, uplink_mbps, radio_mw_up),
            download=link_cost(response_bytes, downlink_mbps, radio_mw_down),
            local_index=local_index,
            cloud_index=cloud_index,
        )

    @classmethod
    def from_dict(cls, data):
        """
        Profile from a plain mapping (the `simulate.profiles` entries):
        {"models": [{"id", "flops", "mobile_latency_ms", "mobile_energy_mj",
        "cloud_latency_ms", "cloud_energy_mj"}], "mux": {...}, "upload": {...},
        "download": {...}, "local_index": 0, "cloud_index": -1}
        """
        def cost(entry):
            entry = entry or {}
            return Cost(float(entry.get("flops", 0.0)), float(entry.get("latency_ms", 0.0)),
                        float(entry.get("energy_mj", 0.0)))

        try:
            models = data["models"]
            mobile = [Cost(float(m.get("flops", 0.0)), float(m.get("mobile_latency_ms", 0.0)),
                           float(m.get("mobile_energy_mj", 0.0))) for m in models]
            cloud = [Cost(float(m.get("flops", 0.0)), float(m.get("cloud_latency_ms", 0.0)),
                          float(m.get("cloud_energy_mj", 0.0))) for m in models]
            mux = cost(data.get("mux"))
            return cls(
                model_ids=[m["id"] for m in models],
                mobile=mobile,
                cloud=cloud,
                mux_mobile=cost(data["mux_mobile"]) if "mux_mobile" in data else mux,
                mux_cloud=cost(data["mux_cloud"]) if "mux_cloud" in data else mux,
                upload=cost(data.get("upload")),
                download=cost(data.get("download")),
                local_index=int(data.get("local_index", 0)),
                cloud_index=int(data.get("cloud_index", -1)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid cost profile: {e}")


# ============================================================================
# Cost equations
# ============================================================================

def cost_mobile_only(profile):
    """The local model on the device; no communication"""
    return profile.mobile[profile.local_index]


def cost_cloud_only(profile):
    """Upload + cloud compute + download"""
    return profile.offloaded(profile.cloud_index)


def cost_hybrid_local(profile):
    return profile.mux_mobile + profile.mobile[profile.local_index]


def cost_hybrid_cloud(profile):
    return profile.mux_mobile + profile.offloaded(profile.cloud_index)


def cost_hybrid(profile, fraction_local):
    """
    f * (mux + local model) + (1 - f) * (mux + upload + cloud + download).
    """
    if not 0 <= fraction_local <= 1:
        raise ConfigError(f"fraction_local must lie in [0, 1], got {fraction_local}")
    return cost_hybrid_local(profile).scale(fraction_local) + cost_hybrid_cloud(profile).scale(1.0 - fraction_local)


def _check_called(called, n):
    called = np.asarray(called, dtype=np.float64)
    if called.shape != (n,):
        raise ShapeError(f"{called.size} called fractions for {n} models")
    if np.any(called < 0) or abs(called.sum() - 1.0) > CALLED_TOLERANCE:
        raise ConfigError(f"called fractions must be non-negative and sum to 1, got {called.tolist()}")
    return called


def cost_cloud_hybrid(costs, called):
    """
    sum_i called_i * C_i.

    Args:
        costs: per-model Cost values, or plain numbers
        called: fraction of inputs sent to each model (sums to 1)

    Returns:
        Cost, or a float when `costs` are numbers
    """
    called = _check_called(called, len(costs))
    if all(isinstance(c, Cost) for c in costs):
        total = ZERO
        for fraction, cost in zip(called, costs):
            total = total + cost.scale(float(fraction))
        return total
    return float(np.dot(called, np.asarray(costs, dtype=np.float64)))


def cost_cloud_hybrid_ensemble(costs, selections):
    """
    Mean per-input cost when each input runs its selected set in parallel.

    Args:
        costs: per-model Cost values
        selections: selected index tuples, one per input
    """
    if not selections:
        raise ShapeError("cost_cloud_hybrid_ensemble: no selections")
    total = ZERO
    for selected in selections:
        path = ZERO
        for i in selected:
            path = path.parallel(costs[i])
        total = total + path
    return total.scale(1.0 / len(selections))


def resource_saving_factor(largest_flops, expected_flops):
    """FLOPs of the largest model divided by the routed expected FLOPs"""
    if expected_flops <= 0:
        raise ConfigError(f"expected FLOPs must be positive, got {expected_flops}")
    return float(largest_flops) / float(expected_flops)


# ============================================================================
# Correctness statistics
# ============================================================================

@dataclass
class ExpertiseMatrix:
    """entry (i, j): fraction of inputs model i gets right and model j gets wrong"""
    model_ids: list
    values: np.ndarray

    def to_frame(self):
        return pd.DataFrame(self.values, index=pd.Index(self.model_ids, name="model"), columns=self.model_ids)

    def to_csv(self, path):
        self.to_frame().to_csv(path)


def _as_bitmaps(bitmaps):
    rows = [np.asarray(b, dtype=bool) for b in bitmaps]
    if not rows:
        raise ShapeError("no correctness bitmaps")
    if len({r.shape for r in rows}) != 1:
        raise ShapeError(f"correctness bitmaps differ in length: {[r.size for r in rows]}")
    if rows[0].size == 0:
        raise ShapeError("correctness bitmaps are empty")
    return np.stack(rows)


def expertise_matrix(bitmaps, model_ids=None):
    correct = _as_bitmaps(bitmaps)
    n, total = correct.shape
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                values[i, j] = np.count_nonzero(correct[i] & ~correct[j]) / total
    ids = list(model_ids) if model_ids is not None else [f"model{i}" for i in range(n)]
    return ExpertiseMatrix(ids, values)


def hardness_histogram(bitmaps):
    """Number of inputs failed by exactly k models, k = 0..N"""
    correct = _as_bitmaps(bitmaps)
    failures = correct.shape[0] - correct.sum(axis=0)
    return np.bincount(failures, minlength=correct.shape[0] + 1)


def offload_breakdown(local_correct, routed_local):
    """
    Accounting of the local/offload decision.

    Args:
        local_correct: bitmap of inputs the local model classifies correctly
        routed_local: bitmap of inputs the router kept local

    Returns:
        dict: fraction_local, local_accuracy, true_negative_rate (local-solvable
        inputs kept local), missed_local_fraction (local-solvable inputs
        offloaded, equal to (1 - TNR) * local_accuracy) and
        hard_offload_fraction (offloaded inputs the local model gets wrong)
    """
    local_correct = np.asarray(local_correct, dtype=bool)
    routed_local = np.asarray(routed_local, dtype=bool)
    if local_correct.shape != routed_local.shape or local_correct.size == 0:
        raise ShapeError("offload_breakdown: bitmaps must be non-empty and the same length")
    total = local_correct.size
    solvable = int(local_correct.sum())
    kept = int((local_correct & routed_local).sum())
    tnr = kept / solvable if solvable else 1.0
    local_accuracy = solvable / total
    return {
        "fraction_local": float(routed_local.mean()),
        "local_accuracy": local_accuracy,
        "true_negative_rate": tnr,
        "missed_local_fraction": float((local_correct & ~routed_local).mean()),
        "hard_offload_fraction": float((~local_correct & ~routed_local).mean()),
    }


# ============================================================================
# Scenario evaluation
# ============================================================================

@dataclass
class ScenarioReport:
    scenario: str
    accuracy: float
    expected_flops: float
    expected_latency_ms: float
    expected_energy_mj: float
    fraction_local: float
    called_fractions: dict
    true_negative_rate: float
    resource_saving_factor: float
    backbone_flops: float = 0.0
    mux_flops: float = 0.0
    local_model_accuracy: float = 0.0
    missed_local_fraction: float = 0.0
    hard_offload_fraction: float = 0.0
    latency_reduction: float = 0.0
    num_samples: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_row(self):
        """Flat CSV row; called fractions become `called.<id>` columns"""
        row = {k: v for k, v in self.to_dict().items() if k not in ("called_fractions", "notes")}
        for model_id, fraction in self.called_fractions.items():
            row[f"called.{model_id}"] = fraction
        return row


def reports_frame(reports):
    return pd.DataFrame([r.to_row() for r in reports])


def write_reports(reports, directory, stem="scenarios"):
    """<directory>/<stem>.json and <stem>.csv"""
    os.makedirs(directory, exist_ok=True)
    json_path = os.path.join(directory, f"{stem}.json")
    with open(json_path, "w") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2, sort_keys=True)
    csv_path = os.path.join(directory, f"{stem}.csv")
    reports_frame(reports).to_csv(csv_path, index=False)
    logger.info("wrote %d scenario reports to %s", len(reports), json_path)
    return json_path, csv_path


def model_probabilities(zoo, dataset, batch_size=EVAL_BATCH_SIZE):
    """Probabilities [B, N, C] of every model on every input"""
    probs = [frozen_probabilities(zoo, dataset.inputs[start:start + batch_size])
             for start in range(0, len(dataset), batch_size)]
    return np.concatenate(probs)


def model_embeddings(zoo, dataset, batch_size=EVAL_BATCH_SIZE):
    """
    Projected embeddings of every model on every input.

    Returns:
        tuple: (list of N arrays [B, S], present [N, B]); a sample whose
        projection vanished has a zero row and present False
    """
    embeddings = [[] for _ in zoo]
    for start in range(0, len(dataset), batch_size):
        _, parts = frozen_outputs(zoo, dataset.inputs[start:start + batch_size])
        for i, part in enumerate(parts):
            embeddings[i].append(part)
    embeddings = [np.concatenate(parts) for parts in embeddings]
    present = np.stack([embedding_present(e) for e in embeddings])
    missing = int((~present).sum())
    if missing:
        logger.warning("%d model/sample embeddings are zero vectors and are left out", missing)
    return embeddings, present


def correctness_bitmaps(probs, labels):
    """[N, B] booleans: model i classifies input b correctly"""
    return (np.argmax(probs, axis=-1) == np.asarray(labels)[:, None]).T


def _reference_latency(profile, scenario):
    if scenario.startswith("cloud_hybrid") or scenario == "oracle":
        return profile.cloud[profile.largest_index].latency_ms
    return cost_cloud_only(profile).latency_ms


def _build_report(scenario, accuracy, cost, called, selections, bitmaps, profile, backbone_flops, mux_flops, ids):
    routed_local = np.asarray([tuple(s) == (profile.local_index,) for s in selections])
    breakdown = offload_breakdown(bitmaps[profile.local_index], routed_local)
    reference = _reference_latency(profile, scenario)
    largest = profile.cloud[profile.largest_index].flops
    return ScenarioReport(
        scenario=scenario,
        accuracy=float(accuracy),
        expected_flops=float(cost.flops),
        expected_latency_ms=float(cost.latency_ms),
        expected_energy_mj=float(cost.energy_mj),
        fraction_local=breakdown["fraction_local"],
        called_fractions={model_id: float(f) for model_id, f in zip(ids, called)},
        true_negative_rate=breakdown["true_negative_rate"],
        resource_saving_factor=resource_saving_factor(largest, cost.flops) if cost.flops > 0 else 0.0,
        backbone_flops=float(backbone_flops),
        mux_flops=float(mux_flops),
        local_model_accuracy=breakdown["local_accuracy"],
        missed_local_fraction=breakdown["missed_local_fraction"],
        hard_offload_fraction=breakdown["hard_offload_fraction"],
        latency_reduction=1.0 - cost.latency_ms / reference if reference > 0 else 0.0,
        num_samples=len(selections),
    )


def evaluate_scenario(dataset, zoo, mux, policy, profile, scenario=None, bitmaps=None, batch_size=EVAL_BATCH_SIZE):
    """
    Route a dataset and price the result.

    Args:
        dataset: evaluation Dataset
        zoo: list of CostedModel
        mux: trained MuxNet (unused for mobile_only / cloud_only)
        policy: RoutePolicy
        profile: CostProfile in zoo order
        scenario: one of SCENARIOS minus 'oracle'; defaults from the policy mode
        bitmaps: precomputed correctness bitmaps [N, B] (computed when None)

    Returns:
        ScenarioReport
    """
    if len(dataset) == 0:
        raise ShapeError("evaluate_scenario: empty dataset")
    if scenario is None:
        scenario = {"single": "cloud_hybrid_single", "ensemble": "cloud_hybrid_ensemble",
                    "binary_offload": "hybrid"}[policy.mode]
    if scenario not in SCENARIOS or scenario == "oracle":
        raise ConfigError(f"unknown scenario {scenario!r}")
    ids = [c.id for c in zoo]
    if ids != list(profile.model_ids):
        raise ConfigError(f"cost profile models {profile.model_ids} do not match zoo {ids}")
    if bitmaps is None:
        probs = model_probabilities(zoo, dataset, batch_size)
        bitmaps = correctness_bitmaps(probs, dataset.labels)
    bitmaps = _as_bitmaps(bitmaps)
    n = len(zoo)
    flops = np.asarray([c.flops for c in zoo], dtype=np.float64)

    if scenario in ("mobile_only", "cloud_only"):
        index = profile.local_index if scenario == "mobile_only" else profile.cloud_index
        cost = cost_mobile_only(profile) if scenario == "mobile_only" else cost_cloud_only(profile)
        called = np.eye(n)[index]
        selections = [(index,)] * len(dataset)
        return _build_report(scenario, bitmaps[index].mean(), cost, called, selections, bitmaps, profile,
                             flops[index], 0.0, ids)

    router = Router(zoo, mux, policy)
    decisions = []
    for start in range(0, len(dataset), batch_size):
        decisions.extend(router.route_batch(dataset.inputs[start:start + batch_size]))
    selections = [d.selected for d in decisions]
    predictions = np.asarray([d.prediction for d in decisions])
    accuracy = np.mean(predictions == dataset.labels)
    called = np.asarray([sum(i in s for s in selections) for i in range(n)], dtype=np.float64) / len(selections)
    backbone = float(np.mean([flops[list(s)].sum() for s in selections]))

    if scenario == "hybrid":
        if n != 2:
            raise ConfigError(f"the hybrid scenario needs exactly two models, got {n}")
        fraction_local = float(np.mean([tuple(s) == (profile.local_index,) for s in selections]))
        cost = cost_hybrid(profile, fraction_local)
    elif scenario == "cloud_hybrid_single":
        cost = profile.mux_cloud + cost_cloud_hybrid(profile.cloud, called)
    else:
        cost = profile.mux_cloud + cost_cloud_hybrid_ensemble(profile.cloud, selections)

    report = _build_report(scenario, accuracy, cost, called, selections, bitmaps, profile,
                           backbone, router.mux_flops, ids)
    logger.debug("scenario %s: accuracy=%.4f flops=%.1f executions=%s",
                 scenario, report.accuracy, report.expected_flops, dict(router.executions))
    return report


def oracle_report(bitmaps, profile):
    """
    Routing with ground-truth correctness: each input goes to the cheapest
    model that classifies it correctly (the cheapest model overall when none does).
    """
    correct = _as_bitmaps(bitmaps)
    n, total = correct.shape
    cost_order = sorted(range(n), key=lambda i: (profile.cloud[i].flops, i))
    selections = []
    for b in range(total):
        solvers = [i for i in cost_order if correct[i, b]]
        selections.append((solvers[0] if solvers else cost_order[0],))
    called = np.asarray([sum(s == (i,) for s in selections) for i in range(n)], dtype=np.float64) / total
    cost = cost_cloud_hybrid(profile.cloud, called)
    return _build_report("oracle", correct.any(axis=0).mean(), cost, called, selections, correct, profile,
                         cost.flops, 0.0, list(profile.model_ids))


# ============================================================================
# Replay of the published cost tables
# ============================================================================

# Mobile/cloud table: mobile model, cloud model, 68% kept local. The
# component split of the cloud path (1.0 ms / 100 mJ up, 11.8 ms compute,
# 0.3 ms / 10 mJ down) is consistent with the published 13.1 ms / 110 mJ.
REFERENCE_MOBILE_CLOUD = {
    "mobile": Cost(299e6, 3.53, 12.0),
    "cloud": Cost(16.4e9, 11.8, 0.0),
    "mux": Cost(299e6, 3.53, 12.0),
    "upload": Cost(0.0, 1.0, 100.0),
    "download": Cost(0.0, 0.3, 10.0),
    "fraction_local": 0.68,
    "mobile_accuracy": 0.7188,
    "cloud_accuracy": 0.7939,
    "hybrid_accuracy": 0.804,
    "true_negative_rate": 0.966,
    "reported_hybrid": Cost(5.75e9, 10.12, 55.36),
}

# Cloud-API table: (id, FLOPs, latency ms, accuracy, called fraction)
REFERENCE_CLOUD_ZOO = [
    ("alexnet", 655e6, 6.8, 0.5655, 0.1056),
    ("mobilenet_v2", 299e6, 3.0, 0.7188, 0.1880),
    ("mnasnet1_0", 313e6, 5.5, 0.7345, 0.2180),
    ("resnet50", 4.08e9, 8.9, 0.7615, 0.1480),
    ("resnet152", 11.5e9, 11.3, 0.7831, 0.1580),
    ("resnext101_32x8d", 16.4e9, 11.8, 0.7931, 0.1824),
]
REFERENCE_CLOUD_HYBRID = {
    "single": {"flops": 5.75e9, "latency_ms": 7.73, "accuracy": 0.8386},
    "ensemble": {"flops": 7.12e9, "latency_ms": 8.15, "accuracy": 0.8554},
}


def reference_mobile_cloud_profile():
    ref = REFERENCE_MOBILE_CLOUD
    return CostProfile(
        model_ids=["mobile", "cloud"],
        mobile=[ref["mobile"], ref["cloud"]],
        cloud=[ref["mobile"], ref["cloud"]],
        mux_mobile=ref["mux"],
        mux_cloud=ref["mux"],
        upload=ref["upload"],
        download=ref["download"],
        local_index=0,
        cloud_index=1,
    )


def reference_cloud_profile():
    costs = [Cost(flops, latency, 0.0) for _, flops, latency, _, _ in REFERENCE_CLOUD_ZOO]
    return CostProfile(model_ids=[row[0] for row in REFERENCE_CLOUD_ZOO], mobile=list(costs), cloud=costs,
                       local_index=1)


def replay_reference_tables():
    """
    Recompute both published tables from their component costs.

    Returns:
        dict with 'mobile_cloud' and 'cloud_zoo' sections; every computed
        figure sits next to the published one
    """
    ref = REFERENCE_MOBILE_CLOUD
    profile = reference_mobile_cloud_profile()
    f_local = ref["fraction_local"]
    local, offload = cost_hybrid_local(profile), cost_hybrid_cloud(profile)
    hybrid = cost_hybrid(profile, f_local)
    identity = f_local * local.latency_ms + (1 - f_local) * offload.latency_ms
    missed = (1 - ref["true_negative_rate"]) * ref["mobile_accuracy"]
    mobile_cloud = {
        "mobile_only": cost_mobile_only(profile).to_dict(),
        "cloud_only": cost_cloud_only(profile).to_dict(),
        "hybrid_local": local.to_dict(),
        "hybrid_cloud": offload.to_dict(),
        "hybrid": hybrid.to_dict(),
        "reported_hybrid": ref["reported_hybrid"].to_dict(),
        "weighted_average_residual": abs(hybrid.latency_ms - identity),
        "fraction_local": f_local,
        "missed_local_fraction": missed,
        "hard_offload_fraction": (1 - f_local) - missed,
        "accuracy_gain_vs_mobile": ref["hybrid_accuracy"] - ref["mobile_accuracy"],
    }

    cloud = reference_cloud_profile()
    called = [row[4] for row in REFERENCE_CLOUD_ZOO]
    expected = cost_cloud_hybrid(cloud.cloud, called)
    reported = REFERENCE_CLOUD_HYBRID["single"]
    largest = cloud.cloud[cloud.largest_index]
    largest_accuracy = REFERENCE_CLOUD_ZOO[cloud.largest_index][3]
    discrepancy = (reported["flops"] - expected.flops) / reported["flops"]
    cloud_zoo = {
        "expected_flops_computed": expected.flops,
        "expected_flops_reported": reported["flops"],
        "relative_discrepancy": discrepancy,
        "discrepancy_note": (
            f"called fractions x FLOPs give {expected.flops / 1e9:.3f}G, the table prints "
            f"{reported['flops'] / 1e9:.2f}G ({discrepancy:.1%} apart); the mobile/cloud hybrid "
            f"row with a {ref['mux'].flops / 1e6:.0f}M multiplexer gives {hybrid.flops / 1e9:.2f}G"),
        "expected_latency_ms_computed": expected.latency_ms,
        "expected_latency_ms_reported": reported["latency_ms"],
        "largest_flops": largest.flops,
        "saving_factor_reported": resource_saving_factor(largest.flops, reported["flops"]),
        "saving_factor_computed": resource_saving_factor(largest.flops, expected.flops),
        "latency_reduction": 1 - reported["latency_ms"] / largest.latency_ms,
        "accuracy_gain_vs_largest": reported["accuracy"] - largest_accuracy,
        "ensemble_flops_increase": REFERENCE_CLOUD_HYBRID["ensemble"]["flops"] / reported["flops"] - 1,
        "ensemble_latency_increase": REFERENCE_CLOUD_HYBRID["ensemble"]["latency_ms"] / reported["latency_ms"] - 1,
    }
    logger.info("expected FLOPs replay: %s", cloud_zoo["discrepancy_note"])
    return {"mobile_cloud": mobile_cloud, "cloud_zoo": cloud_zoo}


def profile_cost_rows(name, profile, fraction_local=None, called=None):
    """Scenario cost rows for one profile (the `simulate` table)"""
    rows = [
        ("mobile_only", cost_mobile_only(profile)),
        ("cloud_only", cost_cloud_only(profile)),
        ("hybrid_local", cost_hybrid_local(profile)),
        ("hybrid_cloud", cost_hybrid_cloud(profile)),
    ]
    if fraction_local is not None:
        rows.append(("hybrid", cost_hybrid(profile, fraction_local)))
    if called is not None:
        rows.append(("cloud_hybrid_single", cost_cloud_hybrid(profile.cloud, called)))
    largest = profile.cloud[profile.largest_index].flops
    return [
        {"profile": name, "scenario": scenario, **cost.to_dict(),
         "resource_saving_factor": resource_saving_factor(largest, cost.flops) if cost.flops > 0 else 0.0}
        for scenario, cost in rows
    ]
