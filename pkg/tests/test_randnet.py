import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from densecat import randnet
from densecat.cost import count_macs, count_params, estimate_peak_memory
from densecat.graph import GraphError, config_hash, deserialize_architecture, serialize_architecture
from densecat.randnet import (Budget, BudgetError, RandNetConfig, RandSpec, build_randnet_block,
                              default_space, load_spaces, member_train_config, read_runs_csv,
                              run_paired_experiment, sample_network, sample_pair)
from densecat.train import DatasetHandle, TrainConfig, load_dataset

TINY = RandSpec("A", depth=(2, 3), widths=(8, 16), growth_rates=(8, 16), kernels=(1, 3),
                activations=("relu",), norms=("batch", "layer"), block_kinds=("PreNorm", "PostNorm"),
                stem_stride=1, input_size=8, num_classes=3)
LOOSE = Budget(10**9, 10**12, 10**12)


# -- blocks ---------------------------------------------------------------------------------


def test_block_channel_examples():
    g = build_randnet_block("PostNormNoAct", "add", 32, 3, "relu", "batch")
    assert g.channels()[g.output] == 32
    g = build_randnet_block("PreNorm", "concat", 16, 3, "gelu", "layer", c_in=32)
    assert g.channels()[g.output] == 48


def test_postnorm_variants_differ_by_one_activation():
    a = json.loads(serialize_architecture(build_randnet_block("PostNorm", "add", 8, 3, "silu", "batch")))
    b = json.loads(serialize_architecture(build_randnet_block("PostNormNoAct", "add", 8, 3, "silu", "batch")))
    extra = [n for n in a["nodes"] if n not in b["nodes"]]
    assert len(a["nodes"]) == len(b["nodes"]) + 1
    assert len(extra) == 1 and extra[0]["kind"] == "act"


def test_block_orders():
    pre = [n.kind for n in build_randnet_block("PreNorm", "add", 8, 3, "relu", "batch").nodes]
    post = [n.kind for n in build_randnet_block("PostNorm", "add", 8, 3, "relu", "batch").nodes]
    assert pre == ["batch_norm", "act", "conv", "drop_path", "add"]
    assert post == ["conv", "batch_norm", "drop_path", "add", "act"]


def test_add_width_mismatch_is_an_error():
    with pytest.raises(GraphError, match="add shortcut"):
        build_randnet_block("PreNorm", "add", 16, 3, "relu", "batch", c_in=8)


# -- spaces and specs --------------------------------------------------------------------------


def test_default_spaces_document():
    doc = load_spaces()
    assert doc["schema"] == "densecat.randspace/1"
    for sid in "ABCDE":
        spec, budget = default_space(sid)
        assert spec.space_id == sid and budget.max_params > 0
    assert default_space("D")[0].augment and default_space("E")[0].optimizer == "adamw"
    assert not default_space("C")[0].augment


@pytest.mark.parametrize("kwargs,needle", [
    (dict(space_id="D"), "augmentation"),
    (dict(space_id="E", augment={"mixup_alpha": [0.1]}), "adamw"),
    (dict(space_id="A", depth=(5, 2)), "empty"),
    (dict(space_id="A", kernels=(2,)), "kernels"),
    (dict(space_id="A", widths=()), "widths"),
])
def test_spec_invariants(kwargs, needle):
    with pytest.raises(ValueError, match=needle):
        RandSpec(**kwargs)


def test_spec_and_config_json_round_trip():
    spec = default_space("E")[0]
    assert RandSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
    cfg = sample_network(TINY, "concat", LOOSE, 4)
    assert RandNetConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


# -- sampling ----------------------------------------------------------------------------------


def test_same_seed_same_hash():
    a = sample_network(TINY, "concat", LOOSE, 11)
    b = sample_network(TINY, "concat", LOOSE, 11)
    assert config_hash(a.build()) == config_hash(b.build())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pairs_share_choices_and_fit_the_budget(seed):
    budget = Budget(3000, 200_000, 40_000)
    pair = sample_pair(TINY, budget, seed)
    a, c = pair["add"].to_json(), pair["concat"].to_json()
    for key in ("depth", "kernel", "activation", "norm", "block_kind", "width", "augment"):
        assert a[key] == c[key]
    for cfg in pair.values():
        # recost from the stored JSON alone
        g = deserialize_architecture(serialize_architecture(RandNetConfig.from_json(cfg.to_json()).build()))
        shape = cfg.input_shape()
        assert count_params(g) <= budget.max_params
        assert count_macs(g, shape) <= budget.max_macs
        assert estimate_peak_memory(g, shape) <= budget.max_activation_bytes


def enumerate_space(spec, budget):
    """Every discrete draw, with whether both variants fit and their costs."""
    rows = []
    depths = range(spec.depth[0], spec.depth[1] + 1)
    for d, w, gr, k, act, nrm, kind in itertools.product(
            depths, spec.widths, spec.growth_rates, spec.kernels, spec.activations, spec.norms,
            spec.block_kinds):
        choice = dict(depth=d, width=w, growth_rate=gr, kernel=k, activation=act, norm=nrm,
                      block_kind=kind, augment={})
        costs = {s: randnet.costs_of(randnet.variant(spec, choice, s), budget) for s in ("add", "concat")}
        ok = all(not budget.violations(c) for c in costs.values())
        rows.append((choice, ok, costs["concat"]["max_params"]))
    return rows


def test_sampler_matches_brute_force_enumeration():
    all_rows = enumerate_space(TINY, LOOSE)
    cap = int(np.median([p for _, _, p in all_rows]))
    budget = Budget(cap, 10**12, 10**12)
    rows = enumerate_space(TINY, budget)
    accepted = [r for r in rows if r[1]]
    rate = len(accepted) / len(rows)
    assert 0.2 < rate < 0.8

    stats = {}
    keys = [json.dumps(r[0], sort_keys=True) for r in accepted]
    counts = dict.fromkeys(keys, 0)
    params = []
    n = 1000
    for seed in range(n):
        pair = sample_pair(TINY, budget, seed, stats)
        c = pair["concat"].to_json()
        key = json.dumps({k: c[k] for k in accepted[0][0]}, sort_keys=True)
        counts[key] += 1
        params.append(count_params(pair["concat"].build()))
    # acceptance rate: tries ~ negative binomial with mean n / rate
    observed = n / stats["tries"]
    sd = np.sqrt(rate * rate * (1 - rate) / n)
    assert abs(observed - rate) < 4 * sd + 1e-9
    # accepted draws are uniform over the accepted part of the space
    assert chisquare(list(counts.values())).pvalue > 1e-3
    # cost distribution: mean parameter count of accepted concat nets
    expect = np.mean([p for _, ok, p in rows if ok])
    spread = np.std([p for _, ok, p in rows if ok])
    assert abs(np.mean(params) - expect) < 4 * spread / np.sqrt(n)


def test_unsatisfiable_budget_names_tightest_cap(monkeypatch):
    monkeypatch.setattr(randnet, "MAX_TRIES", 30)
    with pytest.raises(BudgetError) as info:
        sample_network(TINY, "add", Budget(10, 10**12, 10**12), 0)
    assert info.value.cap == "max_params" and info.value.limit == 10 and info.value.tries == 30
    assert "max_params" in str(info.value)


def test_budget_must_be_positive():
    with pytest.raises(ValueError, match="positive"):
        Budget(0, 1, 1)


def test_derived_seeds_are_distinct_and_stable():
    seeds = {randnet.derive_seed(0, p, k) for p in range(20) for k in ("arch", "add", "concat")}
    assert len(seeds) == 60
    assert randnet.derive_seed(3, 1, "add") == randnet.derive_seed(3, 1, "add")


def test_augmented_space_draws_once_per_pair():
    spec, budget = default_space("D")
    pair = sample_pair(spec, budget, 5)
    assert pair["add"].augment == pair["concat"].augment
    assert set(pair["add"].augment) == set(spec.augment)
    tc = member_train_config(spec, TrainConfig.desk(), pair["concat"], 9)
    for key, value in pair["concat"].augment.items():
        assert getattr(tc, key) == value
    assert tc.seed == 9 and tc.optimizer == spec.optimizer


# -- paired experiments ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    h = DatasetHandle(n=64, classes=3, dim=8, seed=2)
    return load_dataset(h), load_dataset(h.with_split("test"))


def tiny_train():
    return TrainConfig.desk(epochs=2, warmup_epochs=0, batch_size=32)


def test_single_pair_gives_two_records(tiny_data):
    res = run_paired_experiment(TINY, LOOSE, 1, tiny_train(), *tiny_data, master_seed=3, workers=1)
    assert [(r.pair_id, r.shortcut) for r in res.records] == [(0, "add"), (0, "concat")]
    assert all(r.status == "ok" and len(r.curve) == 2 for r in res.records)


def test_summary_matches_recomputation_from_csv(tiny_data, tmp_path):
    res = run_paired_experiment(TINY, LOOSE, 3, tiny_train(), *tiny_data, master_seed=1, workers=1)
    res.write(tmp_path)
    rows = read_runs_csv((tmp_path / "runs.csv").read_text())
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(rows) == 6
    for kind in ("add", "concat"):
        accs = [float(r["final_acc"]) for r in rows if r["shortcut"] == kind and r["status"] == "ok"]
        assert summary["kinds"][kind]["count"] == len(accs) == 3
        assert summary["kinds"][kind]["mean"] == pytest.approx(sum(accs) / len(accs), abs=1e-12)
    cdf = (tmp_path / "cdf.csv").read_text().splitlines()
    assert cdf[0] == "shortcut,rank,final_acc,cum_prob" and len(cdf) == 7


def test_results_do_not_depend_on_worker_count(tiny_data):
    a = run_paired_experiment(TINY, LOOSE, 2, tiny_train(), *tiny_data, master_seed=7, workers=1)
    b = run_paired_experiment(TINY, LOOSE, 2, tiny_train(), *tiny_data, master_seed=7, workers=2)
    assert a.runs_csv() == b.runs_csv()
    assert a.summary == b.summary


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_runs_are_excluded_and_counted(tiny_data):
    spec = RandSpec(**{**TINY.to_json(), "base_lr": 1e12})
    res = run_paired_experiment(spec, LOOSE, 1, tiny_train(), *tiny_data, workers=1)
    s = res.summary["kinds"]
    assert s["add"]["failures"] + s["concat"]["failures"] >= 1
    failed = [r for r in res.records if r.status == "failed"]
    assert all(r.final_acc is None for r in failed)
    assert len(res.records) == 2


def test_sign_test_statistics():
    recs = []
    for pid, (a, c) in enumerate([(0.5, 0.6), (0.5, 0.4), (0.5, 0.7), (0.3, 0.3)]):
        for kind, acc in (("add", a), ("concat", c)):
            recs.append(randnet.RunRecord(pid, kind, 0, 1, 1, acc, 1, "ok", "h"))
    s = randnet.summarize(recs, 4, 0, "A")["paired"]
    assert (s["concat_wins"], s["add_wins"], s["ties"], s["complete_pairs"]) == (2, 1, 1, 4)
    assert s["sign_test_p"] == pytest.approx(0.5)


def test_unsatisfiable_slots_are_skipped_without_bias(monkeypatch):
    monkeypatch.setattr(randnet, "MAX_TRIES", 2)
    budget = Budget(1500, 10**12, 10**12)
    tasks, skipped = randnet.plan_pairs(TINY, budget, 12, master_seed=4)
    assert skipped and len(tasks) == 24
    assert [t["pair_id"] for t in tasks] == [i // 2 for i in range(24)]
    slots = sorted({t["slot"] for t in tasks})
    assert not set(slots) & set(skipped)
    assert sorted(slots + skipped) == list(range(len(slots) + len(skipped)))
    # each planned pair is exactly what its own slot seed samples
    for t in tasks[::2]:
        pair = sample_pair(TINY, budget, randnet.derive_seed(4, t["slot"], "arch"))
        assert pair["add"].to_json() == t["config"]
    assert randnet.plan_pairs(TINY, budget, 12, master_seed=4) == (tasks, skipped)


def test_too_many_skipped_slots_raise(monkeypatch):
    monkeypatch.setattr(randnet, "MAX_TRIES", 5)
    with pytest.raises(BudgetError):
        randnet.plan_pairs(TINY, Budget(10, 10**12, 10**12), 3, master_seed=0)
