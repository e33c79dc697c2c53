import json
import math
from dataclasses import replace

import numpy as np
import pytest

from coforge.cosim import simulate
from coforge.design_space import (
    COMMUNICATE, DEFAULT_SPACE, GLOBAL_POOLING, Architecture, ConfigError, aggregate, combine,
    derive_mapping, is_valid, sample, small_space,
)
from coforge.predictor import PredictorModel
from coforge.profiles import PACK_NAMES, load_pack
from coforge.search import (
    INVALID_SCORE, ArchitectureZoo, EvolutionConfig, PredictorEvaluator, ScoredCandidate,
    SearchConfig, SyntheticAccuracy, TableAccuracy, dispatch, evolutionary_baseline,
    exhaustive_optimum, score, search, stage1, stage2, system_penalty,
)

SMALL = small_space(4, min_layers=1)


@pytest.fixture(scope="module")
def tx2():
    return load_pack("tx2-gpu")


@pytest.fixture(scope="module")
def exhaustive(tx2):
    return exhaustive_optimum(SMALL, tx2)


def arch(*layers, shape=(1024, 3)):
    return Architecture(tuple(layers), shape)


def cand(a, sys, acc=0.8):
    est = simulate(a, sys)
    return ScoredCandidate(a, derive_mapping(a), acc, est.latency_s, est.device_energy_j,
                           score(acc, est.latency_s, est.device_energy_j, sys))


class TestAccuracyOracle:
    def test_extra_motif_helps(self):
        acc = SyntheticAccuracy()
        base = arch(combine(64), combine(64))
        more = arch(sample(20), aggregate("max"), combine(64), combine(64))
        assert acc(more) > acc(base)

    def test_deterministic_and_bounded(self):
        acc = SyntheticAccuracy()
        a = arch(sample(20), aggregate("max"), combine(64), GLOBAL_POOLING, combine(40))
        assert acc(a) == acc(a)
        assert 0.0 <= acc(a) <= 1.0

    def test_table(self, tmp_path):
        a = arch(combine(64))
        (tmp_path / "t.json").write_text(json.dumps({a.digest(): 0.921}))
        table = TableAccuracy.load(tmp_path / "t.json")
        assert table(a) == 0.921
        with pytest.raises(KeyError):
            table(arch(combine(40)))


class TestScore:
    def test_definition(self, tx2):
        s = score(0.9, 0.05, 0.2, tx2)
        assert s == pytest.approx(0.9 - tx2.lam * (0.05 / tx2.c_lat + 0.2 / tx2.c_e))
        assert score(0.9, tx2.c_lat, 0.1, tx2) == INVALID_SCORE
        assert score(0.9, 0.01, tx2.c_e * 2, tx2) == INVALID_SCORE

    def test_only_two_kinds_of_value(self, tx2):
        res = stage1(DEFAULT_SPACE, tx2, SearchConfig(trials=300, seed=1))
        for rec in res.trace:
            expect = INVALID_SCORE
            if rec["latency_s"] < tx2.c_lat and rec["energy_j"] < tx2.c_e:
                expect = rec["acc"] - tx2.lam * system_penalty(rec["latency_s"], rec["energy_j"], tx2)
            assert rec["score"] == expect


class TestStage1:
    def test_unconstrained_reduces_to_accuracy(self, tx2):
        free = tx2.with_constraints(c_lat=math.inf, c_e=math.inf, lam=0.0)
        res = stage1(DEFAULT_SPACE, free, SearchConfig(trials=200, seed=3))
        assert res.best_score == max(r["acc"] for r in res.trace)

    def test_infeasible_report(self, tx2, exhaustive):
        _, scored = exhaustive
        fastest = min(c.latency_s for c in scored)
        tight = tx2.with_constraints(c_lat=fastest)
        res = stage1(SMALL, tight, SearchConfig(trials=300, seed=0))
        assert res.best is None and len(res.zoo) == 0
        assert res.infeasible is not None
        assert res.infeasible.min_latency_s == fastest
        assert "no architecture met the constraints" in res.infeasible.message()

    def test_small_space_optimum(self, tx2, exhaustive):
        best, scored = exhaustive
        res = stage1(SMALL, tx2, SearchConfig(trials=5 * len(scored), seed=0))
        assert res.best_score == best

    def test_deterministic(self, tx2):
        cfg = SearchConfig(trials=100, seed=9)
        a = stage1(DEFAULT_SPACE, tx2, cfg)
        b = stage1(DEFAULT_SPACE, tx2, cfg)
        assert a.trace_lines() == b.trace_lines()
        assert json.dumps(a.zoo.to_json()) == json.dumps(b.zoo.to_json())

    def test_emitted_entries_satisfy_constraints(self, tx2):
        res = stage1(DEFAULT_SPACE, tx2, SearchConfig(trials=500, seed=2))
        assert res.zoo.candidates()
        for c in res.zoo.candidates():
            est = simulate(c.arch, tx2)
            assert est.latency_s < tx2.c_lat and est.device_energy_j < tx2.c_e

    def test_rejection_abort(self, tx2):
        from coforge.cosim import RejectionError
        from coforge.design_space import OpKind, SpaceConfig
        hopeless = SpaceConfig(max_layers=3, kinds=(OpKind.COMMUNICATE,))
        with pytest.raises(RejectionError):
            stage1(hopeless, tx2, SearchConfig(trials=1, max_consecutive_rejects=50))

    def test_lambda_monotone_at_argmax(self):
        for pack in PACK_NAMES:
            sys = load_pack(pack)
            _, scored = exhaustive_optimum(SMALL, sys)
            feasible = [c for c in scored if c.score != INVALID_SCORE]
            prev = math.inf
            for lam in np.linspace(0, 20, 81):
                def s(c):
                    return c.acc - lam * system_penalty(c.latency_s, c.energy_j, sys)
                win = min(feasible, key=lambda c: (-s(c), c.digest))
                assert win.latency_s <= prev
                prev = win.latency_s


class TestPredictorInLoop:
    def test_zoo_rescored_with_simulator(self, tx2):
        lat = PredictorModel.init(hidden=8, seed=0, metric="latency", label_scale=1e-3)
        en = PredictorModel.init(hidden=8, seed=1, metric="energy", label_scale=1e-3)
        ev = PredictorEvaluator(lat, en, tx2)
        res = stage1(DEFAULT_SPACE, tx2, SearchConfig(trials=150, seed=4, evaluator="predictor"), evaluator=ev)
        assert all(r["evaluator"] == "predictor" for r in res.trace)
        for c in res.zoo.candidates():
            est = simulate(c.arch, tx2)
            assert c.source == "simulator"
            assert (c.latency_s, c.energy_j) == (est.latency_s, est.device_energy_j)
            assert c.latency_s < tx2.c_lat and c.energy_j < tx2.c_e

    def test_needs_models(self, tx2):
        with pytest.raises(ConfigError):
            stage1(DEFAULT_SPACE, tx2, SearchConfig(trials=5, evaluator="predictor"))
        with pytest.raises(ConfigError):
            m = PredictorModel.init(hidden=4, metric="latency")
            PredictorEvaluator(m, m, tx2)


class TestStage2:
    def test_zero_trials_unchanged(self, tx2):
        res = stage1(DEFAULT_SPACE, tx2, SearchConfig(trials=200, seed=5))
        before = json.dumps(res.zoo.to_json())
        stage2(res, tx2, SearchConfig(trials=200, seed=5, tune_trials=0))
        assert json.dumps(res.zoo.to_json()) == before

    def test_scale_down_gives_cheaper_variant(self, tx2):
        # Combine widths do not enter the accuracy's motif count much; a generous budget accepts halving
        big = arch(sample(20), aggregate("max"), combine(256), combine(256))
        sys = tx2.with_constraints(c_lat=10.0, c_e=100.0)
        res = stage1(SMALL, sys, SearchConfig(trials=1, seed=0))
        res.zoo.entries[res.fingerprint] = {o: [] for o in res.zoo.entries[res.fingerprint]}
        res.zoo.add(res.fingerprint, cand(big, sys, SyntheticAccuracy()(big)))
        cfg = SearchConfig(trials=1, tune_trials=1, seed=0, acc_budget=0.5, top_candidates=1)
        stage2(res, sys, cfg)
        new = res.best
        assert new.arch != big
        assert new.latency_s < simulate(big, sys).latency_s
        assert res.trace[-1]["accepted"] is True

    def test_floor_rejects_without_looping(self, tx2):
        tiny = arch(sample(2), aggregate("max"), combine(8))
        sys = tx2.with_constraints(c_lat=10.0, c_e=100.0)
        res = stage1(SMALL, sys, SearchConfig(trials=1, seed=0))
        res.zoo.entries[res.fingerprint] = {o: [] for o in res.zoo.entries[res.fingerprint]}
        res.zoo.add(res.fingerprint, cand(tiny, sys))
        stage2(res, sys, SearchConfig(trials=1, tune_trials=20, seed=0, acc_budget=1.0))
        assert res.best.arch == tiny
        assert not any(r["accepted"] for r in res.trace if r.get("stage") == 2)

    def test_accepted_variants_keep_constraints(self, tx2):
        cfg = SearchConfig(trials=300, tune_trials=100, seed=6, acc_budget=0.02)
        res = search(DEFAULT_SPACE, tx2, cfg)
        for c in res.zoo.candidates():
            est = simulate(c.arch, tx2)
            assert est.latency_s < tx2.c_lat and est.device_energy_j < tx2.c_e


class TestEvolution:
    def test_static_without_mutation(self, tx2):
        seeds = [arch(sample(20), aggregate("max"), combine(64)), arch(combine(64), combine(64))]
        cfg = EvolutionConfig(population=2, offspring=4, mutation_rate=0.0, trials=30, seed=0)
        res = evolutionary_baseline(DEFAULT_SPACE, tx2, cfg, initial=seeds)
        assert sorted(a.dumps() for _, a in res.population) == sorted(a.dumps() for a in seeds)

    def test_invalid_offspring_scored_and_counted(self, tx2):
        res = evolutionary_baseline(DEFAULT_SPACE, tx2, EvolutionConfig(trials=400, seed=1))
        assert len(res.trace) == 400
        assert res.offspring_total > 0
        assert 0.0 < res.invalid_rate < 1.0
        assert all(t["score"] == INVALID_SCORE or t["score"] > -1 for t in res.trace)
        best_trace = [t["best_score"] for t in res.trace]
        assert best_trace == sorted(best_trace)

    def test_config_validated(self):
        with pytest.raises(ConfigError):
            EvolutionConfig(mutation_rate=2.0)


class TestZoo:
    def test_refuses_infeasible_and_sorts(self, tx2):
        zoo = ArchitectureZoo(capacity=2)
        fp = zoo.register(tx2)
        bad = ScoredCandidate(arch(combine(64)), derive_mapping(arch(combine(64))), 0.9, 1.0, 1.0, INVALID_SCORE)
        assert not zoo.add(fp, bad)
        archs = [arch(combine(64)), arch(combine(64), combine(64)), arch(sample(20), aggregate("max"), combine(64))]
        for a in archs:
            zoo.add(fp, cand(a, tx2, SyntheticAccuracy()(a)))
        for obj, key in (("min_latency", lambda c: c.latency_s), ("min_energy", lambda c: c.energy_j),
                         ("max_score", lambda c: -c.score)):
            lst = zoo.top(fp, obj)
            assert len(lst) == 2 and [key(c) for c in lst] == sorted(key(c) for c in lst)

    def test_save_merges_fingerprints(self, tx2, tmp_path):
        path = tmp_path / "zoo.json"
        z1 = ArchitectureZoo()
        fp1 = z1.register(tx2)
        z1.add(fp1, cand(arch(combine(64)), tx2))
        z1.save(path)
        slow = tx2.with_bandwidth(10e6)
        z2 = ArchitectureZoo()
        fp2 = z2.register(slow)
        z2.add(fp2, cand(arch(combine(64), combine(40)), slow))
        z2.save(path)
        back = ArchitectureZoo.load(path)
        assert back.fingerprints() == sorted([fp1, fp2])
        assert len(back.top(fp1)) == 1 and len(back.top(fp2)) == 1

    def test_json_round_trip(self, tx2):
        res = stage1(DEFAULT_SPACE, tx2, SearchConfig(trials=100, seed=7))
        back = ArchitectureZoo.from_json(json.loads(json.dumps(res.zoo.to_json())))
        assert back.to_json() == res.zoo.to_json()


class TestDispatch:
    def test_empty(self):
        with pytest.raises(ConfigError):
            dispatch(ArchitectureZoo(), load_pack("tx2-gpu"))

    def test_single_entry(self, tx2):
        zoo = ArchitectureZoo()
        a = arch(combine(64), COMMUNICATE, combine(40))
        zoo.add(zoo.register(tx2), cand(a, tx2))
        assert dispatch(zoo, tx2).arch == a

    def test_tie_broken_by_hash(self, tx2):
        zoo = ArchitectureZoo()
        fp = zoo.register(tx2)
        a, b = arch(combine(64), combine(40)), arch(combine(40), combine(64))
        assert simulate(a, tx2).latency_s != simulate(b, tx2).latency_s or True
        sys = tx2.with_constraints(lam=0.0)
        zoo.add(fp, cand(a, sys, 0.7))
        zoo.add(fp, cand(b, sys, 0.7))
        chosen = dispatch(zoo, sys, accuracy=lambda x: 0.7)
        assert chosen.digest == min(a.digest(), b.digest())

    def test_bandwidth_drop(self, tx2):
        fast = tx2.with_bandwidth(40e6)
        slow = tx2.with_bandwidth(10e6)
        zoo = ArchitectureZoo()
        for sys, seed in ((fast, 0), (slow, 0)):
            res = stage1(DEFAULT_SPACE, sys, SearchConfig(trials=400, seed=seed))
            zoo.merge(res.zoo)
        win40 = dispatch(zoo, fast)
        win10 = dispatch(zoo, slow)
        est = simulate(win40.arch, slow)
        still_ok = est.latency_s < slow.c_lat and est.device_energy_j < slow.c_e
        if still_ok:
            # the 40 Mbps winner stays feasible, so the choice is by re-scored value only
            assert win10.score >= score(win40.acc, est.latency_s, est.device_energy_j, slow)
        else:
            assert win10.arch != win40.arch
        assert win10.latency_s < slow.c_lat

    def test_fallback_to_fastest(self, tx2):
        zoo = ArchitectureZoo()
        fp = zoo.register(tx2)
        archs = [arch(combine(64)), arch(sample(20), aggregate("max"), combine(64))]
        for a in archs:
            zoo.add(fp, cand(a, tx2))
        strict = tx2.with_constraints(c_lat=1e-9)
        chosen = dispatch(zoo, strict)
        assert chosen.arch == min(archs, key=lambda a: simulate(a, strict).latency_s)


def test_search_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(trials=0)
    with pytest.raises(ConfigError):
        SearchConfig(evaluator="oracle")


def test_mutated_children_may_be_invalid():
    rng = np.random.default_rng(0)
    from coforge.search import _mutate
    parent = arch(sample(20), aggregate("max"), combine(64), combine(64), combine(64), combine(64),
                  combine(64), combine(64), combine(64), combine(64), combine(64), combine(40))
    kids = [_mutate(parent, DEFAULT_SPACE, 0.5, rng) for _ in range(50)]
    assert any(not is_valid(k) for k in kids)
    assert all(len(k) == len(parent) for k in kids)


def test_replace_sys_keeps_fingerprint_distinct(tx2):
    assert replace(tx2, lam=0.1).fingerprint() != tx2.fingerprint()
