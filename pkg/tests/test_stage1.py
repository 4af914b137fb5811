import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sounding_loc.bank import SampleBank
from sounding_loc.errors import ConfigError, DomainError, EmptyMask, LocalizationCollapsed, ShapeError, StateError
from sounding_loc.models import AVModel
from sounding_loc.stage1 import (
    ObjectDictionary,
    Stage1Config,
    align_semantics,
    alternating_train,
    build_dictionary,
    derangement,
    extract_object_repr,
    kmeans,
    match_loss,
    mix_spectrograms,
    nmi,
)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_derangement_has_no_fixed_point(n, seed):
    p = derangement(n, torch.Generator().manual_seed(seed))
    assert sorted(p.tolist()) == list(range(n))
    assert all(p[i] != i for i in range(n))


def test_derangement_needs_two():
    with pytest.raises(ConfigError):
        derangement(1)


def test_match_loss_examples():
    perfect = match_loss(torch.tensor([1.0, 0.0]), torch.tensor([1, 0]))
    assert float(perfect) < 1e-6
    half = match_loss(torch.full((6,), 0.5, dtype=torch.float64), torch.tensor([1, 1, 1, 0, 0, 0]))
    assert abs(float(half) - math.log(2)) < 1e-12
    with pytest.raises(ConfigError):
        match_loss(torch.tensor([0.3]), torch.tensor([1]))


def test_match_loss_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.random(8)
        y = rng.integers(0, 2, 8)
        got = float(match_loss(torch.from_numpy(s), torch.from_numpy(y)))
        assert abs(got - oracles.bce(s.tolist(), y.tolist())) < 1e-12


def test_object_repr_full_and_single_cell():
    f = torch.randn(5, 3, 4, dtype=torch.float64)
    o, _ = extract_object_repr(f, torch.ones(3, 4, dtype=torch.float64), 0.5)
    assert torch.allclose(o, f.mean(dim=(1, 2)))
    l = torch.zeros(3, 4, dtype=torch.float64)
    l[1, 2] = 0.9
    o, mask = extract_object_repr(f, l, 0.5)
    assert torch.equal(o, f[:, 1, 2]) and int(mask.sum()) == 1


def test_object_repr_errors():
    with pytest.raises(EmptyMask):
        extract_object_repr(torch.randn(2, 3, 3), torch.zeros(3, 3), 0.5)
    with pytest.raises(ShapeError):
        extract_object_repr(torch.randn(2, 3, 3), torch.zeros(3, 4), 0.5)


def test_kmeans_errors():
    with pytest.raises(DomainError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(DomainError):
        kmeans(np.zeros(5), 2)


def test_kmeans_handles_all_identical_points():
    res = kmeans(np.ones((6, 3)), 3, seed=0, n_init=2)
    assert res.objective == 0.0 and len(set(res.labels.tolist())) >= 1


def test_dictionary_round_trip(tmp_path):
    X = np.random.default_rng(0).normal(size=(20, 4))
    d, res = build_dictionary(X, 3, seed=1, ids=[f"p{i}" for i in range(20)])
    d.semantic_alignment = np.array([2, 0, 1])
    d.save(tmp_path / "d.npz")
    back = ObjectDictionary.load(tmp_path / "d.npz")
    assert np.array_equal(back.keys, d.keys) and back.assignments == d.assignments
    assert back.objective == res.objective and back.semantic_alignment.tolist() == [2, 0, 1]
    assert back.one_hot("p0").sum() == 1 and back.labels_for(["p1", "p2"]).shape == (2,)
    with pytest.raises(StateError):
        ObjectDictionary.load(tmp_path / "none.npz")


def test_align_semantics_cases():
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    assert align_semantics(y, y).tolist() == [0, 1, 2, 3]
    sigma = np.array([2, 0, 3, 1])
    clusters = np.argsort(sigma)[y]  # cluster c holds class sigma[c]
    assert align_semantics(clusters, y).tolist() == sigma.tolist()


def test_align_semantics_surjective_with_surplus_clusters():
    rng = np.random.default_rng(3)
    for _ in range(20):
        y = rng.integers(0, 4, 64)
        y[:4] = np.arange(4)
        a = rng.integers(0, 8, 64)
        a[:8] = np.arange(8)
        m = align_semantics(a, y, K=8, num_classes=4)
        assert m.shape == (8,) and set(m.tolist()) == {0, 1, 2, 3}


def test_nmi_extremes():
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-12)


def test_mix_spectrograms_targets():
    gen = torch.Generator().manual_seed(0)
    specs = torch.randn(8, 201, 64)
    labels = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3])
    out, t = mix_spectrograms(specs, labels, 4, gen, 1.0, (1.0, 1.0))
    assert torch.allclose(t.sum(1), torch.ones(8))
    assert (t.max(1).values >= 0.5).all()
    # unit gains: log(exp(a) + exp(b))
    partner_sum = torch.logaddexp(specs[:, None], specs[None]).flatten(2)
    for i in range(8):
        assert any(torch.allclose(out[i].flatten(), partner_sum[i, j]) for j in range(8))
    same, t0 = mix_spectrograms(specs, labels, 4, gen, 0.0)
    assert torch.equal(same, specs) and torch.equal(t0, torch.nn.functional.one_hot(labels, 4).float())


def test_config_validation():
    for bad in (dict(K=1), dict(batch_size=1), dict(mask_threshold=0.0), dict(optimizer="rmsprop"),
                dict(alt_rounds=-1), dict(label_smoothing=1.0), dict(audio_mix_prob=2.0)):
        with pytest.raises(ConfigError):
            Stage1Config(**bad)


def _tiny_bank(n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    classes = [i % 4 for i in range(n)]
    frames = torch.rand(n, 3, 112, 112, generator=g) * 0.2
    specs = torch.randn(n, 201, 64, generator=g)
    for i, c in enumerate(classes):
        frames[i, c % 3, 20 * c : 20 * c + 30, 10:60] = 1.0
        specs[i, :, 10 * c + 5] += 6.0
    return SampleBank([f"s{i}" for i in range(n)], specs, frames, classes, [None] * n, [1] * n)


def _tiny_cfg(**kw):
    base = dict(K=4, alt_rounds=1, loc_epochs=1, cls_max_epochs=2, cls_patience=1, head_fit_steps=5,
                kmeans_restarts=2, batch_size=4, lr=1e-3)
    base.update(kw)
    return Stage1Config(**base)


def test_alternating_schedule_and_log(tmp_path):
    torch.set_num_threads(1)
    bank = _tiny_bank()
    resets = []
    model = AVModel(4)
    orig = model.reset_classifiers

    def spy():
        before = [p.detach().clone() for p in model.audio_cls.parameters()]
        orig()
        after = list(model.audio_cls.parameters())
        resets.append(any(not torch.equal(a, b) for a, b in zip(before, after)))

    model.reset_classifiers = spy
    res = alternating_train(bank, _tiny_cfg(alt_rounds=2), model=model, log_path=tmp_path / "log.jsonl")
    # two classification phases plus the final head fit, each with fresh heads
    assert resets == [True, True, True]
    phases = [r["phase"] for r in res.log]
    assert phases.count("kmeans") == 3
    kmeans_rounds = [r["round"] for r in res.log if r["phase"] == "kmeans"]
    assert kmeans_rounds == [0, 1, 2]
    on_disk = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert on_disk == res.log
    assert res.dictionary.K == 4 and res.nmi is not None
    assert res.dictionary.semantic_alignment is not None


def test_zero_rounds_still_builds_dictionary():
    res = alternating_train(_tiny_bank(), _tiny_cfg(alt_rounds=0))
    assert [r["phase"] for r in res.log].count("kmeans") == 1
    assert [r["phase"] for r in res.log].count("cls") == 0
    assert res.dictionary.keys.shape == (4, 64)


def test_collapsed_localization_aborts():
    model = AVModel(4, head_init=(1.0, -50.0))
    with pytest.raises(LocalizationCollapsed):
        alternating_train(_tiny_bank(), _tiny_cfg(alt_rounds=0, loc_epochs=0), model=model)


def test_rejects_cocktails_in_stage1():
    bank = _tiny_bank()
    bank.source_counts[0] = 2
    with pytest.raises(DomainError):
        alternating_train(bank, _tiny_cfg())
