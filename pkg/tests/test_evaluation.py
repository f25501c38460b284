"""Tolerance table, sweeps, transfer consistency, and report exports."""

import math

import numpy as np
import pytest

from skelattack import attack, data, evaluation, models

from tests.helpers import brute_distance_sum


def tiny_model(in_dim, seed=0):
    return models.create_model("tcn", in_dim, seed=seed, hidden_layers=2, channels=8)


# tolerance table -------------------------------------------------------------

def test_default_tolerances():
    table = evaluation.DEFAULT_TOLERANCES
    assert table["handshaking"] == 79.52
    assert table["punching"] == 52.04
    assert table["kicking"] == 93.17
    assert table["departing"] == 71.77
    assert table["pushing"] == 22.77


def test_resolve_kappa_exact_entry():
    assert evaluation.resolve_kappa(evaluation.DEFAULT_TOLERANCES, "punching") == 52.04


def test_resolve_kappa_missing_label_uses_mean():
    # mean of the five surveyed tolerances
    expected = (79.52 + 52.04 + 93.17 + 71.77 + 22.77) / 5
    assert expected == pytest.approx(63.854)
    assert evaluation.resolve_kappa(evaluation.DEFAULT_TOLERANCES, "hugging") \
        == pytest.approx(expected)


def test_resolve_kappa_single_entry_table():
    assert evaluation.resolve_kappa({"pushing": 22.77}, "kicking") == 22.77


def test_resolve_kappa_empty_table():
    with pytest.raises(evaluation.EvaluationError, match="empty"):
        evaluation.resolve_kappa({}, "kicking")


# distance sum ----------------------------------------------------------------

def test_distance_sum_matches_bruteforce():
    rng = np.random.default_rng(2)
    out = rng.normal(size=(7, 9))
    tgt = rng.normal(size=(7, 9))
    assert attack.distance_sum(out, tgt) == pytest.approx(
        brute_distance_sum(out, tgt), rel=1e-12)


# objectives ------------------------------------------------------------------

@pytest.fixture(scope="module")
def bench():
    records = data.synth_generate(seed=13, n_per_category=2, frames=8, joints=3)
    held = {"s03s04", "s05s02"}
    split = data.split_by_sets(records, held)
    inputs = [r.actor for r in data.held_out_records(records, held)]
    in_dim = inputs[0].flat().shape[1]
    model = tiny_model(in_dim, seed=1)
    model, _ = models.train(model, split, models.TrainConfig(epochs=60, lr=0.002))
    return records, held, inputs, model


def test_make_objectives_prefers_held_out(bench):
    records, held, _, _ = bench
    objectives = evaluation.make_objectives(records, list(data.CATEGORIES),
                                            evaluation.DEFAULT_TOLERANCES,
                                            seed=5, prefer_ids=held)
    held_cats = {r.category for r in records if r.set_id in held}
    by_label = {o.label: o for o in objectives}
    assert set(by_label) == set(data.CATEGORIES)
    for label, objective in by_label.items():
        assert objective.kappa == evaluation.resolve_kappa(
            evaluation.DEFAULT_TOLERANCES, label)
        if label in held_cats:
            sources = [r for r in records if r.set_id in held and r.category == label]
            assert any(np.array_equal(objective.target.joints, r.reactor.joints)
                       for r in sources)


def test_make_objectives_unknown_category(bench):
    records = bench[0]
    with pytest.raises(evaluation.EvaluationError, match="no records"):
        evaluation.make_objectives(records, ["flying"], {"flying": 1.0})


def test_fit_target_length():
    seq = data.SkeletonSequence(np.arange(24.0).reshape(4, 2, 3))
    shorter = evaluation.fit_target_length(seq, 2)
    assert shorter.num_frames == 2
    assert np.array_equal(shorter.joints, seq.joints[:2])
    longer = evaluation.fit_target_length(seq, 6)
    assert longer.num_frames == 6
    assert np.array_equal(longer.joints[4], seq.joints[3])
    assert np.array_equal(longer.joints[5], seq.joints[3])


def test_derive_kappa_is_percentile(bench):
    records, held, inputs, model = bench
    objective = evaluation.make_objectives(records, ["punching"],
                                           evaluation.DEFAULT_TOLERANCES, seed=1)[0]
    sums = evaluation.natural_sums(model, inputs, objective)
    assert evaluation.derive_kappa(model, inputs, objective, 25.0) \
        == pytest.approx(float(np.percentile(sums, 25.0)))


# sweeps ----------------------------------------------------------------------

def sweep_fixture(bench, kappa):
    records, held, inputs, model = bench
    objectives = [evaluation.Objective("punching",
                                       records[6].reactor.copy(), kappa)]
    cfg = attack.AttackConfig(steps=8)
    return evaluation.whitebox_sweep(model, "tcn:test", inputs, objectives,
                                     epsilon_grid=[0.15, 0.45], base_cfg=cfg), model


def test_sweep_infinite_kappa_rate_one(bench):
    report, _ = sweep_fixture(bench, math.inf)
    for cell in report.cells:
        assert cell.rate == 1.0
    assert report.mean_rate(0.15) == 1.0


def test_sweep_single_cell_shape(bench):
    records, held, inputs, model = bench
    objectives = [evaluation.Objective("kicking", records[4].reactor.copy(), 5.0)]
    report = evaluation.whitebox_sweep(model, "m", inputs[:1], objectives,
                                       epsilon_grid=[0.3],
                                       base_cfg=attack.AttackConfig(steps=5))
    assert len(report.cells) == 1
    cell = report.cells[0]
    assert len(cell.flags) == 1 and len(cell.sums) == 1
    assert cell.epsilon == 0.3 and cell.objective == "kicking"


def test_sweep_requires_inputs(bench):
    records, held, inputs, model = bench
    with pytest.raises(evaluation.EvaluationError, match="no test inputs"):
        evaluation.whitebox_sweep(model, "m", [], [], epsilon_grid=[0.3])


def test_sweep_flags_recomputable_from_stored_sequences(bench):
    # the criterion must be recoverable from the artifacts alone
    report, model = sweep_fixture(bench, 6.0)
    for cell in report.cells:
        for flag, total, adv in zip(cell.flags, cell.sums, cell.adversarial):
            target = evaluation.fit_target_length(
                report.objectives[0].target, adv.shape[0])
            recomputed = attack.distance_sum(model.predict_flat(adv), target.flat())
            assert recomputed == pytest.approx(total, rel=1e-12)
            assert flag == (recomputed < cell.kappa)


def test_rate_permutation_invariant(bench):
    report, _ = sweep_fixture(bench, 6.0)
    cell = report.cells[0]
    rate = cell.rate
    rng = np.random.default_rng(0)
    order = rng.permutation(len(cell.flags))
    shuffled = evaluation.CellResult(
        objective=cell.objective, epsilon=cell.epsilon, kappa=cell.kappa,
        flags=[cell.flags[i] for i in order], sums=[cell.sums[i] for i in order],
        adversarial=[cell.adversarial[i] for i in order])
    assert shuffled.rate == rate


# transfer --------------------------------------------------------------------

def test_transfer_identity_reproduces_whitebox_flags(bench):
    report, model = sweep_fixture(bench, 6.0)
    entry = evaluation.blackbox_transfer(report, model, "tcn:test")
    assert entry.source_id == "tcn:test" and entry.receiver_id == "tcn:test"
    for wb, tr in zip(report.cells, entry.cells):
        assert wb.flags == tr.flags
        assert wb.sums == pytest.approx(tr.sums, rel=0, abs=0)


def test_transfer_zero_output_receiver(bench):
    records, held, inputs, model = bench
    report, _ = sweep_fixture(bench, 6.0)
    receiver = tiny_model(inputs[0].flat().shape[1], seed=9)
    receiver.params["head_w"] = np.zeros_like(receiver.params["head_w"])
    receiver.params["head_b"] = np.zeros_like(receiver.params["head_b"])
    entry = evaluation.blackbox_transfer(report, receiver, "zero")
    for cell in entry.cells:
        target = evaluation.fit_target_length(report.objectives[0].target,
                                              cell.adversarial[0].shape[0])
        norm_sum = float(np.sum(np.linalg.norm(target.flat(), axis=1)))
        for flag in cell.flags:
            assert flag == (norm_sum < cell.kappa)


def test_transfer_dimension_mismatch(bench):
    report, _ = sweep_fixture(bench, 6.0)
    receiver = tiny_model(12, seed=3)  # different joint count
    with pytest.raises(models.ModelError, match="input"):
        evaluation.blackbox_transfer(report, receiver, "other")


# persistence -----------------------------------------------------------------

def test_csv_and_sweep_round_trip(bench, tmp_path):
    report, _ = sweep_fixture(bench, 6.0)
    csv_path = tmp_path / "report.csv"
    evaluation.write_csv(evaluation.report_rows(report), csv_path)
    text = csv_path.read_text(encoding="utf-8").splitlines()
    assert text[0] == "model,objective,epsilon,successes,samples,rate"
    assert len(text) == 1 + len(report.cells)

    sweep_path = tmp_path / "sweep.json"
    evaluation.save_sweep(report, sweep_path)
    loaded = evaluation.load_sweep(sweep_path)
    assert loaded.model_id == report.model_id
    assert loaded.epsilon_grid == report.epsilon_grid
    for a, b in zip(report.cells, loaded.cells):
        assert a.flags == b.flags
        assert a.sums == pytest.approx(b.sums, rel=0, abs=0)
        for x, y in zip(a.adversarial, b.adversarial):
            assert np.array_equal(x, y)
