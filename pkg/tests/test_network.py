import numpy as np
import pytest

from flowwarp import network
from flowwarp.core import ContractError, FormatError, read_flo, write_flo, write_image
from flowwarp.gradcheck import check_network
from flowwarp.graph import Tape
from flowwarp.losses import LossReport
from flowwarp.synthdata import SpriteScene, generate
from flowwarp.warp import warp_backward


@pytest.fixture(scope="module")
def seq():
    return generate(SpriteScene(3, motion="affine"), 10)


@pytest.fixture(scope="module")
def state():
    return network.init_state(0)


@pytest.fixture(scope="module")
def perturbed(state):
    return network.perturb_state(state, 1, scale=0.05)


def _fwd(st, seq, t=5, prev=None):
    return network.forward(st, (seq.exemplar_layout, seq.exemplar), seq.layouts[t], prev)


def test_identity_initialisation(state, seq):
    out = _fwd(state, seq)
    assert np.array_equal(out.theta, network.tps.lattice())
    assert np.all(out.flow_fine == 0)
    assert np.max(np.abs(out.flow_final)) <= 1e-8 * np.hypot(64, 64)
    assert np.max(np.abs(out.warped_fine - seq.exemplar)) < 1e-12


def test_shape_contract(state, seq):
    cfg = state.config
    assert (cfg.levels, cfg.base_channels, cfg.size, cfg.smallest) == (3, 8, 64, 16)
    tape = Tape(record=False)
    _, nodes = network.build(tape, state, seq.exemplar_layout, seq.exemplar, seq.layouts[4],
                             np.zeros((64, 64, 2)))
    assert nodes["correlation"].value.shape == (16, 16, 256)
    out = _fwd(state, seq)
    assert out.flow_final.shape == (64, 64, 2) and out.warped_fine.shape == (64, 64, 3)
    assert out.theta.shape == (9, 2)


def test_output_invariants(perturbed, seq):
    prev = seq.exemplar_flows[4]
    out = _fwd(perturbed, seq, 5, prev)
    assert np.any(out.flow_fine != 0)
    assert np.array_equal(out.flow_final, out.flow_coarse + out.flow_fine)
    assert np.array_equal(out.warped_fine, warp_backward(seq.exemplar, out.flow_final))
    assert np.array_equal(out.warped_coarse, warp_backward(seq.exemplar, out.flow_coarse))


def test_zero_fine_head_is_pure_tps(perturbed, seq):
    st = perturbed.copy()
    st.params["fine.conv2.w"][:] = 0
    st.params["fine.conv2.b"][:] = 0
    out = _fwd(st, seq)
    assert np.any(out.flow_coarse != 0)
    assert np.array_equal(out.warped_fine, out.warped_coarse)


def test_deterministic(perturbed, seq):
    a = network.init_state(7)
    b = network.init_state(7)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    o1, o2 = _fwd(perturbed, seq), _fwd(perturbed, seq)
    assert np.array_equal(o1.flow_final, o2.flow_final)
    assert np.array_equal(o1.warped_fine, o2.warped_fine)


def test_dim_mismatch(state, seq):
    with pytest.raises(ContractError):
        network.forward(state, (seq.exemplar_layout, seq.exemplar), seq.layouts[1][:32])
    with pytest.raises(ContractError):
        network.forward(state, (seq.exemplar_layout, seq.exemplar[..., :1]), seq.layouts[1])
    with pytest.raises(ContractError):
        network.FpnConfig(levels=1)


def test_lr_zero_leaves_state_unchanged(perturbed, seq):
    sample = network.make_sample(seq, 3, {t: seq.exemplar_flows[t] for t in range(3)})
    new, report, _ = network.train_step(perturbed, sample, network.Adam(lr=0.0))
    assert all(np.array_equal(new.params[k], perturbed.params[k]) for k in perturbed.params)
    assert report.l_ftc > 0
    assert LossReport.from_json(report.to_json()) == report


def test_nan_aborts_with_diagnostics(state, seq):
    bad = state.copy()
    bad.params["fine.conv2.b"][:] = np.nan
    with pytest.raises(network.TrainingError, match="non-finite"):
        network.train_step(bad, network.make_sample(seq, 1), network.Adam())


@pytest.mark.parametrize("seed", [0, 1])
def test_network_gradient_finite_differences(seed):
    r = check_network(seed)
    assert r.checked == 10 and r.max_rel_error < 1e-3, r


def test_single_sample_overfit(seq):
    sample = network.make_sample(seq, 9)
    st = network.init_state(0)
    opt = network.Adam()
    first = None
    for _ in range(300):
        st, report, _ = network.train_step(st, sample, opt)
        first = first if first is not None else report.l_rec_fine
    final = network.objective(st, sample, record=False)[0].l_rec_fine
    assert final < 0.25 * first


def test_make_sample_and_order(seq):
    cache = {t: np.full((64, 64, 2), float(t)) for t in range(9)}
    s = network.make_sample(seq, 9, cache)
    assert sorted(s.history) == [1, 3, 9] and sorted(s.optical) == [1, 3, 9]
    assert np.array_equal(s.prev_flow, cache[8])
    s0 = network.make_sample(seq, 0, cache)
    assert s0.history == {} and np.all(s0.prev_flow == 0)
    order = network.training_order([seq, seq], 5)
    assert order == [(0, 0), (1, 0), (0, 1), (1, 1), (0, 2)]


def test_run_sequence(perturbed, seq, tmp_path):
    one = network.run_sequence(perturbed, (seq.exemplar_layout, seq.exemplar), seq.layouts[2:3])
    assert len(one) == 1
    assert np.array_equal(one[0].flow_final, _fwd(perturbed, seq, 2).flow_final)
    outs = network.run_sequence(perturbed, (seq.exemplar_layout, seq.exemplar), seq.layouts[:3])
    chained = _fwd(perturbed, seq, 1, outs[0].flow_final)
    assert np.array_equal(outs[1].flow_final, chained.flow_final)
    for t, o in enumerate(outs):
        write_flo(o.flow_final, tmp_path / f"{t}.flo")
        write_image(np.clip(o.warped_fine, 0, 1), tmp_path / f"{t}.png")
        assert read_flo(tmp_path / f"{t}.flo").vectors.shape == (64, 64, 2)
    with pytest.raises(ContractError):
        network.run_sequence(perturbed, (seq.exemplar_layout, seq.exemplar), [])


def test_model_file_round_trip(perturbed, tmp_path):
    p = tmp_path / "m.bin"
    network.save_state(perturbed, p)
    back = network.load_state(p)
    assert back.config == perturbed.config
    assert list(back.params) == list(perturbed.params)
    assert all(back.params[k].tobytes() == perturbed.params[k].tobytes() for k in back.params)
    raw = p.read_bytes()
    assert raw[:4] == b"C2FW"
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        network.load_state(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-100])
    with pytest.raises(OSError):
        network.load_state(tmp_path / "short.bin")


def test_refresh_history_uses_current_parameters(perturbed, seq):
    cache = {t: np.full((64, 64, 2), 9.0) for t in range(9)}
    network.refresh_history(perturbed, seq, 9, cache)
    inputs = (seq.exemplar_layout, seq.exemplar)
    assert np.array_equal(cache[0], network.forward(perturbed, inputs, seq.layouts[0]).flow_final)
    for s in (6, 8):
        expected = network.forward(perturbed, inputs, seq.layouts[s], np.full((64, 64, 2), 9.0))
        assert np.array_equal(cache[s], expected.flow_final)
    assert np.all(cache[1] == 9.0)
