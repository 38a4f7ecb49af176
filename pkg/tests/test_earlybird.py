import itertools
from fractions import Fraction
from math import floor
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gentickets.data import make_dataset
from gentickets.earlybird import (ChannelGroup, ChannelMask, EBConfig, MaskHistory, apply_channel_mask,
                                  channel_groups, channel_mask, compress, detect_eb, mask_distance,
                                  run_earlybird, training_ledger)
from gentickets.errors import ContractError, UnsupportedArchitectureError
from gentickets.flops import FlopLedger, count_flops, pass_cost
from gentickets.models import ModelConfig, TrainSettings, build_model
from gentickets.nn import Conv2d, Linear, Sequential
from gentickets.tensor import Tensor

from helpers import ToyNet

BN_FAMILIES = ["dcgan", "wgan", "resnet_gan", "conv_ae", "vae", "beta_vae", "resnet_vae"]


def _toy(gammas):
    """ToyNet with one batchnorm scale vector per layer plus plain groups."""
    net = ToyNet({f"{k}.weight": v for k, v in gammas.items()})
    groups = [ChannelGroup(bns=[k], size=len(v)) for k, v in gammas.items()]
    return net, groups


def _pruned(mask):
    return {k: [i for i, b in enumerate(v) if not b] for k, v in mask.entries.items()}


def test_worked_example_with_channel_floor():
    net, groups = _toy({"a.bn1": [2.0, 2.0], "a.bn2": [0.1, 0.2]})
    m = channel_mask(net, 0.5, groups)
    # 0.1 goes first; 0.2 would empty its layer, so the cut spills to the first 2.0
    assert _pruned(m) == {"a.bn1": [0], "a.bn2": [0]}


def test_single_cut_is_global_argmin():
    net, groups = _toy({"a.bn1": [0.5, 0.4, 0.9], "b.bn1": [0.3, 0.05, 0.7], "b.bn2": [1.0, 0.2]})
    m = channel_mask(net, 1 / 8, groups)
    assert _pruned(m) == {"a.bn1": [], "b.bn1": [1], "b.bn2": []}


def test_equal_gammas_follow_tie_rule():
    net, groups = _toy({"b.bn": [1.0] * 3, "a.bn": [1.0] * 3})
    m = channel_mask(net, 0.5, groups)
    assert _pruned(m) == {"a.bn": [0, 1], "b.bn": [0]}
    assert m == channel_mask(net, 0.5, groups)


def _brute_force(gammas, r):
    """Lexicographically smallest feasible cut, by enumeration."""
    units = sorted((abs(g), name, i) for name, v in gammas.items() for i, g in enumerate(v))
    # the floor caps how many cuts are possible at all
    target = min(int(Fraction(str(r)) * len(units)), sum(len(v) - 1 for v in gammas.values()))
    best = None
    for combo in itertools.combinations(range(len(units)), target):
        cut = [units[j] for j in combo]
        left = {k: len(v) for k, v in gammas.items()}
        for _, name, _ in cut:
            left[name] -= 1
        if min(left.values()) < 1:
            continue
        key = sorted(cut)
        if best is None or key < best:
            best = key
    out = {k: [] for k in gammas}
    for _, name, i in best or []:
        out[name].append(i)
    return {k: sorted(v) for k, v in out.items()}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(1, 6), min_size=1, max_size=4), min_size=1, max_size=3),
       st.sampled_from([0.2, 0.25, 0.4, 0.5, 0.6, 0.75]))
def test_channel_mask_matches_enumeration(values, r):
    gammas = {f"a.bn{i}": [v / 4 for v in vs] for i, vs in enumerate(values)}
    net, groups = _toy(gammas)
    m = channel_mask(net, r, groups)
    assert _pruned(m) == _brute_force(gammas, r)
    assert all(v.sum() >= 1 for v in m.entries.values())


@pytest.mark.parametrize("family", ["dcgan", "resnet_gan", "resnet_vae"])
def test_real_mask_ratio_and_floor(family):
    net = build_model(ModelConfig(family, base_channels=4), 0)
    rng = np.random.default_rng(1)
    for n, p in net.named_parameters():
        if p.kind.value == "bn_scale":
            p.data[...] = rng.standard_normal(p.shape)
    groups = channel_groups(net)
    m = channel_mask(net, 0.5, groups)
    total = sum(g.size * len(g.bns) for g in groups)
    pruned = sum(int((v == 0).sum()) for v in m.entries.values())
    assert abs(Fraction(pruned, total) - Fraction(1, 2)) <= Fraction(max(len(g.bns) for g in groups), total)
    assert all(v.sum() >= 1 for v in m.entries.values())
    for g in groups:
        assert all(np.array_equal(m.entries[b], m.entries[g.bns[0]]) for b in g.bns)


def test_no_batchnorm_is_unsupported():
    with pytest.raises(UnsupportedArchitectureError):
        channel_mask(build_model(ModelConfig("linear_ae"), 0), 0.5)
    # the spectrally normalized discriminator has no batchnorm; only generator channels rank
    sn = channel_groups(build_model(ModelConfig("sngan", base_channels=4), 0))
    assert all(b.startswith("a.") for g in sn for b in g.bns)


def test_ratio_bounds():
    net, groups = _toy({"a.bn": [1.0, 2.0]})
    for r in (0, 1, 1.2):
        with pytest.raises(ContractError):
            channel_mask(net, r, groups)


def test_per_component_pooling_splits_the_cut():
    gammas = {"a.bn1": [5.0, 6.0, 7.0, 8.0], "b.bn1": [0.1, 0.2, 0.3, 0.4]}
    net, groups = _toy(gammas)
    # one global scale: the small b-side gammas take the cut until the floor spills it
    assert _pruned(channel_mask(net, 0.5, groups)) == {"a.bn1": [0], "b.bn1": [0, 1, 2]}
    assert _pruned(channel_mask(net, 0.5, groups, "per_component")) == {"a.bn1": [0, 1], "b.bn1": [0, 1]}
    with pytest.raises(ContractError):
        channel_mask(net, 0.5, groups, "by_layer")
    with pytest.raises(ContractError):
        EBConfig(pooling="by_layer")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(1, 6), min_size=1, max_size=4), min_size=1, max_size=2),
       st.lists(st.lists(st.integers(1, 6), min_size=1, max_size=4), min_size=1, max_size=2),
       st.sampled_from([0.25, 0.5, 0.75]))
def test_per_component_matches_enumeration_inside_each_component(a_layers, b_layers, r):
    gammas = {f"a.bn{i}": v for i, v in enumerate(a_layers)}
    gammas.update({f"b.bn{i}": v for i, v in enumerate(b_layers)})
    net, groups = _toy(gammas)
    m = channel_mask(net, r, groups, "per_component")
    total = sum(len(v) for v in gammas.values())
    pruned = sum(int((v == 0).sum()) for v in m.entries.values())
    room = sum(len(v) - 1 for v in gammas.values())
    assert pruned <= floor(Fraction(str(r)) * total)
    assert pruned >= min(floor(Fraction(str(r)) * total), room) - 2
    for comp in "ab":
        part = {k: v for k, v in gammas.items() if k.startswith(comp)}
        n = sum(len(v) for v in part.values())
        want_r = Fraction(sum(1 for k in part for b in m.entries[k] if b == 0), n)
        got = {k: v for k, v in _pruned(m).items() if k.startswith(comp)}
        if want_r:
            assert got == _brute_force(part, want_r)


# ---------------------------------------------------------------- distance and detection

def _cm(bits, split=None):
    bits = list(bits)
    if split is None:
        return ChannelMask({"a.bn": bits}, 0.5)
    return ChannelMask({"a.bn": bits[:split], "b.bn": bits[split:]}, 0.5)


def test_distance_examples():
    assert mask_distance(_cm([1, 0, 1, 0]), _cm([1, 0, 1, 0])) == 0
    assert mask_distance(_cm([1, 0, 1, 0]), _cm([0, 1, 0, 1])) == 1
    assert mask_distance(_cm([1, 0, 1, 0]), _cm([1, 0, 0, 0])) == Fraction(1, 4)


def test_distance_structure_mismatch():
    with pytest.raises(ContractError):
        mask_distance(_cm([1, 0, 1, 0]), _cm([1, 0, 1, 0], split=2))
    with pytest.raises(ContractError):
        mask_distance(_cm([1, 0]), _cm([1, 0, 1]))


bitstrings = st.lists(st.integers(0, 1), min_size=6, max_size=6)


@settings(max_examples=200, deadline=None)
@given(bitstrings, bitstrings, bitstrings)
def test_distance_is_a_metric(a, b, c):
    a, b, c = _cm(a, 2), _cm(b, 2), _cm(c, 2)
    assert mask_distance(a, a) == 0
    assert mask_distance(a, b) == mask_distance(b, a)
    assert mask_distance(a, c) <= mask_distance(a, b) + mask_distance(b, c)
    assert isinstance(mask_distance(a, b), Fraction)


def _run_detector(masks, cfg):
    h = MaskHistory(cfg.lookback)
    for e, m in enumerate(masks):
        h.push(e, m)
        v = detect_eb(h, cfg)
        if v.found:
            return e
    return None


def _prefix(k, n=100):
    return _cm([1] * k + [0] * (n - k))


# consecutive distances 0.3, 0.2, 0.09, 0.05, 0.04, 0.03, 0.02, 0.01, 0, 0
PREFIX_COUNTS = [0, 30, 50, 59, 64, 68, 71, 73, 74, 74, 74]


def test_worked_trace_fifo_max():
    masks = [_prefix(k) for k in PREFIX_COUNTS]
    # newest-vs-oldest spans four steps: epoch 8 has 74 - 64 = 0.10 (not < 0.1), epoch 9 has 0.06
    assert _run_detector(masks, EBConfig(delta=0.1, lookback=5)) == 9


def test_worked_trace_consecutive():
    masks = [_prefix(k) for k in PREFIX_COUNTS]
    # window epochs 2..6 holds steps 0.09, 0.05, 0.04, 0.03
    assert _run_detector(masks, EBConfig(delta=0.1, lookback=5, aggregation="consecutive")) == 6


def _hand_verdicts(masks, delta, lookback):
    """Per-epoch verdicts straight from the window rule."""
    n = len(masks[0].entries["a.bn"])
    out = []
    for e in range(len(masks)):
        if e + 1 < lookback:
            out.append(False)
            continue
        newest = masks[e].entries["a.bn"]
        worst = 0
        for j in range(e - lookback + 1, e):
            worst = max(worst, int((newest != masks[j].entries["a.bn"]).sum()))
        out.append(Fraction(worst, n) < Fraction(str(delta)))
    return out


@pytest.mark.parametrize("case", range(50))
def test_detection_matches_hand_simulation(case):
    rng = np.random.default_rng(case)
    n, lookback = int(rng.integers(8, 40)), int(rng.integers(1, 7))
    delta = float(rng.choice([0.05, 0.1, 0.2, 0.3]))
    bits = rng.integers(0, 2, n)
    masks = []
    for e in range(int(rng.integers(3, 15))):
        flips = rng.random(n) < max(0.0, 0.4 - 0.05 * e)
        bits = np.where(flips, 1 - bits, bits)
        masks.append(_cm(bits))
    want = _hand_verdicts(masks, delta, lookback)
    cfg = EBConfig(delta=delta, lookback=lookback)
    h = MaskHistory(lookback)
    got = []
    for e, m in enumerate(masks):
        h.push(e, m)
        got.append(detect_eb(h, cfg).found)
    assert got == want


def test_identical_window_detects_and_far_pair_blocks():
    cfg = EBConfig(delta=0.1, lookback=3)
    same = [_cm([1, 0, 1, 0])] * 3
    assert _run_detector(same, cfg) == 2
    blocked = [_cm([1, 1, 0, 0]), _cm([1, 0, 1, 0]), _cm([1, 0, 1, 0])]
    assert _run_detector(blocked, cfg) is None


@settings(max_examples=100, deadline=None)
@given(st.lists(bitstrings, min_size=1, max_size=12), st.integers(1, 5),
       st.sampled_from([0.1, 0.2, 0.4]), st.sampled_from([0.2, 0.5, 1.0]))
def test_detection_monotone_in_delta(seq, lookback, d1, d2):
    lo, hi = min(d1, d2), max(d1, d2)
    masks = [_cm(b) for b in seq]
    e_lo = _run_detector(masks, EBConfig(delta=lo, lookback=lookback))
    e_hi = _run_detector(masks, EBConfig(delta=hi, lookback=lookback))
    if e_lo is not None:
        assert e_hi is not None and e_hi <= e_lo


def test_vacuous_delta_detects_when_window_fills():
    masks = [_cm([1, 0, 0, e % 2]) for e in range(6)]
    assert _run_detector(masks, EBConfig(delta=1.0, lookback=5)) == 4


def test_history_contract():
    h = MaskHistory(2)
    h.push(1, _cm([1, 0]))
    with pytest.raises(ContractError):
        h.push(1, _cm([1, 0]))
    h.push(2, _cm([1, 0]))
    h.push(5, _cm([1, 1]))
    assert len(h) == 2 and h.epochs == [2, 5]
    with pytest.raises(ContractError):
        detect_eb(MaskHistory(3), EBConfig())
    for bad in (dict(delta=0.0), dict(delta=1.5), dict(lookback=0), dict(aggregation="mean")):
        with pytest.raises(ContractError):
            EBConfig(**bad)


# ---------------------------------------------------------------- compression

def _randomize(net, rng):
    for n, p in net.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * (0.5 if p.kind.value != "bn_scale" else 1.0)
    for n, buf in net.named_buffers():
        if n.endswith("running_mean"):
            buf[...] = rng.standard_normal(buf.shape)
        elif n.endswith("running_var"):
            buf[...] = rng.random(buf.shape) + 0.5


def _outputs(net, inputs, training):
    net.train(training)
    return [net.component(w)(Tensor(x)).data for w, x in inputs]


@pytest.mark.parametrize("family", BN_FAMILIES)
@pytest.mark.parametrize("training", [True, False])
def test_compressed_forward_matches_masked_oracle(family, training):
    rng = np.random.default_rng(7)
    net = build_model(ModelConfig(family, base_channels=4, latent_dim=6), 0)
    _randomize(net, rng)
    m = channel_mask(net, 0.5)
    oracle, small = apply_channel_mask(net, m), compress(net, m)
    assert small.num_parameters() < net.num_parameters()
    for _ in range(10):
        inputs = [(w, rng.standard_normal((3,) + net.input_shape(w))) for w in "ab"]
        for want, got in zip(_outputs(oracle, inputs, training), _outputs(small, inputs, training)):
            assert np.max(np.abs(want - got)) < 1e-10


@pytest.mark.parametrize("family", ["dcgan", "resnet_vae"])
def test_all_ones_compression_is_identity(family):
    net = build_model(ModelConfig(family, base_channels=4), 0)
    _randomize(net, np.random.default_rng(0))
    ones = ChannelMask({b: np.ones(g.size) for g in channel_groups(net) for b in g.bns}, 0.5)
    small = compress(net, ones)
    x = np.random.default_rng(1).standard_normal((2,) + net.input_shape("b"))
    a, b = net.b(Tensor(x)).data, small.b(Tensor(x)).data
    assert a.tobytes() == b.tobytes()
    assert small.state_dict().keys() == net.state_dict().keys()


def test_half_of_one_layer_count_arithmetic():
    cfg = ModelConfig("dcgan", base_channels=4, latent_dim=6)
    net = build_model(cfg, 0)
    groups = channel_groups(net)
    entries = {b: np.ones(g.size) for g in groups for b in g.bns}
    target = "a.bn1"  # output of a.up1 (ConvT 8 -> 4), input to a.up2 (ConvT 4 -> 1)
    entries[target] = np.array([1, 0, 1, 0])
    small = compress(net, ChannelMask(entries, 0.5))
    p, q = net.parameters(), small.parameters()
    assert q["a.up1.weight"].shape == (8, 2, 4, 4)
    assert q["a.up2.weight"].shape == (2, 1, 4, 4)
    assert q["a.bn1.weight"].shape == (2,)
    removed = net.num_parameters() - small.num_parameters()
    assert removed == 8 * 2 * 16 + 2 * 1 * 16 + 2 * 2


def test_flatten_consumer_slices_spatial_blocks():
    net = build_model(ModelConfig("dcgan", base_channels=4), 0)
    last = max((g for g in channel_groups(net) if g.bns[0].startswith("b.")), key=lambda g: g.bns[0])
    entries = {b: np.ones(g.size) for g in channel_groups(net) for b in g.bns}
    entries[last.bns[0]] = np.r_[0, np.ones(last.size - 1)]
    small = compress(net, ChannelMask(entries, 0.5))
    assert small.parameters()["b.fc.weight"].shape[1] == net.parameters()["b.fc.weight"].shape[1] - 16


def test_compress_rejects_foreign_mask():
    net = build_model(ModelConfig("dcgan", base_channels=4), 0)
    with pytest.raises(ContractError):
        compress(net, ChannelMask({"a.bn0": [1, 0]}, 0.5))


# ---------------------------------------------------------------- FLOPs

def test_linear_and_conv_flop_examples():
    assert count_flops(Linear(8, 4), 1, backward=False, in_shape=(8,)).forward == 64
    led = count_flops(Conv2d(1, 1, 3), 1, backward=False, in_shape=(1, 6, 6))
    assert led.forward == 2 * 1 * 1 * 9 * 16


def test_backward_is_twice_forward_and_mixed_halves_bytes():
    seq = Sequential([("c", Conv2d(2, 3, 3, 1, 1)), ("l", Linear(3, 2))])
    shape_c = (2, 5, 5)
    full = count_flops(seq.layers[0][1], 4, in_shape=shape_c)
    mixed = count_flops(seq.layers[0][1], 4, in_shape=shape_c, precision="mixed")
    assert full.backward == 2 * full.forward
    assert mixed.forward == full.forward and mixed.bytes_moved * 2 == full.bytes_moved


def test_compressed_interior_flops_near_quarter():
    net = build_model(ModelConfig("dcgan", base_channels=8), 0)
    groups = channel_groups(net)
    entries = {b: (np.arange(g.size) % 2 == 0).astype(int) for g in groups for b in g.bns}
    small = compress(net, ChannelMask(entries, 0.5))
    # a.up1 consumes a.bn0 and produces a.bn1: both halved
    layer = lambda n: dict(n.a.layers)["up1"]
    f0 = layer(net).flops((net.config.base_channels * 2, 4, 4))
    f1 = layer(small).flops((net.config.base_channels, 4, 4))
    assert f1 == f0 // 4


def test_ledger_is_additive():
    net = build_model(ModelConfig("dcgan", base_channels=4), 0)
    led = training_ledger(net, 3, 8)
    fa, _ = pass_cost(net.a, net.input_shape("a"))
    fb, _ = pass_cost(net.b, net.input_shape("b"))
    per_step = fa * 8 + 2 * fb * 8 + 2 * (2 * fb * 8) + (fa * 8 + fb * 8) * 3
    assert led.total == 3 * per_step
    assert led.forward >= 0 and led.backward >= 0 and led.pruning == 0


# ---------------------------------------------------------------- end to end

@pytest.fixture(scope="module")
def small_ds():
    return make_dataset("shapes16", n_train=64, n_test=16, seed=0)


def _eb_cfg(**eb):
    return SimpleNamespace(model=ModelConfig("dcgan", base_channels=4, latent_dim=8), eb=EBConfig(**eb),
                           epochs=8, train=TrainSettings(batch_size=16))


def test_vacuous_delta_detects_at_lookback(small_ds):
    rep = run_earlybird(_eb_cfg(delta=1.0, lookback=3, ratio=0.5), 0, small_ds)
    assert rep.detection_epoch == 3 and rep.found
    assert rep.weights < rep.dense_weights
    assert rep.ledger.total < rep.dense_ledger.total and rep.flop_savings > 0
    assert rep.ledger.pruning > 0


def test_tiny_ratio_compression_is_cheap(small_ds):
    rep = run_earlybird(_eb_cfg(delta=0.5, lookback=2, ratio=0.01), 0, small_ds)
    assert rep.found and rep.detection_epoch <= 3
    assert rep.weights == rep.dense_weights


def test_no_detection_is_a_report(small_ds):
    cfg = _eb_cfg(delta=1e-9, lookback=20, ratio=0.5)
    rep = run_earlybird(cfg, 0, small_ds)
    assert not rep.found and rep.detection_epoch is None and rep.mask is None
    assert rep.flop_savings == pytest.approx(-rep.ledger.pruning / rep.dense_ledger.total)
