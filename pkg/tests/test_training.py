import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import small_model_config
from orcast.errors import ConfigError, InputError, NumericalError
from orcast.geo_grid import GridSpec
from orcast.net import content_hash, init_parameters
from orcast.training import (
    Normalizer,
    PatchSampler,
    StageConfig,
    TrainingData,
    batch_loss,
    build_stage_targets,
    check_stage_order,
    collate,
    magnitude_weights,
    run_curriculum,
    train_stage,
    weighted_masked_mse,
    write_loss_history,
)


def quick(stage, **kw):
    return StageConfig.default(stage, **{"epochs": 1, "patches_per_epoch": 8, "batch_size": 4, **kw})


# ---- stage configs


def test_stage_defaults():
    s1, s2, s3 = (StageConfig.default(s) for s in ("S1", "S2", "S3"))
    assert (s1.learning_rate, s1.weight_decay) == (1e-3, 1e-3)
    assert s2.learning_rate == s3.learning_rate == 1e-4
    assert (s1.epochs, s2.epochs, s3.epochs) == (50, 20, 10)
    assert s1.patches_per_epoch == 1000 and s1.batch_size == 8
    assert s1.steps_per_epoch == 125
    with pytest.raises(ConfigError):
        StageConfig("S4")
    with pytest.raises(ConfigError):
        StageConfig("S1", target_source="DUACS")


def test_s3_always_freezes_ssh_decoder():
    model = init_parameters(small_model_config(), 0)
    default = StageConfig.default("S3").resolve_frozen(model)
    assert default == set(model.group_names()) - {"decoder[U]", "decoder[V]"}
    assert StageConfig.default("S3", frozen_groups=()).resolve_frozen(model) == {"decoder[SSH]"}
    assert StageConfig.default("S2").resolve_frozen(model) == set()
    assert StageConfig.default("S1", frozen_groups=("all",)).resolve_frozen(model) == set(model.group_names())


def test_stage_order():
    check_stage_order(["S1", "S2", "S3"])
    check_stage_order(["S1", "S3"])
    for bad in (["S2", "S1"], ["S1", "S1"], ["S1", "S4"]):
        with pytest.raises(ConfigError):
            check_stage_order(bad)


# ---- weights and loss


def test_magnitude_weight_examples():
    u = np.array([0.0, 0.25, 10.0, 0.15])
    v = np.array([0.0, 0.0, 0.0, 0.2])
    np.testing.assert_allclose(magnitude_weights(u, v), [1.0, 2.0, 5.0, 2.0])
    t = magnitude_weights(torch.tensor(u), torch.tensor(v))
    np.testing.assert_allclose(t.numpy(), [1.0, 2.0, 5.0, 2.0])
    masked = magnitude_weights(u, v, mask_u=np.array([True, True, False, True]), mask_v=np.ones(4, bool))
    assert masked[2] == 1.0
    with pytest.raises(ConfigError):
        magnitude_weights(u, v, v_ref=0.0)


def test_weighted_mse_examples():
    assert float(weighted_masked_mse(torch.ones(3), torch.ones(3), torch.ones(3, dtype=bool)).value) == 0.0
    one = weighted_masked_mse(torch.tensor([1.0, 5.0]), torch.tensor([0.0, 0.0]), torch.tensor([True, False]))
    assert float(one.value) == 1.0 and one.supervised
    two = weighted_masked_mse(torch.tensor([1.0, 3.0]), torch.zeros(2), torch.ones(2, dtype=bool), torch.tensor([1.0, 3.0]))
    assert float(two.value) == pytest.approx(7.0)
    empty = weighted_masked_mse(torch.ones(2), torch.zeros(2), torch.zeros(2, dtype=bool))
    assert float(empty.value) == 0.0 and not empty.supervised
    with pytest.raises(InputError):
        weighted_masked_mse(torch.ones(2), torch.zeros(3), torch.ones(2, dtype=bool))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_ignores_masked_out_targets(seed):
    r = np.random.default_rng(seed)
    pred = torch.tensor(r.normal(size=(3, 5, 5)))
    target = r.normal(size=(3, 5, 5))
    mask = r.random((3, 5, 5)) > 0.5
    w = torch.tensor(r.uniform(1, 5, size=(3, 5, 5)))
    other = np.where(mask, target, r.normal(scale=1e3, size=target.shape))
    a = weighted_masked_mse(pred, torch.tensor(target), torch.tensor(mask), w).value
    b = weighted_masked_mse(pred, torch.tensor(other), torch.tensor(mask), w).value
    assert float(a) == float(b)


def test_convex_probe_is_monotone():
    # Linear model fitted through the same masked, weighted loss with AdamW.
    g = torch.Generator().manual_seed(0)
    x = torch.randn(200, 3, generator=g, dtype=torch.float64)
    y = x @ torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    mask = torch.rand(200, generator=g) > 0.2
    w = magnitude_weights(y, torch.zeros_like(y))
    beta = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([beta], lr=1e-2, weight_decay=0.0)
    losses = []
    for _ in range(800):
        loss = weighted_masked_mse(x @ beta, y, mask, w).value
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.01 * losses[0]


# ---- targets and sampling


def test_stage_targets(small_data):
    s1 = build_stage_targets("S1", small_data)
    nadir_v, nadir_m = small_data.source("ssh_nadir")
    np.testing.assert_array_equal(s1.fields["SSH"][1], nadir_m)
    assert s1.fields["U"][1][:, ~small_data.land].mean() > 0.9
    s2 = build_stage_targets("S2", small_data)
    assert not (s2.fields["U"][1] & ~s2.fields["SSH"][1]).any()
    s3 = build_stage_targets("S3", small_data)
    assert not s3.fields["SSH"][1].any()
    assert s3.fields["U"][1].any()
    neu = build_stage_targets("S1", small_data, "NEUROST_ANALOG")
    assert not np.array_equal(neu.fields["U"][0], s1.fields["U"][0])
    missing = TrainingData(small_data.grid, small_data.days, small_data.land,
                           {k: v for k, v in small_data.sources.items() if k != "u_swot"})
    with pytest.raises(InputError, match="u_swot"):
        build_stage_targets("S2", missing)


def test_s1_sample_ssh_mask_is_nadir_coverage(small_data):
    cfg = small_model_config()
    sampler = PatchSampler(small_data, cfg, "S1")
    s = sampler.sample(np.random.default_rng(0))
    _, m = small_data.source("ssh_nadir")
    k = int(np.flatnonzero(small_data.days == s.anchor_day)[0])
    window = m[k + 1 : k + 1 + cfg.T_out, s.row : s.row + cfg.patch_h, s.col : s.col + cfg.patch_w]
    np.testing.assert_array_equal(s.target_masks["SSH"], window)
    s3 = PatchSampler(small_data, cfg, "S3").sample(np.random.default_rng(0))
    assert not s3.target_masks["SSH"].any()


def test_forced_anchor(small_data):
    cfg = small_model_config()
    short = small_data.subset_days(4, 4 + cfg.T_in + cfg.T_out - 1)
    sampler = PatchSampler(short, cfg)
    r = np.random.default_rng(0)
    assert {sampler.draw(r)[0] for _ in range(50)} == {cfg.T_in - 1}
    with pytest.raises(InputError):
        PatchSampler(small_data.subset_days(4, 4 + cfg.T_in + cfg.T_out - 2), cfg)


def test_anchor_histogram_uniform(small_data):
    sampler = PatchSampler(small_data, small_model_config())
    r = np.random.default_rng(1)
    draws = np.array([sampler.draw(r)[0] for _ in range(10_000)])
    n = len(sampler.anchor_positions)
    counts = np.array([(draws == a).sum() for a in sampler.anchor_positions])
    p = 1.0 / n
    sigma = np.sqrt(10_000 * p * (1 - p))
    assert np.all(np.abs(counts - 10_000 * p) <= 3 * sigma)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_land_crops_never_drawn():
    grid = GridSpec.from_shape(34.0, -30.0, 16, 32, 1 / 12)
    land = np.zeros(grid.shape, bool)
    land[:, :16] = True
    days = np.arange(6)
    z = np.zeros((6,) + grid.shape)
    data = TrainingData(grid, days, land, {"ssh_nadir": (z, z > 0)})
    sampler = PatchSampler(data, small_model_config(T_in=2, T_out=1))
    r = np.random.default_rng(0)
    for _ in range(500):
        _, row, col = sampler.draw(r)
        assert (~land[row : row + 16, col : col + 16]).mean() >= 0.5
    land[:] = True
    with pytest.raises(InputError):
        PatchSampler(TrainingData(grid, days, land, {}), small_model_config(T_in=2, T_out=1))


def test_normalizer_round_trip(small_data):
    back = Normalizer.from_dict(small_data.normalizer.to_dict())
    for k, c in small_data.normalizer.climatologies.items():
        np.testing.assert_array_equal(back.climatologies[k].means, c.means)


# ---- optimisation


def test_zero_epochs_and_all_frozen_leave_parameters(small_data):
    cfg = small_model_config()
    model = init_parameters(cfg, 0)
    h0 = content_hash(model)
    _, hist = train_stage(model, quick("S1", epochs=0), small_data, 0)
    assert hist == [] and content_hash(model) == h0
    _, hist = train_stage(model, quick("S1", frozen_groups=("all",), epochs=2), small_data, 0)
    assert content_hash(model) == h0


def test_frozen_groups_untouched(small_data):
    cfg = small_model_config()
    model = init_parameters(cfg, 0)
    before = {n: p.clone() for n, p in model.named_parameters()}
    train_stage(model, quick("S2", frozen_groups=("translator", "encoder[SST]")), small_data, 0)
    for n, p in model.named_parameters():
        g = model.group_of(n)
        if g in ("translator", "encoder[SST]"):
            assert torch.equal(p, before[n]), n
    assert not torch.equal(model.decoders["U"].net[0].weight, before["decoders.U.net.0.weight"])


def test_training_is_deterministic(small_data):
    cfg = small_model_config()
    a, ha = train_stage(init_parameters(cfg, 0), quick("S1", epochs=2), small_data, 3)
    b, hb = train_stage(init_parameters(cfg, 0), quick("S1", epochs=2), small_data, 3)
    assert [r.mean_loss for r in ha] == [r.mean_loss for r in hb]
    assert content_hash(a) == content_hash(b)
    assert len(ha) == 2


def test_nan_loss_aborts_with_diagnostics(small_data):
    model = init_parameters(small_model_config(), 0)
    with torch.no_grad():
        model.decoders["SSH"].net[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericalError, match="parameter norms"):
        train_stage(model, quick("S1"), small_data, 0)


def test_curriculum_with_skipped_stage(small_data, tmp_path):
    cfg = small_model_config()
    results = run_curriculum(init_parameters(cfg, 0), [quick("S1"), quick("S3")], small_data, 0, out_dir=tmp_path)
    assert [r.stage for r in results] == ["S1", "S3"]
    assert (tmp_path / "stage1" / "manifest.json").is_file()
    assert (tmp_path / "stage3" / "manifest.json").is_file()
    lines = (tmp_path / "stage1_loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,ssh_term,uv_term" and len(lines) == 2
    s1, s3 = results
    for (n, a), (_, b) in zip(s1.model.named_parameters(), s3.model.named_parameters()):
        if s1.model.group_of(n) == "decoder[SSH]":
            assert torch.equal(a, b)
    with pytest.raises(ConfigError):
        run_curriculum(init_parameters(cfg, 0), [quick("S2"), quick("S1")], small_data, 0)


def test_loss_history_appends(tmp_path):
    from orcast.training import EpochRecord

    p = tmp_path / "h.csv"
    write_loss_history([EpochRecord(0, 1.0, 0.5, 0.5)], p)
    write_loss_history([EpochRecord(1, 0.5, 0.25, 0.25)], p)
    assert p.read_text().splitlines() == ["epoch,mean_loss,ssh_term,uv_term", "0,1.0,0.5,0.5", "1,0.5,0.25,0.25"]


def test_batch_loss_terms(small_data):
    cfg = small_model_config()
    model = init_parameters(cfg, 0)
    r = np.random.default_rng(0)
    s3 = collate([PatchSampler(small_data, cfg, "S3").sample(r) for _ in range(2)])
    total, ssh, uv = batch_loss(model, s3)
    assert ssh.item() == 0.0 and total.item() == uv.item()
