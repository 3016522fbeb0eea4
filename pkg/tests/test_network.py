import numpy as np
import pytest
import torch

from conftest import seeded_latent, tiny_model_config
from beatdiff.conditioning import ConditionBundle
from beatdiff.dataset import synth_audio
from beatdiff.network import (AnimationModel, CheckpointError, GROUP_NAMES,
                              ModelConfig, STAGE2_TRAINABLE_GROUPS, UNet,
                              checkpoint_hash, classify_parameter,
                              extend_to_stage2, freeze_for_stage2, group_hashes,
                              load_checkpoint, parameter_groups,
                              read_checkpoint_header, save_checkpoint,
                              topology_descriptor)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=30)  # not divisible by patch factor
    with pytest.raises(ValueError):
        ModelConfig(widths=(64, 128))
    with pytest.raises(ValueError):
        ModelConfig(widths=(60, 128, 128))  # not divisible by 8
    with pytest.raises(ValueError):
        ModelConfig(image_size=8)  # 2x2 latent cannot downsample twice
    cfg = ModelConfig()
    assert cfg.latent_channels == 48
    assert cfg.latent_size == 16


def test_predict_noise_shapes(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    z = seeded_latent(model, 0)
    assert z.shape == (48, 4, 4)
    cond = ConditionBundle(text=model.text_embedding("the figure spins"),
                           reference=model.reference_features(z))
    one = model.predict_noise(z, 3, cond)
    assert one.shape == z.shape
    batch = model.predict_noise(torch.stack([z, z]), 3, cond)
    assert batch.shape == (2, 48, 4, 4)
    # Identical rows agree only to kernel accumulation-order noise: the two
    # items sit at different row offsets of one big matmul.
    assert torch.allclose(batch[0], batch[1], atol=1e-5)
    assert torch.allclose(batch[0], one, atol=1e-5)


def test_stage2_rejects_single_frames(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=2, init_seed=0)
    z = seeded_latent(model, 1)
    with pytest.raises(ValueError):
        model.predict_noise(z, 0, ConditionBundle())


def test_reference_fusion_is_asymmetric(tiny_cfg):
    # Swapping the noisy latent and the reference must change the prediction:
    # fusion concatenates reference tokens as context, it does not average.
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    za, zb = seeded_latent(model, 2), seeded_latent(model, 3)
    with torch.no_grad():
        ab = model.predict_noise(za, 5, ConditionBundle(
            reference=model.reference_features(zb)))
        ba = model.predict_noise(zb, 5, ConditionBundle(
            reference=model.reference_features(za)))
    assert not torch.allclose(ab, ba, atol=1e-4)


def test_reference_changes_prediction(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    z = seeded_latent(model, 4)
    with torch.no_grad():
        none = model.predict_noise(z, 5, ConditionBundle())
        with_ref = model.predict_noise(z, 5, ConditionBundle(
            reference=model.reference_features(seeded_latent(model, 5))))
    assert not torch.allclose(none, with_ref, atol=1e-4)


def test_text_attention_identity_at_init(tiny_cfg):
    # The text path's value projection output starts zeroed, so captions must
    # not move the prediction at construction time.
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    z = seeded_latent(model, 6)
    ref = model.reference_features(z)
    with torch.no_grad():
        a = model.predict_noise(z, 5, ConditionBundle(reference=ref))
        b = model.predict_noise(z, 5, ConditionBundle(
            text=model.text_embedding("the figure bounces"), reference=ref))
    assert torch.equal(a, b)


def test_capture_shapes(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=2, init_seed=0)
    k = 3
    z = torch.stack([seeded_latent(model, s) for s in range(k)])
    out, caps = model.predict_noise(z, 0, ConditionBundle(), capture=True)
    assert out.shape == z.shape
    assert len(caps) == 5
    hw = [16, 4, 1, 4, 16]
    widths = [16, 24, 24, 24, 16]
    for c, n, w in zip(caps, hw, widths):
        assert c.shape == (k, n, w)


def test_features_shape(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    z = torch.stack([seeded_latent(model, 7), seeded_latent(model, 8)])
    f = model.denoiser.features(z)
    assert f.shape == (2, 24)
    assert not torch.allclose(f[0], f[1])


def test_classify_parameter_and_partition(tiny_cfg):
    for stage, expected in ((1, set(GROUP_NAMES) - STAGE2_TRAINABLE_GROUPS),
                            (2, set(GROUP_NAMES))):
        model = AnimationModel(tiny_cfg, stage=stage, init_seed=0)
        groups = parameter_groups(model)
        assert set(groups) == expected
        names = [n for items in groups.values() for n, _ in items]
        assert len(names) == len(set(names))
        assert len(names) == len(list(model.parameters()))
    assert classify_parameter("denoiser.site0.fuse.to_q.weight") == "spatial_attention"
    assert classify_parameter("denoiser.site0.text_attn.to_out.weight") == \
        "text_cross_attention"
    assert classify_parameter("denoiser.site1.music_mod.cross.to_q.weight") == \
        "temporal_music"
    assert classify_parameter("beat_table") == "temporal_beat"
    assert classify_parameter("denoiser.mid_res.time_proj.weight") == "time_embedding"
    assert classify_parameter("denoiser.stem.weight") == "conv"
    assert classify_parameter("reference_net.site2.fuse.to_k.bias") == \
        "spatial_attention"
    assert classify_parameter("mask_encoder.proj.weight") == "mask_encoder"


def test_stage2_extension_identity(tiny_cfg):
    # Criterion: the stage-2 model at init predicts exactly what its stage-1
    # parent predicts, frame by frame, on seeded inputs.
    base = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    ext = extend_to_stage2(base, init_seed=99)
    w = synth_audio(120.0, 1.0, seed=0)
    for trial in range(10):
        z = torch.stack([seeded_latent(base, 100 + 3 * trial + d) for d in range(3)])
        ref = base.reference_features(z[0])
        caption = "the figure bounces up and down"
        bits = np.array([1, 0, 1])
        cond2 = ConditionBundle(text=ext.text_embedding(caption),
                                reference=ext.reference_features(z[0]),
                                music=ext.music_embedding(w, (0.0, 0.5)),
                                beat=ext.beat_embedding(bits))
        cond1 = ConditionBundle(text=base.text_embedding(caption), reference=ref)
        with torch.no_grad():
            e2 = ext.predict_noise(z, 5, cond2)
            e1 = base.predict_noise(z, 5, cond1)
        assert (e2 - e1).abs().max().item() < 1e-6, f"trial {trial}"


def test_freeze_for_stage2(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=2, init_seed=0)
    freeze_for_stage2(model)
    for gname, items in parameter_groups(model).items():
        want = gname in STAGE2_TRAINABLE_GROUPS
        for name, p in items:
            assert p.requires_grad == want, name
    with pytest.raises(ValueError):
        freeze_for_stage2(AnimationModel(tiny_cfg, stage=1, init_seed=0))


def test_group_hashes_move_with_parameters(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    before = group_hashes(model)
    assert set(before) == set(parameter_groups(model))
    with torch.no_grad():
        model.denoiser.stem.weight.add_(0.01)
    after = group_hashes(model)
    assert after["conv"] != before["conv"]
    unchanged = set(before) - {"conv"}
    assert all(after[g] == before[g] for g in unchanged)


def test_checkpoint_roundtrip_bitwise(tiny_cfg, tmp_path):
    model = AnimationModel(tiny_cfg, stage=2, init_seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.stage == 2
    assert back.config == model.config
    for (na, pa), (nb, pb) in zip(sorted(model.named_parameters()),
                                  sorted(back.named_parameters())):
        assert na == nb
        assert torch.equal(pa.detach().float(), pb.detach().float()), na
    assert group_hashes(back) == group_hashes(model)


def test_checkpoint_header_and_hash(tiny_cfg, tmp_path):
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    header = read_checkpoint_header(path)
    assert header["topology"] == topology_descriptor(model)
    h1 = checkpoint_hash(path)
    assert len(h1) == 64
    save_checkpoint(model, tmp_path / "m2.ckpt")
    assert checkpoint_hash(tmp_path / "m2.ckpt") == h1


def test_checkpoint_rejects_corruption(tiny_cfg, tmp_path):
    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    bad_magic = tmp_path / "bad1.ckpt"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad_magic)
    truncated = tmp_path / "bad2.ckpt"
    truncated.write_bytes(blob[:-64])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)


def test_checkpoint_rejects_topology_mismatch(tiny_cfg, tmp_path):
    # A header whose stated topology disagrees with its stored group sizes
    # must be refused, not silently misread.
    import json
    import struct

    model = AnimationModel(tiny_cfg, stage=1, init_seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    version, size = struct.unpack("<II", blob[4:12])
    header = json.loads(blob[12:12 + size].decode("utf-8"))
    header["topology"]["stage"] = 2
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    tampered = tmp_path / "tampered.ckpt"
    tampered.write_bytes(blob[:4] + struct.pack("<II", version, len(payload)) +
                         payload + blob[12 + size:])
    with pytest.raises(CheckpointError, match="don't match"):
        load_checkpoint(tampered)
    bad_version = tmp_path / "badver.ckpt"
    bad_version.write_bytes(blob[:4] + struct.pack("<II", 99, size) + blob[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad_version)


def test_model_construction_deterministic(tiny_cfg):
    a = AnimationModel(tiny_cfg, stage=2, init_seed=5)
    b = AnimationModel(tiny_cfg, stage=2, init_seed=5)
    c = AnimationModel(tiny_cfg, stage=2, init_seed=6)
    assert group_hashes(a) == group_hashes(b)
    assert group_hashes(a) != group_hashes(c)


def test_null_bundle_swaps_text_and_music(tiny_cfg):
    model = AnimationModel(tiny_cfg, stage=2, init_seed=0)
    z = seeded_latent(model, 0)
    w = synth_audio(120.0, 1.0, seed=0)
    cond = ConditionBundle(text=model.text_embedding("the figure sways"),
                           reference=model.reference_features(z),
                           music=model.music_embedding(w, (0.0, 0.5)),
                           beat=model.beat_embedding(np.array([0, 1])))
    null = model.null_bundle(cond)
    assert null.text.is_null
    assert null.music.shape[0] == 1
    assert null.reference is cond.reference
    assert null.beat is cond.beat


# ---- finite-difference gradient checks ----------------------------------


def _warm(model, seed=17, scale=0.02):
    # Nudge every parameter off its init point so the zero-initialized
    # projections pass gradient and no group sits at a degenerate zero.
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def _fd_loss(model, inputs):
    """Scalar loss exercising every conditioning pathway of the model."""
    z, w, mask, caption, bits, probe, context = inputs
    cond_kw = {}
    if model.stage == 2:
        cond_kw["music"] = model.music_embedding(w, (0.0, 0.5))
        cond_kw["beat"] = model.beat_embedding(bits)
        cond_kw["motion"] = context
    cond = ConditionBundle(text=model.text_embedding(caption),
                           reference=model.reference_features(z[0]),
                           **cond_kw)
    mask_feat = model.mask_feature(mask)
    z_in = z + mask_feat if model.stage == 2 else z[0] + mask_feat
    pred = model.predict_noise(z_in, 3, cond)
    return (pred * probe).sum()


def _fd_inputs(model, seed=0):
    rng = np.random.default_rng(seed)
    k = 2 if model.stage == 2 else 1
    z = torch.stack([
        model.encode_image(rng.uniform(-1, 1, (16, 16, 3))) for _ in range(k)
    ]).to(torch.float64)
    w = synth_audio(120.0, 1.0, seed=1)
    mask = torch.from_numpy(rng.uniform(0, 1, (16, 16)).astype(np.float64))
    bits = np.array([1, 0])
    shape = z.shape if model.stage == 2 else z[0].shape
    probe = torch.from_numpy(rng.standard_normal(shape))
    context = None
    if model.stage == 2:
        # Fixed cached states: an input to the loss, not part of the graph.
        with torch.no_grad():
            _, caps = model.predict_noise(z, 0, ConditionBundle(
                reference=model.reference_features(z[0])), capture=True)
        context = [c[-1:].permute(1, 0, 2).contiguous() for c in caps]
    return z, w, mask, "the figure bounces with the beat", bits, probe, context


@pytest.mark.parametrize("stage", [1, 2])
def test_gradients_match_finite_differences(stage):
    # Central differences at float64 on 4x4 latents; every parameter group
    # must agree with autograd within 1e-4 relative error.
    cfg = tiny_model_config()
    model = AnimationModel(cfg, stage=stage, init_seed=0).double()
    _warm(model)
    inputs = _fd_inputs(model)
    loss = _fd_loss(model, inputs)
    loss.backward()

    eps = 1e-5
    rng = np.random.default_rng(99)
    checked = 0
    for gname, items in parameter_groups(model).items():
        picks = items if len(items) <= 6 else \
            [items[i] for i in rng.choice(len(items), 6, replace=False)]
        group_checked = 0
        for name, p in picks:
            if p.grad is None:
                continue
            flat_g = p.grad.detach().reshape(-1)
            entries = rng.choice(p.numel(), min(2, p.numel()), replace=False)
            for e in entries:
                idx = np.unravel_index(int(e), tuple(p.shape))
                with torch.no_grad():
                    orig = p[idx].item()
                    p[idx] = orig + eps
                    hi = _fd_loss(model, inputs).item()
                    p[idx] = orig - eps
                    lo = _fd_loss(model, inputs).item()
                    p[idx] = orig
                fd = (hi - lo) / (2 * eps)
                an = flat_g[int(e)].item()
                # Params with an exactly-zero gradient (e.g. key biases, which
                # softmax shift-invariance cancels) leave FD at its truncation
                # noise floor; accept absolute agreement there.
                if abs(fd - an) > 1e-7:
                    denom = max(abs(fd), abs(an), 1e-6)
                    assert abs(fd - an) / denom < 1e-4, \
                        f"{gname}/{name}[{idx}]: fd={fd:.8g} autograd={an:.8g}"
                group_checked += 1
        assert group_checked > 0, f"no gradient reached group {gname}"
        checked += group_checked
    assert checked >= 20
