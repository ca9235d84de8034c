import numpy as np
import pytest

from megan import data
from megan.data import BOS, EOS, SEP, ConditionSample, build_batch, tokenize
from megan.gating import FfnBlock
from megan.hypernet import encode_condition, init_params
from megan.model import (
    BaseWeights,
    CheckpointFormatError,
    CheckpointHashError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    GenerationTruncated,
    LayerWeights,
    ModelConfig,
    SequenceTooLong,
    desk_config,
    forward,
    forward_batch,
    generate,
    init_base,
    load_checkpoint,
    save_checkpoint,
)
from megan.numerics import Tensor
from megan.templates import default_templates

from oracles import layer_forward_single_token


@pytest.fixture(scope="module")
def tiny():
    cfg = ModelConfig(n_layers=2, hidden_size=16, intermediate_size=32, reduced_dim=8, n_heads=2, max_context=128)
    rng = np.random.default_rng(0)
    base = init_base(cfg, rng)
    hyper = init_params(cfg.n_layers, cfg.hidden_size, cfg.intermediate_size, cfg.reduced_dim, rng)
    return cfg, base, hyper


def test_config_validation():
    with pytest.raises(ValueError, match="exceed"):
        ModelConfig(hidden_size=64, intermediate_size=64)
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(hidden_size=65, n_heads=4)
    with pytest.raises(ValueError, match="max_context"):
        ModelConfig(max_context=1)


def test_desk_config_defaults():
    cfg = desk_config()
    assert (cfg.n_layers, cfg.hidden_size, cfg.intermediate_size, cfg.reduced_dim) == (4, 64, 256, 16)
    assert cfg.vocab_size == 260 and cfg.n_heads == 4


def test_base_equivalence_at_init(tiny):
    # zero-initialized output map: conditioned logits match the plain base
    cfg, base, hyper = tiny
    tt = default_templates()
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(2, 12))
        toks = [BOS] + list(rng.integers(0, 256, size=n))
        cond = encode_condition("formal", "style", tt, base.tok_emb)
        with_cond, profile = forward(toks, cond, base, hyper, cfg)
        without, _ = forward(toks, None, base, None, cfg)
        assert np.array_equal(with_cond.data, without.data)
        assert np.all(profile == 0.0)


def test_profile_shape_and_range(tiny):
    cfg, base, hyper = tiny
    rng = np.random.default_rng(2)
    for t in hyper.named_tensors().values():
        t.data[:] = rng.normal(0, 0.3, t.data.shape)
    tt = default_templates()
    cond = encode_condition("casual", "style", tt, base.tok_emb)
    toks = [BOS] + tokenize("hello") + [SEP]
    _, profile = forward(toks, cond, base, hyper, cfg)
    assert profile.shape == (cfg.n_layers, cfg.intermediate_size)
    assert profile.min() > -1.0 and profile.max() < 1.0
    assert np.abs(profile).max() > 0.0


def test_causality(tiny):
    cfg, base, _ = tiny
    rng = np.random.default_rng(3)
    toks = list(rng.integers(0, 256, size=10))
    full, _ = forward(toks, None, base, None, cfg)
    changed = list(toks)
    changed[7] = (changed[7] + 1) % 256
    other, _ = forward(changed, None, base, None, cfg)
    assert np.array_equal(full.data[:7], other.data[:7])
    assert not np.array_equal(full.data[7:], other.data[7:])


def test_sequence_too_long(tiny):
    cfg, base, _ = tiny
    with pytest.raises(SequenceTooLong):
        forward(list(range(cfg.max_context + 1)), None, base, None, cfg)


def test_condition_without_hyper_rejected(tiny):
    cfg, base, _ = tiny
    tt = default_templates()
    cond = encode_condition("formal", "style", tt, base.tok_emb)
    with pytest.raises(ValueError, match="without hypernetwork"):
        forward([BOS, 1, 2], cond, base, None, cfg)


def test_single_layer_single_token_matches_scalar_oracle():
    cfg = ModelConfig(n_layers=1, hidden_size=4, intermediate_size=8, reduced_dim=2, n_heads=1, max_context=8)
    rng = np.random.default_rng(4)
    base = init_base(cfg, rng)
    for lw in base.layers:
        lw.attn_norm.data[:] = rng.uniform(0.5, 1.5, 4)
        lw.ffn_norm.data[:] = rng.uniform(0.5, 1.5, 4)
    token = 65
    logits, _ = forward([token], None, base, None, cfg)

    weights = {
        "attn_norm": base.layers[0].attn_norm.data.tolist(),
        "wq": base.layers[0].wq.data.tolist(),
        "wk": base.layers[0].wk.data.tolist(),
        "wv": base.layers[0].wv.data.tolist(),
        "wo": base.layers[0].wo.data.tolist(),
        "ffn_norm": base.layers[0].ffn_norm.data.tolist(),
        "w_up": base.layers[0].ffn.w_up.data.tolist(),
        "w_gate": base.layers[0].ffn.w_gate.data.tolist(),
        "w_down": base.layers[0].ffn.w_down.data.tolist(),
    }
    e = layer_forward_single_token(base.tok_emb.data[token].tolist(), weights, [0.0] * 8)
    # final norm + projection, scalar loops
    ms = sum(v * v for v in e) / len(e)
    inv = (ms + 1e-8) ** -0.5
    normed = [v * inv * g for v, g in zip(e, base.final_norm.data)]
    expected = [
        sum(normed[i] * base.out_proj.data[i][j] for i in range(4)) for j in range(cfg.vocab_size)
    ]
    assert np.max(np.abs(logits.data[0] - np.array(expected))) < 1e-10


def test_batched_forward_matches_single_rows(tiny):
    cfg, base, hyper = tiny
    rng = np.random.default_rng(5)
    for t in hyper.named_tensors().values():
        t.data[:] = rng.normal(0, 0.2, t.data.shape)
    tt = default_templates()
    samples = [
        ConditionSample("abc", "cba", "reverse", "synthetic"),
        ConditionSample("defgh", "DEFGH", "uppercase", "synthetic"),
    ]
    batch = build_batch(samples, tt, cfg.max_context)
    blogits, bbetas = forward_batch(batch, base, cfg, hyper)

    for i, s in enumerate(samples):
        row_len = int((batch.token_ids[i] != data.PAD).sum())
        toks = batch.token_ids[i, :row_len]
        cond = encode_condition(s.z, s.condition_type, tt, base.tok_emb)
        single, profile = forward(toks, cond, base, hyper, cfg, prefix_len=int(batch.prefix_lens[i]))
        assert np.allclose(blogits.data[i, :row_len], single.data, atol=1e-10)
        stacked = np.stack([bt.data[i] for bt in bbetas])
        assert np.allclose(stacked, profile, atol=1e-10)


def test_generate_empty_and_deterministic(tiny):
    cfg, base, hyper = tiny
    prompt = [BOS] + tokenize("ab") + [SEP]
    assert generate(prompt, None, base, None, cfg, max_new=0) == []
    a = generate(prompt, None, base, None, cfg, max_new=8)
    b = generate(prompt, None, base, None, cfg, max_new=8)
    assert a == b


def test_generate_greedy_tie_break_lowest_id():
    # a base crafted so logits are identical across the vocab: argmax -> id 0
    cfg = ModelConfig(n_layers=1, hidden_size=4, intermediate_size=8, reduced_dim=2, n_heads=1, max_context=8)
    base = init_base(cfg, np.random.default_rng(6))
    base.out_proj.data[:] = 0.0
    out = generate([BOS], None, base, None, cfg, max_new=1)
    assert out == [0]


def test_generate_respects_eos(tiny):
    cfg, base, _ = tiny
    prompt = [BOS, 4, 5]
    logits, _ = forward(prompt, None, base, None, cfg)
    first_choice = int(np.argmax(logits.data[-1]))
    # declaring the model's own first pick as the stop token ends generation at once
    out = generate(prompt, None, base, None, cfg, max_new=9, eos_id=first_choice)
    assert out == []


def test_generate_truncation_carries_partial(tiny):
    cfg, base, _ = tiny
    small = ModelConfig(
        n_layers=cfg.n_layers, hidden_size=cfg.hidden_size, intermediate_size=cfg.intermediate_size,
        reduced_dim=cfg.reduced_dim, n_heads=cfg.n_heads, max_context=6,
    )
    # zero the EOS column: some other token always wins the argmax
    keep = base.out_proj.data[:, EOS].copy()
    base.out_proj.data[:, EOS] = 0.0
    try:
        with pytest.raises(GenerationTruncated) as err:
            generate([BOS, 1, 2, 3], None, base, None, small, max_new=10)
        assert len(err.value.partial) == 2
    finally:
        base.out_proj.data[:, EOS] = keep


def test_generate_temperature_requires_rng(tiny):
    cfg, base, _ = tiny
    with pytest.raises(ValueError, match="rng"):
        generate([BOS], None, base, None, cfg, max_new=2, sampling="temperature")
    out = generate([BOS], None, base, None, cfg, max_new=2, sampling="temperature",
                   temperature=1.5, rng=np.random.default_rng(0))
    assert len(out) <= 2


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tiny, tmp_path):
    cfg, base, hyper = tiny
    path = tmp_path / "model.ckpt"
    save_checkpoint(base, hyper, cfg, path)
    base2, hyper2, cfg2 = load_checkpoint(path)
    assert cfg2.to_dict() == cfg.to_dict()
    for (n1, t1), (n2, t2) in zip(sorted(base.named_tensors().items()), sorted(base2.named_tensors().items())):
        assert n1 == n2
        assert t1.data.tobytes() == t2.data.tobytes()
    for (n1, t1), (n2, t2) in zip(sorted(hyper.named_tensors().items()), sorted(hyper2.named_tensors().items())):
        assert t1.data.tobytes() == t2.data.tobytes()
    assert base2.content_hash() == base.content_hash()


def test_checkpoint_without_hyper(tiny, tmp_path):
    cfg, base, _ = tiny
    path = tmp_path / "base.ckpt"
    save_checkpoint(base, None, cfg, path)
    _, hyper2, _ = load_checkpoint(path)
    assert hyper2 is None


def test_checkpoint_loaded_base_is_frozen_hyper_trainable(tiny, tmp_path):
    cfg, base, hyper = tiny
    path = tmp_path / "model.ckpt"
    save_checkpoint(base, hyper, cfg, path)
    base2, hyper2, _ = load_checkpoint(path)
    assert not any(t.requires_grad for t in base2.named_tensors().values())
    assert all(t.requires_grad for t in hyper2.named_tensors().values())


def test_checkpoint_corrupt_weight_byte(tiny, tmp_path):
    cfg, base, hyper = tiny
    path = tmp_path / "model.ckpt"
    save_checkpoint(base, hyper, cfg, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) - 200] ^= 0xFF  # inside the hyper payload
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointHashError, match="SHA-256"):
        load_checkpoint(path)


def test_checkpoint_future_version(tiny, tmp_path):
    cfg, base, _ = tiny
    path = tmp_path / "model.ckpt"
    save_checkpoint(base, None, cfg, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)


def test_checkpoint_truncated(tiny, tmp_path):
    cfg, base, _ = tiny
    path = tmp_path / "model.ckpt"
    save_checkpoint(base, None, cfg, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tiny, tmp_path):
    cfg, base, _ = tiny
    path = tmp_path / "model.ckpt"
    save_checkpoint(base, None, cfg, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_content_hash_tracks_changes(tiny):
    cfg, base, _ = tiny
    h1 = base.content_hash()
    orig = base.layers[0].wq.data[0, 0]
    base.layers[0].wq.data[0, 0] = orig + 1.0
    h2 = base.content_hash()
    base.layers[0].wq.data[0, 0] = orig
    assert h1 != h2
    assert base.content_hash() == h1
