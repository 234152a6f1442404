import math

import pytest
import torch

from drdm.dataspec import load_manifest
from drdm.dsr import (
    Adapter, LabelEncoder, UNetDenoiser, adapter_forward, attention, augment_class, build_dsr_model,
    dsr_losses, fit, forward_diffuse, generate, load_dsr_checkpoint, make_schedule, noise_prediction_loss,
    respace, sample, save_dsr_checkpoint,
)
from drdm.dsr.nets import PromptTokenizer, adapter_parameters, pool_tokens
from drdm.dsr.schedule import forward_step
from drdm.dsr.training import DiffusionBatch, make_batch, null_condition

import oracles

NAMES = ["crested auklet", "parakeet auklet", "least auklet", "rusty finch"]


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ------------------------------------------------------------------ schedule


def test_alpha_plus_beta_is_one():
    s = make_schedule(50, 1e-3, 0.05)
    assert torch.equal(s.alpha + s.beta, torch.ones(50, dtype=torch.float64))


def test_alpha_bar_matches_running_product():
    s = make_schedule(1000, 1e-4, 0.02)
    ref = oracles.alpha_bar(1000, 1e-4, 0.02)
    assert abs(s.alpha_bar[-1].item() - ref[-1]) < 1e-10
    assert torch.allclose(s.alpha_bar, torch.tensor(ref, dtype=torch.float64), atol=1e-10, rtol=0)
    assert (s.alpha_bar[1:] < s.alpha_bar[:-1]).all()


def test_single_step_schedule():
    assert make_schedule(1, 0.3, 0.3).alpha_bar[0].item() == pytest.approx(0.7, abs=1e-15)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_respace_keeps_marginals():
    s = make_schedule(1000)
    r = respace(s, 50)
    assert r.T == 50
    assert torch.allclose(r.alpha_bar, s.alpha_bar[r.timesteps - 1], rtol=1e-12, atol=0)


# ------------------------------------------------------------------- forward


def test_forward_noise_free():
    s = make_schedule(100)
    x0 = rand(4, 3)
    out = forward_diffuse(x0, 37, torch.zeros_like(x0), s)
    assert torch.equal(out, s.alpha_bar[36].sqrt() * x0)


def test_forward_identity_limit():
    s = make_schedule(10, 1e-8, 1e-8)
    x0 = rand(2, 5)
    assert torch.allclose(forward_diffuse(x0, 1, rand(2, 5, seed=1), s), x0, atol=1e-3)


def test_forward_out_of_range():
    s = make_schedule(10)
    with pytest.raises(ValueError, match="out of range"):
        forward_diffuse(torch.zeros(1, 2), 11, torch.zeros(1, 2), s)
    with pytest.raises(ValueError, match="out of range"):
        forward_diffuse(torch.zeros(1, 2), 0, torch.zeros(1, 2), s)


def test_forward_closed_form_moments():
    s = make_schedule(1000)
    n, t = 10_000, 300
    x0 = torch.tensor([0.8, -0.3, 0.0], dtype=torch.float64)
    eps = torch.randn(n, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    xt = forward_diffuse(x0.expand(n, 3), t, eps, s)
    ab = s.alpha_bar[t - 1].item()
    var = 1 - ab
    assert ((xt.mean(0) - math.sqrt(ab) * x0).abs() < 3 * math.sqrt(var / n)).all()
    assert ((xt.var(0) - var).abs() < 3 * var * math.sqrt(2 / (n - 1))).all()


def test_iterated_chain_matches_marginal():
    s = make_schedule(1000)
    n, t = 10_000, 120
    g = torch.Generator().manual_seed(1)
    x0 = torch.tensor([0.9, -0.5], dtype=torch.float64)
    x = x0.expand(n, 2).clone()
    for step in range(1, t + 1):
        x = forward_step(x, step, torch.randn(n, 2, generator=g, dtype=torch.float64), s)
    ab = s.alpha_bar[t - 1].item()
    var = 1 - ab
    assert ((x.mean(0) - math.sqrt(ab) * x0).abs() < 3 * math.sqrt(var / n)).all()
    assert ((x.var(0) - var).abs() < 3 * var * math.sqrt(2 / (n - 1))).all()


# ------------------------------------------------------------------- sampler


def test_sampler_single_step_closed_form():
    s = make_schedule(1, 0.1, 0.1)
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    out = sample(lambda x, t, c: torch.zeros_like(x), s, None, 6, g1, (3,), clamp=None, dtype=torch.float64)
    x1 = torch.randn((6, 3), generator=g2, dtype=torch.float64)
    assert torch.equal(out, x1 / math.sqrt(0.9))


def test_sampler_deterministic_and_clamped():
    s = make_schedule(20)
    mock = lambda x, t, c: 0.1 * x  # noqa: E731
    a = sample(mock, s, None, 4, torch.Generator().manual_seed(3), (2,))
    b = sample(mock, s, None, 4, torch.Generator().manual_seed(3), (2,))
    assert torch.equal(a, b) and a.abs().max() <= 1.0


def test_sampler_loose_clip_matches_noise_form():
    # a clip range nothing reaches leaves the posterior-mean update equal to the plain one
    s = make_schedule(30)
    mock = lambda x, t, c: 0.3 * x + 0.01 * t[:, None].double()  # noqa: E731
    run = lambda clamp: sample(mock, s, None, 5, torch.Generator().manual_seed(8), (4,),  # noqa: E731
                               clamp=clamp, dtype=torch.float64)
    assert torch.allclose(run((-1e9, 1e9)), run(None), atol=1e-9)


def test_sampler_clip_tames_biased_model():
    s = make_schedule(10)
    mock = lambda x, t, c: -5.0 * torch.ones_like(x)  # noqa: E731  implied x0 drifts far above 1
    run = lambda clamp: sample(mock, s, None, 3, torch.Generator().manual_seed(1), (2,),  # noqa: E731
                               clamp=clamp, dtype=torch.float64)
    assert run(None).min() > 1.0
    clipped = run((-1.0, 1.0))
    assert clipped.abs().max() <= 1.0 and torch.isfinite(clipped).all()


def test_sampler_rejects_empty():
    with pytest.raises(ValueError):
        sample(lambda x, t, c: x, make_schedule(2), None, 0, torch.Generator(), (2,))


# ----------------------------------------------------------------- attention


def test_attention_single_key():
    v = rand(1, 5)
    out = attention(rand(3, 4), rand(1, 4, seed=1), v)
    assert torch.allclose(out, v.expand(3, 5), atol=1e-15)


def test_attention_identical_keys_give_mean():
    k = rand(1, 4).expand(6, 4)
    v = rand(6, 3, seed=2)
    assert torch.allclose(attention(rand(2, 4), k, v), v.mean(0).expand(2, 3), atol=1e-12)


def test_attention_matches_loop_oracle():
    for seed in range(20):
        q, k, v = rand(3, 4, seed=seed), rand(5, 4, seed=seed + 1), rand(5, 6, seed=seed + 2)
        mask = torch.tensor([True, True, False, True, seed % 2 == 0])
        for m in (None, mask):
            ref = torch.tensor(oracles.attention(q, k, v, None if m is None else m.tolist()), dtype=torch.float64)
            assert torch.allclose(attention(q, k, v, m), ref, atol=1e-6, rtol=0)


def test_attention_rows_sum_to_one():
    q, k = rand(2, 7, 4), rand(2, 9, 4, seed=1)
    eye = torch.eye(9, dtype=torch.float64).expand(2, 9, 9)
    weights = attention(q, k, eye)
    assert torch.allclose(weights.sum(-1), torch.ones(2, 7, dtype=torch.float64), atol=1e-6)


def test_attention_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        attention(torch.ones(2, 3), torch.ones(2, 4), torch.ones(2, 4))


# ------------------------------------------------------------------- adapter


def test_fresh_adapter_is_identity():
    a = Adapter(8, 4)
    h = torch.randn(5, 8)
    assert torch.equal(adapter_forward(h, a), h)


def test_adapter_matches_loop_oracle():
    for seed in range(10):
        torch.manual_seed(seed)
        a = Adapter(6, 3).double()
        for p in a.parameters():
            torch.nn.init.normal_(p, std=0.1)
        h = rand(4, 6, seed=seed)
        out = a(h)
        for i in range(4):
            ref = oracles.adapter(h[i], a.down.weight, a.down.bias, a.up.weight, a.up.bias)
            assert torch.allclose(out[i], torch.tensor(ref, dtype=torch.float64), atol=1e-6, rtol=0)


def test_adapter_zero_input_zero_bias():
    a = Adapter(6, 3)
    torch.nn.init.normal_(a.up.weight)
    torch.nn.init.zeros_(a.down.bias)
    assert torch.count_nonzero(a(torch.zeros(2, 6))) == 0


def test_adapter_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        Adapter(6)(torch.zeros(1, 5))


def test_fresh_adapters_leave_unet_unchanged():
    torch.manual_seed(0)
    net = UNetDenoiser(widths=(8, 16), cond_width=16, adapter_width=4, image_size=8)
    x = torch.randn(2, 3, 8, 8)
    cond = torch.randn(2, 5, 16)
    t = torch.tensor([3, 700])
    assert torch.equal(net(x, t, cond, use_adapters=True), net(x, t, cond, use_adapters=False))


# -------------------------------------------------------------- label encoder


def test_label_encoder_shapes_and_determinism():
    torch.manual_seed(0)
    enc = LabelEncoder(NAMES, width=16, adapter_width=4)
    tokens, mask = enc(NAMES + NAMES[:1])
    assert tokens.shape[:2] == (5, len(enc.templates)) and tokens.shape[-1] == 16
    assert len(enc.templates) >= 4
    assert torch.equal(tokens[0], tokens[4])
    assert pool_tokens(tokens, mask).shape == (5, len(enc.templates), 16)


def test_label_encoder_errors():
    enc = LabelEncoder(NAMES, width=8, adapter_width=2)
    with pytest.raises(ValueError, match="empty"):
        enc(["  "])
    with pytest.raises(KeyError):
        enc(["unknown bird"])


def test_tokenizer_builds_from_templates_and_names():
    tok = PromptTokenizer.build(NAMES)
    ids, mask = tok.encode(["a photo of a crested auklet"])
    assert mask.sum().item() == 6 and ids[0, 0].item() != 0


# ------------------------------------------------------------------- losses


class _Mock(torch.nn.Module):
    def __init__(self, offset=None):
        super().__init__()
        self.offset = offset

    def __call__(self, x_t, t, b):
        return b.eps if self.offset is None else b.eps + self.offset


def _batch(seed=0, shape=(4, 3, 4, 4)):
    g = torch.Generator().manual_seed(seed)
    return DiffusionBatch(torch.randn(shape, generator=g), torch.randint(1, 101, (shape[0],), generator=g),
                          torch.randn(shape, generator=g), torch.zeros(shape[0], dtype=torch.long),
                          torch.zeros(shape[0], dtype=torch.long))


def test_perfect_predictor_zero_loss():
    assert noise_prediction_loss(_Mock(), _batch(), make_schedule(100)).item() == 0.0


def test_constant_offset_loss():
    assert noise_prediction_loss(_Mock(0.5), _batch(), make_schedule(100)).item() == pytest.approx(0.25, abs=1e-7)


def test_non_finite_prediction_rejected():
    with pytest.raises(FloatingPointError):
        noise_prediction_loss(_Mock(float("nan")), _batch(), make_schedule(100))


def test_noise_loss_matches_mse_oracle():
    m = build_dsr_model(NAMES, widths=(8, 16), cond_width=16, adapter_width=4, image_size=8, T=100, seed=1)
    for seed in range(5):
        b = _batch(seed, (3, 3, 8, 8))
        b.cls = torch.tensor([0, 1, 3])
        with torch.no_grad():
            loss = noise_prediction_loss(lambda x, t, bb: m.predict(x, t, bb.cls, bb.template), b, m.schedule)
            x_t = forward_diffuse(b.x0, b.t, b.eps, m.schedule)
            pred = m.predict(x_t, b.t, b.cls, b.template)
        assert loss.item() == pytest.approx(oracles.mse(pred, b.eps), abs=1e-6)


def test_alpha_zero_equals_label_free_objective():
    m = build_dsr_model(NAMES, widths=(8, 16), cond_width=16, adapter_width=4, image_size=8, T=100, seed=2)
    b = _batch(0, (2, 3, 8, 8))
    l_sd, l_c, total = dsr_losses(m, b, 0.0)
    assert total.item() == l_sd.item() and l_c is not None
    l_sd2, none, total2 = dsr_losses(m, b, None)
    assert none is None and total2.item() == l_sd.item()
    with pytest.raises(ValueError):
        dsr_losses(m, b, -0.5)


def test_dsr_gradient_wrt_adapter_params():
    m = build_dsr_model(NAMES, widths=(4, 8), cond_width=8, adapter_width=2, image_size=8, T=100, seed=3).double()
    for p in adapter_parameters(m):
        torch.nn.init.normal_(p, std=0.2)
    b = _batch(1, (2, 3, 8, 8))
    b.x0, b.eps = b.x0.double(), b.eps.double()
    b.cls = torch.tensor([0, 2])
    params = adapter_parameters(m)
    m.zero_grad()
    dsr_losses(m, b, 0.5)[2].backward()
    g = torch.Generator().manual_seed(0)
    h = 1e-4
    checked = 0
    for p in [params[0], params[1], params[-2], params[-1]]:
        for _ in range(3):
            flat = int(torch.randint(0, p.numel(), (1,), generator=g))
            idx = torch.unravel_index(torch.tensor(flat), p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = dsr_losses(m, b, 0.5)[2].item()
                p[idx] = orig - h
                dn = dsr_losses(m, b, 0.5)[2].item()
                p[idx] = orig
            fd = (up - dn) / (2 * h)
            assert abs(p.grad[idx].item() - fd) <= 1e-3 * max(abs(fd), 1e-6)
            checked += 1
    assert checked == 12


# ------------------------------------------------------------------ training


def _images(n=16, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g) * 2 - 1, torch.arange(n) % len(NAMES)


def test_frozen_parameters_bit_identical_after_adapter_training():
    m = build_dsr_model(NAMES, widths=(8, 16), cond_width=16, adapter_width=4, image_size=8, T=100, seed=4)
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    adapter_ids = {id(p) for p in adapter_parameters(m)}
    X, y = _images()
    fit(m, X, y, steps=5, lr=1e-2, batch_size=8, alpha=0.5, scope="adapters", seed=0)
    changed = 0
    for n, p in m.named_parameters():
        if id(p) in adapter_ids:
            changed += int(not torch.equal(p, before[n]))
        else:
            assert torch.equal(p, before[n]), n
    assert changed > 0


def test_pretraining_scope_leaves_adapters_identity():
    m = build_dsr_model(NAMES, widths=(8, 16), cond_width=16, adapter_width=4, image_size=8, T=100, seed=4)
    X, y = _images()
    fit(m, X, y, steps=3, lr=1e-2, batch_size=8, scope="backbone", seed=0)
    x =torch.randn(2, 3, 8, 8)
    t = torch.tensor([5, 50])
    with torch.no_grad():
        a = m.predict(x, t, torch.tensor([0, 1]), torch.tensor([0, 1]), use_adapters=True)
        b = m.predict(x, t, torch.tensor([0, 1]), torch.tensor([0, 1]), use_adapters=False)
    assert torch.equal(a, b)


def test_alpha_zero_training_equals_without_label_loss():
    X, y = _images()
    runs = []
    for alpha in (0.0, None):
        m = build_dsr_model(NAMES, widths=(8, 16), cond_width=16, adapter_width=4, image_size=8, T=100, seed=5)
        c = fit(m, X, y, steps=4, lr=1e-2, batch_size=8, alpha=alpha, scope="adapters", seed=1)
        runs.append((c["l_sd"], [p.detach().clone() for p in m.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


@pytest.fixture(scope="module")
def toy_model():
    g = torch.Generator().manual_seed(0)
    centers = torch.tensor([[-0.6, -0.6], [0.6, 0.6]])
    cls = torch.arange(2).repeat_interleave(64)
    X = centers[cls] + 0.05 * torch.randn(128, 2, generator=g)
    m = build_dsr_model(["crested auklet", "parakeet auklet"], kind="mlp", dim=2, hidden=64, T=1000, seed=0)
    curves = fit(m, X, cls, steps=1200, lr=2e-3, batch_size=128, alpha=None, scope="all", seed=0)
    return m, centers, curves


def test_toy_training_halves_loss(toy_model):
    _, _, curves = toy_model
    first = sum(curves["l_sd"][:20]) / 20
    last = sum(curves["l_sd"][-50:]) / 50
    assert last <= 0.5 * first


def test_toy_conditional_samples_are_pure(toy_model):
    m, centers, _ = toy_model
    correct = 0
    for k in range(2):
        s = generate(m, k, 250, seed=10 + k)
        correct += (torch.cdist(s, centers).argmin(1) == k).sum().item()
    assert correct / 500 >= 0.95


def test_generate_is_deterministic(toy_model):
    m, _, _ = toy_model
    assert torch.equal(generate(m, 1, 8, seed=3), generate(m, 1, 8, seed=3))
    with pytest.raises(KeyError):
        generate(m, 2, 1, seed=0)


def test_null_condition_is_one_zero_token():
    null, mask = null_condition(rand(3, 5, 4))
    assert torch.equal(null, torch.zeros(3, 5, 4, dtype=torch.float64))
    assert mask.tolist() == [[True, False, False, False, False]] * 3


def test_condition_drop_only_touches_flagged_rows(toy_model):
    m, _, _ = toy_model
    cls, tmpl = torch.tensor([0, 1, 1]), torch.tensor([0, 2, 3])
    plain, pmask = m.condition(cls, tmpl)
    cond, cmask = m.condition(cls, tmpl, drop=torch.tensor([False, True, False]))
    assert torch.equal(cond[[0, 2]], plain[[0, 2]]) and torch.equal(cmask[[0, 2]], pmask[[0, 2]])
    assert not cond[1].any() and cmask[1].tolist()[:2] == [True, False]


def test_zero_guidance_ignores_the_class(toy_model):
    m, _, _ = toy_model
    assert torch.equal(generate(m, 0, 6, seed=4, guidance=0.0), generate(m, 1, 6, seed=4, guidance=0.0))
    assert torch.equal(generate(m, 1, 6, seed=4, guidance=1.0), generate(m, 1, 6, seed=4))


def test_cond_drop_range():
    m = build_dsr_model(NAMES[:2], kind="mlp", dim=2, hidden=8, T=10)
    with pytest.raises(ValueError, match="cond_drop"):
        fit(m, torch.zeros(4, 2), torch.zeros(4, dtype=torch.long), steps=1, cond_drop=1.0)


def test_guided_samples_of_prompt_dropout_model_are_pure():
    g = torch.Generator().manual_seed(0)
    centers = torch.tensor([[-0.6, -0.6], [0.6, 0.6]])
    cls = torch.arange(2).repeat_interleave(64)
    X = centers[cls] + 0.05 * torch.randn(128, 2, generator=g)
    m = build_dsr_model(["crested auklet", "parakeet auklet"], kind="mlp", dim=2, hidden=64, T=1000, seed=0)
    fit(m, X, cls, steps=1200, lr=2e-3, batch_size=128, scope="all", seed=0, cond_drop=0.2)
    correct = 0
    for k in range(2):
        s = generate(m, k, 250, seed=10 + k, guidance=3.0)
        correct += (torch.cdist(s, centers).argmin(1) == k).sum().item()
    assert correct / 500 >= 0.95


def test_make_batch_ranges():
    s = make_schedule(30)
    b = make_batch(torch.zeros(500, 2), torch.zeros(500, dtype=torch.long), s, torch.Generator().manual_seed(0), 4)
    assert b.t.min() >= 1 and b.t.max() <= 30 and set(b.template.tolist()) == {0, 1, 2, 3}


# ------------------------------------------------------ checkpoint + augment


@pytest.fixture(scope="module")
def small_unet():
    return build_dsr_model(NAMES, class_ids=[3, 5, 7, 9], widths=(8, 16), cond_width=16, adapter_width=4,
                           image_size=8, T=50, seed=6)


def test_checkpoint_round_trip(small_unet, tmp_path):
    p = save_dsr_checkpoint(small_unet, tmp_path / "dsr.pt", "abc")
    m2 = load_dsr_checkpoint(p)
    assert m2.class_ids == [3, 5, 7, 9] and m2.config_hash == "abc"
    assert torch.equal(generate(small_unet, 0, 2, seed=1, steps=5), generate(m2, 0, 2, seed=1, steps=5))


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.pt"):
        load_dsr_checkpoint(tmp_path / "nope.pt")


def test_augment_class_writes_entries(small_unet, tmp_path):
    man = tmp_path / "gen.jsonl"
    entries = augment_class(small_unet, 5, 10, tmp_path, man, seed=0, steps=5)
    assert len(entries) == 10
    assert all(e.class_id == 5 and e.provenance == "generated" for e in entries)
    assert all(e.path.startswith("generated/") for e in entries)
    loaded = load_manifest(man, contiguous=False)
    assert [e.path for e in loaded.entries] == [e.path for e in entries]
    assert all((tmp_path / e.path).is_file() for e in entries)


def test_augment_same_seed_same_files(small_unet, tmp_path):
    a = augment_class(small_unet, 3, 3, tmp_path / "a", seed=4, steps=5)
    b = augment_class(small_unet, 3, 3, tmp_path / "b", seed=4, steps=5)
    for ea, eb in zip(a, b):
        assert (tmp_path / "a" / ea.path).read_bytes() == (tmp_path / "b" / eb.path).read_bytes()


def test_augment_errors(small_unet, tmp_path):
    with pytest.raises(KeyError):
        augment_class(small_unet, 4, 2, tmp_path)
    man = tmp_path / "gen.jsonl"
    augment_class(small_unet, 7, 2, tmp_path, man, seed=0, steps=3)
    with pytest.raises(FileExistsError):
        augment_class(small_unet, 7, 2, tmp_path, man, seed=0, steps=3)
