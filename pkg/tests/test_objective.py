import math

import numpy as np
import pytest

from mfdistill import manifold as M
from mfdistill import objective as O
from mfdistill.data import DatasetSpec, generate_dataset
from mfdistill.errors import ConfigError, ContractError, DivergenceError, ShapeError
from mfdistill.metrics import load_metrics
from mfdistill.objective import (DistillConfig, LayerPairing, compute_objective, distill, kd_loss,
                                 resolve_lambda, select_layers, total_loss, train_supervised)
from mfdistill.tensor import Tensor, grad_check
from mfdistill.vit import VisionTransformer, VitConfig


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def small_vit(**kw):
    base = dict(image_size=(8, 8), patch_size=4, embed_dim=8, num_heads=2, num_layers=2, num_classes=4)
    base.update(kw)
    return VitConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(DatasetSpec(num_classes=4, image_size=(8, 8), train_samples=64, eval_samples=32,
                                        teacher_samples=0, seed=3))


# -- kd loss ----------------------------------------------------------------------

def test_kd_zero_for_identical_logits():
    z = rand(3, 5)
    assert abs(kd_loss(Tensor(z), z, [0, 1, 2], 1.0).item()) < 1e-15


def test_kd_lambda_zero_is_cross_entropy():
    z = np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 3.0]])
    labels = [0, 1]
    ref = np.mean([-(z[i, y] - math.log(sum(math.exp(v) for v in z[i]))) for i, y in enumerate(labels)])
    assert abs(kd_loss(Tensor(z), rand(2, 3), labels, 0.0).item() - ref) < 1e-12


def test_kd_half_lambda_two_classes_scripted():
    s = np.array([[1.0, -0.5]])
    t = np.array([[0.2, 0.9]])
    ps = [math.exp(v) / (math.exp(1.0) + math.exp(-0.5)) for v in s[0]]
    pt = [math.exp(v) / (math.exp(0.2) + math.exp(0.9)) for v in t[0]]
    ce = -math.log(ps[1])
    kl = sum(p * math.log(p / q) for p, q in zip(pt, ps))
    assert abs(kd_loss(Tensor(s), t, [1], 0.5, 1.0).item() - (0.5 * ce + 0.5 * kl)) < 1e-12


def test_kd_temperature_scaling():
    s, t = rand(2, 3), rand(2, 3, seed=1)
    tau = 3.0
    ps = np.exp(s / tau) / np.exp(s / tau).sum(1, keepdims=True)
    pt = np.exp(t / tau) / np.exp(t / tau).sum(1, keepdims=True)
    ref = tau ** 2 * (pt * np.log(pt / ps)).sum(1).mean()
    assert abs(kd_loss(Tensor(s), t, [0, 0], 1.0, tau).item() - ref) < 1e-12


def test_kd_errors():
    with pytest.raises(ConfigError):
        kd_loss(Tensor(rand(1, 2)), rand(1, 2), [0], 1.0, 0.0)
    with pytest.raises(ContractError):
        kd_loss(Tensor(rand(2, 3)), rand(2, 3), [0, 3], 0.5)


def test_kd_properties():
    s, t = rand(4, 5), rand(4, 5, seed=1)
    labels = np.array([0, 1, 2, 3])
    base = kd_loss(Tensor(s), t, labels, 0.3, 2.0).item()
    assert abs(kd_loss(Tensor(s + 7.5), t + 7.5, labels, 0.3, 2.0).item() - base) < 1e-9
    assert kd_loss(Tensor(s), t, labels, 1.0).item() == kd_loss(Tensor(s), t, labels[::-1], 1.0).item()
    assert grad_check(lambda x: kd_loss(x, t, labels, 0.3, 2.0), s) < 1e-5


def test_kd_teacher_side_has_no_gradient():
    t = Tensor(rand(2, 3, seed=1), requires_grad=True)
    s = Tensor(rand(2, 3), requires_grad=True)
    kd_loss(s, t, [0, 1], 1.0).backward()
    assert s.grad is not None and t.grad is None


# -- layer selection -----------------------------------------------------------------

TABLE = {
    "shallow": ([1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 6]),
    "deep": ([19, 20, 21, 22, 23, 24], [7, 8, 9, 10, 11, 12]),
    "shallow_deep": ([1, 2, 3, 22, 23, 24], [1, 2, 3, 10, 11, 12]),
    "shallow_medium_deep": ([1, 2, 12, 13, 23, 24], [1, 2, 6, 7, 11, 12]),
    "uniform": ([4, 8, 12, 16, 20, 24], [2, 4, 6, 8, 10, 12]),
}


@pytest.mark.parametrize("scheme", sorted(TABLE))
def test_schemes_for_24_to_12(scheme):
    pairing = select_layers(scheme, 24, 12, 6)
    assert list(pairing.teacher_layers) == TABLE[scheme][0]
    assert list(pairing.student_layers) == TABLE[scheme][1]


def test_default_first_four_last_four():
    pairing = select_layers("shallow_deep", 12, 12, 8)
    assert pairing.student_layers == (1, 2, 3, 4, 9, 10, 11, 12)


def test_equal_depth_shallow_is_identity():
    assert select_layers("shallow", 5, 5, 5).pairs == tuple((i, i) for i in range(1, 6))


def test_uniform_rounds_half_up_for_uneven_depths():
    assert select_layers("uniform", 6, 3, 2).teacher_layers == (3, 6)
    assert select_layers("uniform", 7, 7, 2).student_layers == (4, 7)


def test_layer_selection_errors():
    with pytest.raises(ConfigError):
        select_layers("middle", 12, 12, 4)
    with pytest.raises(ConfigError):
        select_layers("shallow", 12, 3, 4)
    with pytest.raises(ConfigError):
        LayerPairing(((1, 2), (2, 1))).validate(4, 4)
    with pytest.raises(ConfigError):
        LayerPairing(((5, 1),)).validate(4, 4)


def test_explicit_pairing_in_config():
    cfg = DistillConfig(layer_scheme=[[2, 1], [4, 2]])
    assert O.resolve_pairing(cfg, 4, 2).pairs == ((2, 1), (4, 2))


# -- lambda ----------------------------------------------------------------------

def test_resolve_lambda():
    assert resolve_lambda(47e6, 5e6) == 1.0
    assert resolve_lambda(12e6, 22e6) == 0.5
    assert resolve_lambda(1, 2, override=0.3) == 0.3


@pytest.mark.parametrize("kw", [dict(lam=1.5), dict(tau=0), dict(alpha=-1), dict(k=0), dict(layer_scheme="x"),
                                dict(optimizer="rmsprop"), dict(steps=-1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DistillConfig(**kw)


# -- total loss -----------------------------------------------------------------------

def test_no_manifold_weights_gives_kd(small_data):
    teacher, student = VisionTransformer(small_vit(seed=1)), VisionTransformer(small_vit(seed=2))
    cfg = DistillConfig(alpha=0, beta=0, gamma=0, layer_count=2)
    imgs, labels = small_data.train_images[:4], small_data.train_labels[:4]
    total, parts = total_loss(imgs, labels, student, teacher, cfg, lam=1.0)
    ref = kd_loss(student(imgs).logits, teacher(imgs).logits.data, labels, 1.0).item()
    assert total.item() == ref and parts["kd"] == ref


def test_self_distillation_fixed_point(small_data):
    teacher = VisionTransformer(small_vit(seed=4))
    cfg = DistillConfig(layer_count=2, k=8)
    total, _ = total_loss(small_data.train_images[:4], small_data.train_labels[:4], teacher.copy(), teacher, cfg,
                          lam=1.0)
    assert abs(total.item()) < 1e-12


def test_total_is_kd_plus_decoupled(small_data):
    teacher, student = VisionTransformer(small_vit(seed=1)), VisionTransformer(small_vit(seed=2))
    cfg = DistillConfig(layer_scheme=[[2, 1]], k=6)
    imgs, labels = small_data.train_images[:4], small_data.train_labels[:4]
    idx = M.sample_indices(4, 4, 6, 0)
    total, parts = total_loss(imgs, labels, student, teacher, cfg, lam=0.5, indices=idx)
    s_out, t_out = student(imgs, taps=(1,)), teacher(imgs, taps=(2,))
    kd = kd_loss(s_out.logits, t_out.logits.data, labels, 0.5).item()
    mf, _ = M.decoupled_loss(s_out.taps[1], t_out.taps[2], 4.0, 0.1, 0.2, idx)
    assert abs(total.item() - (kd + mf.item())) < 1e-12
    assert set(parts) >= {"kd", "intra", "inter", "random", "t2_s1/intra", "total"}


def test_total_gradient_wrt_student_features_and_logits():
    b, n, d, c = 2, 3, 4, 3
    f_t = rand(b, n, d, seed=1)
    t_logits, labels = rand(b, c, seed=2), np.array([0, 2])
    idx = np.array([0, 3, 5, 1])

    def total(x):
        logits, feats = x[:b * c].reshape(b, c), x[b * c:].reshape(b, n, d)
        return kd_loss(logits, t_logits, labels, 0.5) + M.decoupled_loss(feats, f_t, 4, 0.1, 0.2, idx)[0]

    assert grad_check(total, rand(b * c + b * n * d, seed=3)) < 1e-5


def test_merge_mismatch_names_the_pair(small_data):
    teacher = VisionTransformer(small_vit(image_size=(8, 8), patch_size=2, seed=1))
    student = VisionTransformer(small_vit(seed=2))
    cfg = DistillConfig(layer_scheme=[[2, 1]], k=4)
    with pytest.raises(ShapeError, match=r"teacher 2, student 1"):
        total_loss(small_data.train_images[:2], small_data.train_labels[:2], student, teacher, cfg, lam=1.0)
    cfg = DistillConfig(layer_scheme=[[2, 1]], k=4, merge=[2, 2])
    total, _ = total_loss(small_data.train_images[:2], small_data.train_labels[:2], student, teacher, cfg,
                          lam=1.0)
    assert math.isfinite(total.item())


def test_shared_indices_flag(small_data):
    teacher, student = VisionTransformer(small_vit(seed=1)), VisionTransformer(small_vit(seed=2))
    imgs, labels = small_data.train_images[:4], small_data.train_labels[:4]
    pairing = LayerPairing(((1, 1), (2, 2)))
    draws = {}
    for share in (False, True):
        cfg = DistillConfig(alpha=0, beta=0, gamma=1, k=3, share_indices=share)
        obj = compute_objective(imgs, labels, student, teacher, cfg, 1.0, pairing, np.random.default_rng(0))
        draws[share] = obj.breakdown
    assert draws[True]["t1_s1/random"] != draws[False]["t1_s1/random"] or \
        draws[True]["t2_s2/random"] != draws[False]["t2_s2/random"]


# -- training loop ----------------------------------------------------------------------

def test_zero_steps_leaves_student_untouched(small_data, tmp_path):
    teacher = VisionTransformer(small_vit(seed=1))
    student = VisionTransformer(small_vit(seed=2))
    before = student.checksum()
    _, history = distill(teacher, student, small_data, DistillConfig(steps=0, layer_count=2),
                         checkpoint_path=tmp_path / "s.npz")
    assert history == [] and student.checksum() == before
    assert not (tmp_path / "s.npz").exists()


def test_teacher_is_never_updated(small_data):
    teacher = VisionTransformer(small_vit(seed=1))
    before = teacher.checksum()
    distill(teacher, VisionTransformer(small_vit(seed=2)), small_data,
            DistillConfig(steps=3, layer_count=2, k=8, batch_size=8))
    assert teacher.checksum() == before


def test_fixed_seed_metrics_are_bit_identical(small_data, tmp_path):
    teacher = VisionTransformer(small_vit(seed=1))
    cfg = DistillConfig(steps=6, layer_count=2, k=8, batch_size=8, log_every=2, eval_every=3)
    for name in ("a", "b"):
        distill(teacher, small_vit(seed=2), small_data, cfg, metrics_path=tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    records = load_metrics(tmp_path / "a.jsonl")
    assert [r["step"] for r in records] == [2, 3, 4, 6]
    assert "eval_accuracy" in records[1] and "eval_accuracy" not in records[0]


def test_training_loss_decreases_on_separable_task(tmp_path):
    data = generate_dataset(DatasetSpec(num_classes=4, image_size=(8, 8), train_samples=128, eval_samples=32,
                                        teacher_samples=0, noise=0.0, corruption=0.0, seed=1))
    teacher = VisionTransformer(small_vit(seed=1))
    cfg = DistillConfig(steps=200, layer_count=2, k=16, batch_size=16, log_every=1, eval_every=1000,
                        lam=0.5)
    _, history = distill(teacher, small_vit(seed=2), data, cfg)
    first = np.mean([h["total"] for h in history[:10]])
    last = np.mean([h["total"] for h in history[-10:]])
    assert last < first


def test_supervised_training_learns(small_data):
    model, history = train_supervised(small_vit(seed=0), small_data,
                                      DistillConfig(steps=60, batch_size=16, log_every=60, eval_every=60))
    assert history[-1]["kd"] < math.log(4)


def test_forward_divergence_aborts_with_step_and_term(small_data, tmp_path, monkeypatch):
    teacher = VisionTransformer(small_vit(seed=1))
    calls = {"n": 0}
    real = M.decoupled_terms

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 5:
            raise DivergenceError("inter term: non-finite", term="inter")
        return real(*args, **kw)

    monkeypatch.setattr(M, "decoupled_terms", flaky)
    cfg = DistillConfig(steps=10, layer_scheme=[[2, 2]], k=8, batch_size=8, log_every=1)
    with pytest.raises(DivergenceError) as info:
        distill(teacher, small_vit(seed=2), small_data, cfg, metrics_path=tmp_path / "m.jsonl")
    err = info.value
    assert err.step == 5 and err.term == "inter"
    assert "step 5" in str(err) and "inter" in str(err) and "kd=" in str(err)
    records = load_metrics(tmp_path / "m.jsonl")
    assert [r["step"] for r in records] == [1, 2, 3, 4]


def test_non_finite_gradient_is_blamed_on_a_term(small_data, monkeypatch):
    teacher = VisionTransformer(small_vit(seed=1))
    monkeypatch.setattr(O, "_grads_finite", lambda model: False)
    with pytest.raises(DivergenceError) as info:
        distill(teacher, small_vit(seed=2), small_data,
                DistillConfig(steps=2, layer_scheme=[[1, 1]], k=8, batch_size=8))
    assert info.value.step == 1 and info.value.term in ("kd", "intra", "inter", "random")
    assert "grad norms" in str(info.value)


def test_class_count_mismatch_rejected(small_data):
    with pytest.raises(ConfigError):
        distill(VisionTransformer(small_vit(num_classes=5)), small_vit(), small_data, DistillConfig(steps=0))
