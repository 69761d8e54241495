import numpy as np
import pytest

from helpers import rel_err
from ltdistill import diffcore, models
from ltdistill.datasets import LabeledSet, ToySpec, gen_toy, subsample_longtail
from ltdistill.distill import (
    DistillConfig,
    SyntheticSet,
    build_matching_graph,
    distill,
    init_synthetic,
    load_synthetic,
    outer_step,
    per_class_image_grad_norms,
    sample_segments,
    save_synthetic,
    synthetic_class_targets,
    write_trace,
)
from ltdistill.experts import (
    TrainConfig,
    Trajectory,
    train_classifier_expert,
    train_representation_expert,
)
from ltdistill.losses import match_loss, softmax_rows
from ltdistill.models import MlpSpec, flatten, forward_numpy, init_params


SPEC = MlpSpec((4, 6, 3))


def _longtail_toy(counts=(12, 6, 3), seed=0, noise=0.8):
    pool = gen_toy(ToySpec(num_classes=3, dim=4, separation=3.0, noise=noise,
                           seed=seed), max(counts))
    return subsample_longtail(pool, np.array(counts), seed=seed + 1)


def _fake_trajectories(epochs_rep=4, epochs_cls=3):
    """Synthetic trajectories with a shared classifier-branch backbone."""
    rep = Trajectory("representation", SPEC,
                     [init_params(SPEC, s) for s in range(epochs_rep + 1)])
    cls_snaps = [init_params(SPEC, 50 + s) for s in range(epochs_cls + 1)]
    base = cls_snaps[0]
    for snap in cls_snaps[1:]:
        for i in range(len(snap.layers) - 1):
            snap.layers[i] = (base.layers[i][0].copy(), base.layers[i][1].copy())
    cls = Trajectory("classifier", SPEC, cls_snaps)
    return rep, cls


def _synthetic(n_per=2, c=3, d=4, seed=0, lr=0.08):
    rng = np.random.default_rng(seed)
    return SyntheticSet(
        rng.standard_normal((n_per * c, d)),
        rng.standard_normal((n_per * c, c)),
        np.repeat(np.arange(c), n_per),
        inner_lr=lr,
    )


def _cfg(**kw):
    base = dict(ipc=2, outer_steps=10, n_rep=2, n_cls=2, m_rep=2, m_cls=2,
                t_rep=1, t_plus_rep=2, t_cls=0, t_plus_cls=1,
                lambda_rep=1.0, lambda_cls=0.7, lr_images=0.1,
                lr_label_logits=0.1, lr_inner_lr=1e-3, inner_lr_init=0.08)
    base.update(kw)
    return DistillConfig(**base)


def test_synthetic_set_validation():
    with pytest.raises(ValueError, match="ascending"):
        SyntheticSet(np.zeros((2, 3)), np.zeros((2, 2)), np.array([1, 0]), 0.1)
    with pytest.raises(ValueError, match="inner_lr"):
        _synthetic(lr=0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(t_rep=5, t_plus_rep=2)
    with pytest.raises(ValueError):
        _cfg(lambda_rep=0.0, lambda_cls=0.0)
    with pytest.raises(ValueError):
        _cfg(tail_strategy="duplicate")
    cfg = _cfg(lr_images=0.0)  # zero outer step sizes are allowed
    assert cfg.lr_images == 0.0


def test_class_targets_balanced_and_longtail():
    d = _longtail_toy(counts=(12, 6, 3))
    assert np.array_equal(synthetic_class_targets(d, _cfg()), [2, 2, 2])
    lt = synthetic_class_targets(d, _cfg(distilled_distribution="longtail"))
    assert lt.sum() == 6 and (lt >= 1).all()
    assert lt[0] >= lt[1] >= lt[2]


def test_init_synthetic_softmax_example():
    # classifier logits (2,0,0) -> soft label (0.7870, 0.1065, 0.1065)
    soft = softmax_rows(np.array([[2.0, 0.0, 0.0]]))
    assert soft[0] == pytest.approx([0.7870, 0.1065, 0.1065], abs=5e-5)


def test_init_synthetic_uses_expert_logits_and_exact_class():
    d = _longtail_toy(counts=(8, 5, 2))
    _, cls = _fake_trajectories()
    cfg = _cfg(ipc=2)
    syn = init_synthetic(d, cls, cfg)
    assert np.array_equal(syn.class_counts, [2, 2, 2])
    assert syn.inner_lr == cfg.inner_lr_init
    # label logits are the classifier expert's final logits on those images
    want = forward_numpy(cls.snapshots[-1], syn.images)
    assert np.allclose(syn.label_logits, want, atol=1e-12)
    # class with exactly IPC samples: all of them selected once
    d2 = _longtail_toy(counts=(8, 5, 2))
    syn2 = init_synthetic(d2, cls, _cfg(ipc=2, tail_strategy="inherent"))
    tail_pool = {tuple(r) for r in d2.features[d2.labels == 2]}
    tail_chosen = {tuple(r) for r in syn2.images[syn2.assigned_class == 2]}
    assert tail_chosen == tail_pool


def test_init_synthetic_tail_strategies():
    d = _longtail_toy(counts=(8, 5, 2))
    _, cls = _fake_trajectories()
    inherent = init_synthetic(d, cls, _cfg(ipc=4, tail_strategy="inherent"))
    assert np.array_equal(inherent.class_counts, [4, 4, 2])
    over = init_synthetic(d, cls, _cfg(ipc=4, tail_strategy="oversample"))
    assert np.array_equal(over.class_counts, [4, 4, 4])
    tail_pool = {tuple(r) for r in d.features[d.labels == 2]}
    tail_imgs = [tuple(r) for r in over.images[over.assigned_class == 2]]
    assert set(tail_imgs) == tail_pool  # every real sample appears
    noise = init_synthetic(d, cls, _cfg(ipc=4, tail_strategy="noise",
                                        noise_label_magnitude=6.0))
    assert np.array_equal(noise.class_counts, [4, 4, 4])
    tail_logits = noise.label_logits[noise.assigned_class == 2]
    filled = [row for row in tail_logits if row.max() == 6.0 and row[2] == 6.0]
    assert len(filled) == 2  # two noise fills carry the one-hot-scaled logit


def test_init_synthetic_zero_class_fails_inherent():
    feats = np.random.default_rng(0).standard_normal((6, 4))
    labels = np.array([0, 0, 0, 1, 1, 1])
    d = LabeledSet.from_arrays(feats, labels, num_classes=3)
    _, cls = _fake_trajectories()
    with pytest.raises(ValueError, match="class 2"):
        init_synthetic(d, cls, _cfg(ipc=2, tail_strategy="inherent"))


def test_sample_segments_degenerate_bounds():
    rep, cls = _fake_trajectories()
    cfg = _cfg(t_minus_rep=2, t_rep=2, t_plus_rep=2, t_minus_cls=1, t_cls=1,
               t_plus_cls=1)
    rng = np.random.default_rng(0)
    for k in range(5):
        assert sample_segments(cfg, rep, cls, k, rng) == (2, 1)


def test_sample_segments_cap_schedule_endpoint():
    rep, cls = _fake_trajectories(epochs_rep=10)
    cfg = _cfg(outer_steps=5, t_minus_rep=0, t_rep=3, t_plus_rep=8, m_rep=2)
    rng = np.random.default_rng(1)
    draws0 = {sample_segments(cfg, rep, cls, 0, rng)[0] for _ in range(300)}
    assert max(draws0) == 3  # cap equals t at step 0
    draws_last = {sample_segments(cfg, rep, cls, 4, rng)[0] for _ in range(500)}
    assert max(draws_last) == 8  # cap reaches t_plus at the final step


def test_sample_segments_uniform_histogram():
    from scipy import stats

    rep, cls = _fake_trajectories(epochs_rep=12)
    cfg = _cfg(outer_steps=1, t_minus_rep=2, t_rep=9, t_plus_rep=9, m_rep=2)
    rng = np.random.default_rng(123)
    draws = np.array([sample_segments(cfg, rep, cls, 0, rng)[0] for _ in range(10_000)])
    observed = np.bincount(draws - 2, minlength=8)
    assert stats.chisquare(observed).pvalue > 0.01


def test_sample_segments_bound_violation():
    rep, cls = _fake_trajectories(epochs_rep=4)
    cfg = _cfg(t_plus_rep=4, m_rep=2)  # 4 > 4-2
    with pytest.raises(ValueError, match="t_plus_rep"):
        sample_segments(cfg, rep, cls, 0, np.random.default_rng(0))


def test_zero_inner_steps_student_equals_start():
    rep, cls = _fake_trajectories()
    syn = _synthetic()
    counts = np.array([9, 4, 2])
    cfg = _cfg(n_rep=0, n_cls=0, lambda_cls=0.0)
    graph, _, total, loss_rep, _ = build_matching_graph(syn, rep, cls, 1, 0, counts, cfg)
    start, end = rep.snapshots[1], rep.snapshots[3]
    want = match_loss(flatten(start, "backbone"), flatten(end, "backbone"),
                      flatten(start, "backbone"))
    assert loss_rep == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(1.0)  # student at segment start


def test_uniform_counts_reduce_to_plain_ce_unroll():
    """With uniform counts the unroll must equal a hand-built CE unroll."""
    rep, cls = _fake_trajectories()
    syn = _synthetic(seed=5)
    cfg = _cfg(n_rep=3, lambda_cls=0.0)
    counts = np.array([7, 7, 7])
    graph, _, total, _, _ = build_matching_graph(syn, rep, cls, 1, 0, counts, cfg)

    # independent construction: plain soft-CE inner gradient, numpy unroll
    start = rep.snapshots[1]
    params = [(w.copy(), b.copy()) for w, b in start.layers]
    targets = softmax_rows(syn.label_logits)
    n = len(syn.images)
    for _ in range(3):
        acts = [syn.images]
        pre = []
        h = syn.images
        for i, (w, b) in enumerate(params):
            a = h @ w + b
            pre.append(a)
            if i < len(params) - 1:
                h = np.maximum(a, 0.0)
                acts.append(h)
        p = softmax_rows(pre[-1])
        d_act = (p - targets) / n
        new_params = []
        grads = [None] * len(params)
        for li in reversed(range(len(params))):
            w, b = params[li]
            grads[li] = (acts[li].T @ d_act, d_act.sum(axis=0))
            if li > 0:
                d_act = (d_act @ w.T) * (pre[li - 1] > 0)
        for (w, b), (gw, gb) in zip(params, grads):
            new_params.append((w - syn.inner_lr * gw, b - syn.inner_lr * gb))
        params = new_params
    student = models.ParamSet(params)
    end = rep.snapshots[3]
    want = match_loss(flatten(student, "backbone"), flatten(end, "backbone"),
                      flatten(start, "backbone"))
    assert graph.value(total).item() == pytest.approx(want, rel=1e-12)


def test_gradient_fidelity_through_unroll():
    """Joint-loss gradients w.r.t. pixels, label logits, inner_lr vs FD."""
    rep, cls = _fake_trajectories()
    syn = _synthetic(seed=3)
    counts = np.array([9, 4, 2])
    cfg = _cfg(n_rep=2, n_cls=2)

    def loss_at(s):
        g, _, total, _, _ = build_matching_graph(s, rep, cls, 1, 0, counts, cfg)
        return g.value(total).item()

    graph, nodes, total, _, _ = build_matching_graph(syn, rep, cls, 1, 0, counts, cfg)
    grads = diffcore.backward(graph, total)
    step = 1e-5
    rng = np.random.default_rng(0)
    for _ in range(6):
        i = int(rng.integers(syn.images.shape[0]))
        j = int(rng.integers(syn.images.shape[1]))
        s2 = syn.copy(); s2.images[i, j] += step; fp = loss_at(s2)
        s2 = syn.copy(); s2.images[i, j] -= step; fm = loss_at(s2)
        fd = (fp - fm) / (2 * step)
        assert rel_err(grads[nodes.images][i, j], fd) <= 1e-4
    for _ in range(6):
        i = int(rng.integers(syn.label_logits.shape[0]))
        j = int(rng.integers(syn.label_logits.shape[1]))
        s2 = syn.copy(); s2.label_logits[i, j] += step; fp = loss_at(s2)
        s2 = syn.copy(); s2.label_logits[i, j] -= step; fm = loss_at(s2)
        fd = (fp - fm) / (2 * step)
        assert rel_err(grads[nodes.label_logits][i, j], fd) <= 1e-4
    s2 = syn.copy(); s2.inner_lr += step; fp = loss_at(s2)
    s2 = syn.copy(); s2.inner_lr -= step; fm = loss_at(s2)
    assert rel_err(grads[nodes.inner_lr].item(), (fp - fm) / (2 * step)) <= 1e-4


def test_outer_step_zero_rates_keep_syn():
    rep, cls = _fake_trajectories()
    syn = _synthetic()
    counts = np.array([9, 4, 2])
    cfg = _cfg(lr_images=0.0, lr_label_logits=0.0, lr_inner_lr=0.0)
    new_syn, record = outer_step(syn, rep, cls, counts, cfg,
                                 np.random.default_rng(0))
    assert np.array_equal(new_syn.images, syn.images)
    assert np.array_equal(new_syn.label_logits, syn.label_logits)
    assert new_syn.inner_lr == syn.inner_lr
    assert record.loss_total > 0.0


def test_outer_step_preserves_class_composition():
    rep, cls = _fake_trajectories()
    syn = _synthetic()
    counts = np.array([9, 4, 2])
    new_syn, _ = outer_step(syn, rep, cls, counts, _cfg(),
                            np.random.default_rng(0))
    assert np.array_equal(new_syn.assigned_class, syn.assigned_class)
    assert not np.array_equal(new_syn.images, syn.images)
    # soft labels remain distributions by construction
    assert new_syn.soft_labels().sum(axis=1) == pytest.approx(np.ones(6))


def test_outer_step_degenerate_segment_fails_after_resample():
    constant = init_params(SPEC, 0)
    rep = Trajectory("representation", SPEC, [constant.copy() for _ in range(5)])
    _, cls = _fake_trajectories()
    syn = _synthetic()
    cfg = _cfg(lambda_cls=0.0)
    with pytest.raises(ValueError, match="degenerate"):
        outer_step(syn, rep, cls, np.array([9, 4, 2]), cfg,
                   np.random.default_rng(0))


def test_distill_deterministic_and_zero_steps():
    d = _longtail_toy()
    rep_cfg = TrainConfig(epochs=4, lr=0.1, seed=1)
    rep = train_representation_expert(d, SPEC, rep_cfg)
    from ltdistill.datasets import balanced_resample
    from ltdistill.experts import MaxNormConfig

    b = balanced_resample(d, "undersample", seed=2)
    cls = train_classifier_expert(rep, b, TrainConfig(epochs=3, lr=0.1, seed=3),
                                  MaxNormConfig(1.0))
    cfg = _cfg(outer_steps=0, t_rep=1, t_plus_rep=2, m_rep=1, t_cls=0,
               t_plus_cls=1, m_cls=1)
    syn0, records = distill(d, [rep], [cls], cfg)
    assert records == []
    want_init = init_synthetic(d, cls, cfg)
    assert np.array_equal(syn0.images, want_init.images)

    cfg5 = _cfg(outer_steps=5, t_rep=1, t_plus_rep=2, m_rep=1, t_cls=0,
                t_plus_cls=1, m_cls=1)
    a, rec_a = distill(d, [rep], [cls], cfg5)
    b2, rec_b = distill(d, [rep], [cls], cfg5)
    assert np.array_equal(a.images, b2.images)
    assert np.array_equal(a.label_logits, b2.label_logits)
    assert a.inner_lr == b2.inner_lr
    assert [r.loss_total for r in rec_a] == [r.loss_total for r in rec_b]


def test_synthetic_save_load_roundtrip(tmp_path):
    syn = _synthetic(seed=9)
    path = tmp_path / "syn.bin"
    save_synthetic(path, syn, fingerprint="abc")
    again = load_synthetic(path)
    assert np.array_equal(again.images, syn.images)
    assert np.array_equal(again.label_logits, syn.label_logits)
    assert np.array_equal(again.assigned_class, syn.assigned_class)
    assert again.inner_lr == syn.inner_lr


def test_trace_csv_format(tmp_path):
    rep, cls = _fake_trajectories()
    syn = _synthetic()
    new_syn, record = outer_step(syn, rep, cls, np.array([9, 4, 2]), _cfg(),
                                 np.random.default_rng(0))
    path = tmp_path / "trace.csv"
    write_trace(path, [record], fingerprint="ff00")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_fingerprint=ff00"
    assert lines[1] == "outer_step,t_rep,t_cls,loss_rep,loss_cls,loss_total,inner_lr"
    assert len(lines) == 3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dam_relieves_tail_image_gradient_pressure(seed):
    """Under plain CE matching against a biased expert, tail-class images
    absorb outsized distillation gradients (the bias being written into
    them). The count-reweighted loss shrinks the tail-to-head ratio of
    per-class image-gradient norms, keeping tail images intact."""
    counts = (48, 21, 9)
    d = _longtail_toy(counts=counts, noise=2.0, seed=seed)
    rep = train_representation_expert(
        d, SPEC, TrainConfig(epochs=12, lr=0.1, seed=seed)
    )
    from ltdistill.datasets import balanced_resample
    from ltdistill.experts import MaxNormConfig

    b = balanced_resample(d, "undersample", seed=seed + 1)
    cls = train_classifier_expert(rep, b, TrainConfig(epochs=3, lr=0.1, seed=seed + 2),
                                  MaxNormConfig(1.0))
    cfg = _cfg(ipc=3, n_rep=3, n_cls=0, lambda_cls=0.0, m_rep=2,
               t_rep=6, t_plus_rep=6)
    syn = init_synthetic(d, cls, cfg)

    def tail_to_head(count_vec):
        norms = per_class_image_grad_norms(syn, rep, cls, np.asarray(count_vec),
                                           cfg, t_rep=6, t_cls=0)
        return norms[-1] / max(norms[0], 1e-12)

    assert tail_to_head(counts) < tail_to_head((1, 1, 1))
