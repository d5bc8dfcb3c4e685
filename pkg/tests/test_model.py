import copy
import math

import numpy as np
import pytest

from dcn2.embeddings import CollisionWeightedTable
from dcn2.errors import ConfigError
from dcn2.features import RecordBatch
from dcn2.model import Model, ModelConfig, build, complexity_estimate, load_model, save_model
from dcn2.layers import lowrank_stack_parameters, onlydense_stack_parameters


def toy_config(**kw):
    base = dict(
        variant="dcn2",
        hash_bits=4,
        dim=2,
        field_kinds=("categorical", "categorical"),
        cross_layers=1,
        proj_dim=2,
        phi=1.5,
        deep_layers=(3,),
        learning_rate=0.01,
        beta1=0.9,
        batch_size=4,
        seed=5,
        dtype="f64",
    )
    base.update(kw)
    return ModelConfig(**base)


def cat_batch(rows, labels):
    rows = np.asarray(rows, dtype=np.int64)
    return RecordBatch(
        labels=np.asarray(labels, dtype=np.int8),
        cat=rows,
        cont_vals=np.zeros((len(rows), 0), dtype=np.float32),
        cont_idx=np.zeros(0, dtype=np.int64),
        mv=[],
        mv_valid=[],
    )


def scalar_oracle_logit(model: Model, cat_row) -> float:
    """Straight-line pure-python forward for a categorical-only dcn2 model."""
    cfg = model.config
    d, n = cfg.dim, cfg.n_fields
    data = model.table.data.tolist()
    weighted = model.table.weighted

    emb = []
    for idx in cat_row:
        row = data[idx]
        w = row[d] if weighted else 1.0
        emb.append([row[k] * w for k in range(d)])
    x = [v for e in emb for v in e]

    for layer in model.cross:
        W = layer.W.tolist()
        b0 = layer.b0.tolist()
        pre = [sum(W[r][c] * x[c] for c in range(len(x))) + b0[r] for r in range(len(x))]
        xt = [p if p > 0 else 0.0 for p in pre]
        x = [xt[r] * x[r] * layer.phi for r in range(len(x))]

    x0 = [v for e in emb for v in e]
    deep_out = []
    if model.deep is not None:
        h = x0
        for i, (W, b) in enumerate(zip(model.deep.weights, model.deep.biases)):
            Wl, bl = W.tolist(), b.tolist()
            h = [sum(Wl[r][c] * h[c] for c in range(len(h))) + bl[r] for r in range(len(Wl))]
            if i < model.deep.n_layers - 1:
                h = [v if v > 0 else 0.0 for v in h]
        deep_out = h

    concat = x + deep_out
    y_dcn = sum(hw * cv for hw, cv in zip(model.head_w.tolist(), concat)) \
        if model.head_w is not None else 0.0

    y_sk = 0.0
    if model.sim is not None:
        wv = model.sim.w.tolist()
        for i in range(n):
            for j in range(n):
                dot = sum(emb[i][k] * emb[j][k] for k in range(d))
                y_sk += wv[i * n + j] * dot
        y_sk += float(model.sim.b)

    return y_dcn + y_sk + float(model.b_f)


def scalar_oracle_predict(model, cat_row) -> float:
    return 1.0 / (1.0 + math.exp(-scalar_oracle_logit(model, cat_row)))


class TestBuild:
    def test_deterministic_first_prediction(self):
        batch = cat_batch([[3, 9]], [1])
        a = build(toy_config()).predict_batch(batch)
        b = build(toy_config()).predict_batch(batch)
        np.testing.assert_array_equal(a, b)

    def test_variant_wiring(self):
        dcn2 = build(toy_config())
        assert dcn2.table.weighted and dcn2.sim is not None and dcn2.head_w is not None
        dcnv2 = build(toy_config(variant="dcnv2"))
        assert not dcnv2.table.weighted and dcnv2.sim is None
        simk = build(toy_config(variant="dcn2_simk"))
        assert simk.table.weighted and simk.head_w is None and not simk.cross \
            and simk.deep is None

    def test_config_error_lists_violations(self):
        cfg = toy_config(variant="nope", hash_bits=0, dim=0)
        with pytest.raises(ConfigError) as err:
            build(cfg)
        msg = str(err.value)
        assert "variant" in msg and "hash_bits" in msg and "dim" in msg

    def test_lr_zero_is_structurally_valid(self):
        build(toy_config(learning_rate=0.0))

    def test_range_checks_are_separate(self):
        cfg = toy_config()
        assert cfg.range_violations()          # toy dims are out of protocol range
        assert not cfg.structural_violations()


class TestPredict:
    def test_all_zero_model_predicts_half(self):
        model = build(toy_config())
        model.table.data[:] = 0.0
        model.head_w[:] = 0.0
        model.b_f[...] = 0.0
        batch = cat_batch([[1, 2], [5, 15]], [0, 1])
        np.testing.assert_array_equal(model.predict_batch(batch), [0.5, 0.5])

    def test_purity(self):
        model = build(toy_config())
        batch = cat_batch([[3, 7]], [1])
        p1 = model.predict_batch(batch)
        p2 = model.predict_batch(batch)
        np.testing.assert_array_equal(p1, p2)

    @pytest.mark.parametrize("variant", ["dcn2", "dcnv2", "dcn2_simk"])
    def test_probability_range(self, variant):
        model = build(toy_config(variant=variant))
        rng = np.random.default_rng(0)
        batch = cat_batch(rng.integers(0, 16, size=(32, 2)), rng.integers(0, 2, 32))
        p = model.predict_batch(batch)
        assert (p > 0).all() and (p < 1).all()

    def test_matches_scalar_oracle(self):
        model = build(toy_config(cross_layers=2))
        # move things off their init values so the oracle sees generic state
        rng = np.random.default_rng(1)
        model.table.data[:, -1] = rng.uniform(0.5, 1.5, model.table.capacity)
        model.sim.w[:] = rng.standard_normal(model.sim.w.size) * 0.3
        model.sim.b[...] = 0.2
        model.b_f[...] = -0.4
        for row in ([0, 1], [3, 14], [7, 7], [15, 2]):
            got = model.predict(_single_record(row))
            want = scalar_oracle_predict(model, row)
            assert got == pytest.approx(want, abs=1e-10)

    def test_predict_record_matches_batch(self):
        model = build(toy_config())
        batch = cat_batch([[4, 11]], [0])
        assert model.predict_batch(batch)[0] == model.predict(_single_record([4, 11]))


def _single_record(row):
    from dcn2.features import FeatureRecord
    return FeatureRecord(
        label=0,
        cat_indices=np.asarray(row, dtype=np.int64),
        cont_values=np.zeros(0),
        cont_indices=np.zeros(0, dtype=np.int64),
        mv_indices=[],
        mv_valid=np.zeros(0, dtype=np.int64),
    )


class TestStructuralIdentities:
    def test_zero_sim_layer_leaves_predictions_unchanged(self):
        model = build(toy_config())
        assert not model.sim.w.any() and not model.sim.b.any()
        stripped = copy.deepcopy(model)
        stripped.sim = None
        rng = np.random.default_rng(2)
        batch = cat_batch(rng.integers(0, 16, (16, 2)), rng.integers(0, 2, 16))
        np.testing.assert_array_equal(model.predict_batch(batch),
                                      stripped.predict_batch(batch))

    def test_fresh_collision_weights_are_transparent(self):
        model = build(toy_config())
        plain = copy.deepcopy(model)
        plain.table = CollisionWeightedTable(model.table.data.copy(), model.table.omega,
                                             model.table.seed, weighted=False)
        rng = np.random.default_rng(3)
        batch = cat_batch(rng.integers(0, 16, (16, 2)), rng.integers(0, 2, 16))
        np.testing.assert_array_equal(model.predict_batch(batch),
                                      plain.predict_batch(batch))


class TestTrainStep:
    def test_memorization_sanity(self):
        model = build(toy_config(learning_rate=0.01, beta1=0.0))
        batch = cat_batch([[3, 9]] * 4, [1, 1, 1, 1])
        losses = [model.train_step(batch) for _ in range(51)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses[:5]

    def test_lr_zero_is_a_no_op(self):
        model = build(toy_config(learning_rate=0.0))
        snap = _snapshot(model)
        batch = cat_batch([[3, 9], [2, 1]], [1, 0])
        l1 = model.train_step(batch)
        l2 = model.train_step(batch)
        assert l1 == l2
        for name, before in snap.items():
            np.testing.assert_array_equal(before, _snapshot(model)[name])

    def test_every_group_changes_after_one_step(self):
        for variant in ("dcn2", "dcnv2", "dcn2_simk"):
            model = build(toy_config(variant=variant, learning_rate=0.01))
            snap = _snapshot(model)
            # unbalanced labels so no bias group sees an exactly-zero gradient
            batch = cat_batch([[3, 9], [2, 1], [3, 1], [9, 9]], [1, 0, 1, 1])
            model.train_step(batch)
            after = _snapshot(model)
            for name in snap:
                assert not np.array_equal(snap[name], after[name]), (variant, name)
            # dcn2_simk's zero-init sim weights give the table a zero gradient
            # on the very first step; by step two it must move as well
            model.train_step(batch)
            touched = np.unique([3, 9, 2, 1])
            assert not np.array_equal(model.table.data[touched],
                                      _fresh_like(model)[touched]), variant

    def test_one_step_matches_hand_unrolled_adam(self):
        cfg = toy_config(learning_rate=0.02, beta1=0.9)
        model = build(cfg)
        rng = np.random.default_rng(4)
        model.table.data[:, -1] = rng.uniform(0.6, 1.4, model.table.capacity)
        model.sim.w[:] = 0.2 * rng.standard_normal(model.sim.w.size)
        rows = [[3, 9], [2, 9]]
        labels = [1, 0]
        baseline = copy.deepcopy(model)

        def batch_loss(m):
            total = 0.0
            for row, y in zip(rows, labels):
                p = scalar_oracle_predict(m, row)
                total += -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
            return total / len(rows)

        # central differences of the scalar-oracle loss, parameter by parameter
        h = 1e-6
        fd_grads = {}
        for name, param in baseline.dense_param_items():
            g = np.zeros_like(param, dtype=np.float64)
            flat_p = param.reshape(-1)
            flat_g = g.reshape(-1)
            for i in range(flat_p.size):
                orig = flat_p[i]
                flat_p[i] = orig + h
                up = batch_loss(baseline)
                flat_p[i] = orig - h
                down = batch_loss(baseline)
                flat_p[i] = orig
                flat_g[i] = (up - down) / (2 * h)
            fd_grads[name] = g
        table_grad = np.zeros_like(baseline.table.data)
        for r in {3, 9, 2}:
            for c in range(baseline.table.data.shape[1]):
                orig = baseline.table.data[r, c]
                baseline.table.data[r, c] = orig + h
                up = batch_loss(baseline)
                baseline.table.data[r, c] = orig - h
                down = batch_loss(baseline)
                baseline.table.data[r, c] = orig
                table_grad[r, c] = (up - down) / (2 * h)

        def hand_adam(param, grad, lr=0.02, b1=0.9, b2=0.999, eps=1e-8):
            m_hat = (1 - b1) * grad / (1 - b1)   # first step from fresh state
            v_hat = (1 - b2) * grad ** 2 / (1 - b2)
            return param - lr * m_hat / (np.sqrt(v_hat) + eps)

        model.train_step(cat_batch(rows, labels))
        for name, before in [(n, p.copy()) for n, p in baseline.dense_param_items()]:
            want = hand_adam(before, fd_grads[name])
            got = dict(model.dense_param_items())[name]
            np.testing.assert_allclose(got, want, rtol=5e-3, atol=1e-7, err_msg=name)
        for r in (3, 9, 2):
            want = hand_adam(baseline.table.data[r], table_grad[r])
            np.testing.assert_allclose(model.table.data[r], want, rtol=5e-3, atol=1e-7)
        untouched = np.setdiff1d(np.arange(16), [3, 9, 2])
        np.testing.assert_array_equal(model.table.data[untouched],
                                      baseline.table.data[untouched])

    def test_nonfinite_loss_aborts(self):
        model = build(toy_config())
        model.b_f[...] = np.nan
        batch = cat_batch([[1, 2]], [1])
        with pytest.raises(Exception, match="non-finite"):
            model.train_step(batch)


def _snapshot(model):
    return {name: p.copy() for name, p in model.dense_param_items()}


def _fresh_like(model):
    return build(model.config).table.data


class TestContinuousAndMultivalueWiring:
    def _config(self, **kw):
        return toy_config(field_kinds=("categorical", "continuous", "multivalue"),
                          cross_layers=1, deep_layers=(), **kw)

    def _batch(self):
        return RecordBatch(
            labels=np.array([1, 0], dtype=np.int8),
            cat=np.array([[3], [7]], dtype=np.int64),
            cont_vals=np.array([[0.5], [-1.25]], dtype=np.float32),
            cont_idx=np.array([11], dtype=np.int64),
            mv=[np.array([[1, 2, 0], [4, 0, 0]], dtype=np.int64)],
            mv_valid=[np.array([2, 0], dtype=np.int64)],
        )

    def test_embed_matches_table_ops(self):
        model = build(self._config())
        rng = np.random.default_rng(5)
        model.table.data[:, -1] = rng.uniform(0.5, 1.5, model.table.capacity)
        batch = self._batch()
        E = model._embed(batch)
        t = model.table
        np.testing.assert_allclose(E[0, 0], t.lookup(3), rtol=1e-12)
        np.testing.assert_allclose(E[0, 1], 0.5 * t.lookup(11), rtol=1e-6)
        np.testing.assert_allclose(E[0, 2], t.lookup_multivalue(np.array([1, 2, 0]), 2),
                                   rtol=1e-12)
        np.testing.assert_allclose(E[1, 1], np.float32(-1.25) * t.lookup(11), rtol=1e-6)
        assert not E[1, 2].any()  # zero valid entries contribute nothing

    def test_pad_slot_gets_no_gradient(self):
        model = build(self._config(learning_rate=0.05))
        batch = self._batch()
        # indices 1, 2 are valid mv entries in row 0; row 1 has none, so its
        # slot index 4 and the pad index 0 must stay untouched
        before = model.table.data[[0, 4]].copy()
        model.train_step(batch)
        np.testing.assert_array_equal(model.table.data[[0, 4]], before)
        fresh = build(self._config()).table.data
        assert not np.array_equal(model.table.data[1], fresh[1])
        assert not np.array_equal(model.table.data[2], fresh[2])


class TestComplexityEstimate:
    def test_no_compression_equalizes_width_terms(self):
        cfg = toy_config(field_kinds=("categorical",) * 10, dim=8, proj_dim=8)
        report = complexity_estimate(cfg)
        assert report["onlydense_width"] == report["lowrank_width"] == 80.0

    def test_hand_case(self):
        cfg = toy_config(field_kinds=("categorical",) * 10, dim=8, proj_dim=4)
        report = complexity_estimate(cfg, onlydense_layers=1, lowrank_layers=2)
        assert report["onlydense_ops"] == 80.0       # 1 * (10 * 8)
        assert report["lowrank_ops"] == 80.0         # 2 * (10 * 8) / (8 / 4)
        assert report["dominates"]

    def test_doubling_fields_scales_both_sides(self):
        cfg10 = toy_config(field_kinds=("categorical",) * 10, dim=8, proj_dim=4)
        cfg20 = toy_config(field_kinds=("categorical",) * 20, dim=8, proj_dim=4)
        r10 = complexity_estimate(cfg10, onlydense_layers=2, lowrank_layers=3)
        r20 = complexity_estimate(cfg20, onlydense_layers=2, lowrank_layers=3)
        assert r20["onlydense_ops"] == 2 * r10["onlydense_ops"]
        assert r20["lowrank_ops"] == 2 * r10["lowrank_ops"]
        assert r10["dominates"] == r20["dominates"]


class TestParameterCounts:
    def test_counts_match_closed_forms(self):
        n, d = 3, 2
        D = n * d
        kinds = ("categorical",) * n
        for variant in ("dcn2", "dcnv2", "dcn2_simk"):
            cfg = toy_config(variant=variant, field_kinds=kinds, cross_layers=2,
                             proj_dim=2, deep_layers=(4,))
            model = build(cfg)
            table = 2 ** cfg.hash_bits * (d + 1 if variant != "dcnv2" else d)
            if variant == "dcn2":
                stack = onlydense_stack_parameters(2, D)
                deep = D * 4 + 4
                sim = n * n + 1
                head = D + 4
            elif variant == "dcnv2":
                stack = lowrank_stack_parameters(2, D, 2)
                deep = D * 4 + 4
                sim = 0
                head = D + 4
            else:
                stack = deep = head = 0
                sim = n * n + 1
            expected = table + stack + deep + sim + head + 1  # + b_f
            assert model.parameter_count() == expected, variant


class TestCheckpoint:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        cfg = toy_config(dtype="f32", learning_rate=0.01)
        model = build(cfg)
        batch = cat_batch([[3, 9], [2, 1], [5, 5], [1, 14]], [1, 0, 1, 0])
        for _ in range(3):
            model.train_step(batch)
        save_model(model, tmp_path / "ckpt")
        back = load_model(tmp_path / "ckpt")
        np.testing.assert_array_equal(back.predict_batch(batch), model.predict_batch(batch))
        assert back.parameter_count() == model.parameter_count()
