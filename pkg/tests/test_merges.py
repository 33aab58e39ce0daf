import math
import sys
import textwrap

import numpy as np
import pytest

from monosoup import (
    CandidatePool,
    Checkpoint,
    ExternalCommand,
    ScoresFile,
    greedy_soup,
    layer_cosine,
    lines,
    model_stock,
    sfgs,
    task_vector,
    uniform_soup,
    wise_ft,
)
from monosoup.errors import (
    DegenerateAngle,
    EmptyPool,
    EvaluatorFailure,
    MissingRanking,
    OutOfRange,
    SchemaMismatch,
    UnknownBlockStructure,
)
from monosoup.merges import detect_blocks, lines_scales, stock_coefficient
from helpers import make_checkpoint, random_pair


class TestTaskVector:
    def test_identity_gives_zero(self):
        ckpt = make_checkpoint({"w": [[1.0, 2.0]]})
        tau = task_vector(ckpt, ckpt)
        np.testing.assert_array_equal(tau.deltas["w"], np.zeros((1, 2)))

    def test_scalar_arithmetic(self):
        pre = make_checkpoint({"w": 1.0}, "F64")
        ft = make_checkpoint({"w": 3.5}, "F64")
        assert float(task_vector(pre, ft).deltas["w"]) == 2.5

    def test_matches_elementwise_subtraction(self):
        rng = np.random.default_rng(0)
        pre, ft = random_pair(rng, {"a": (3, 4), "b": (5,)}, tag="F64")
        tau = task_vector(pre, ft)
        for name in ("a", "b"):
            expected = ft[name].data.astype(float) - pre[name].data.astype(float)
            np.testing.assert_array_equal(tau.deltas[name], expected)

    def test_incompatible(self):
        with pytest.raises(SchemaMismatch):
            task_vector(make_checkpoint({"w": [1.0]}), make_checkpoint({"v": [1.0]}))


class TestLayerCosine:
    def test_self_similarity(self):
        rng = np.random.default_rng(1)
        pre, ft = random_pair(rng, {"a": (3, 3), "b": (4,)})
        tau = task_vector(pre, ft)
        profile = layer_cosine(tau, tau)
        assert profile.per_layer == {"a": 1.0, "b": 1.0}
        assert profile.mean == 1.0

    def test_antipodal(self):
        rng = np.random.default_rng(2)
        pre, ft = random_pair(rng, {"a": (3, 3)})
        tau = task_vector(pre, ft)
        flipped = task_vector(ft, pre)
        profile = layer_cosine(tau, flipped)
        assert profile.per_layer["a"] == -1.0

    def test_hand_built_dot_products(self):
        pre = make_checkpoint({"p": [0.0, 0.0], "q": [0.0, 0.0, 0.0]}, "F64")
        a = make_checkpoint({"p": [1.0, 0.0], "q": [2.0, 0.0, 0.0]}, "F64")
        b = make_checkpoint({"p": [1.0, 1.0], "q": [0.0, 3.0, 0.0]}, "F64")
        profile = layer_cosine(task_vector(pre, a), task_vector(pre, b))
        assert profile.per_layer["p"] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
        assert profile.per_layer["q"] == 0.0
        expected_mean = (1 / math.sqrt(2) + 0.0) / 2
        assert profile.mean == pytest.approx(expected_mean, abs=1e-15)

    def test_zero_norm_layers_excluded_from_mean(self):
        pre = make_checkpoint({"live": [1.0, 0.0], "dead": [5.0]}, "F64")
        ft = make_checkpoint({"live": [2.0, 0.0], "dead": [5.0]}, "F64")
        tau = task_vector(pre, ft)
        profile = layer_cosine(tau, tau)
        assert profile.per_layer["dead"] == 0.0
        assert "dead" in profile.excluded
        assert profile.mean == 1.0


class TestUniformSoup:
    def _pool(self, members, pre=None):
        first = members[0][1]
        base = pre if pre is not None else first
        return CandidatePool(pre=base, candidates=members)

    def test_idempotent_on_identical_members(self):
        rng = np.random.default_rng(3)
        ckpt = make_checkpoint({"w": rng.standard_normal((4, 4))})
        soup = uniform_soup(self._pool([("a", ckpt), ("b", ckpt), ("c", ckpt)]))
        assert soup == Checkpoint(list(ckpt), metadata=ckpt.metadata)

    def test_midpoint(self):
        a = make_checkpoint({"w": 1.0}, "F64")
        b = make_checkpoint({"w": 3.0}, "F64")
        soup = uniform_soup(self._pool([("a", a), ("b", b)]))
        assert float(soup["w"].data) == 2.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        members = [
            (f"m{i}", make_checkpoint({"w": rng.standard_normal((3, 3))}))
            for i in range(4)
        ]
        forward = uniform_soup(self._pool(members))
        backward = uniform_soup(self._pool(members[::-1]))
        assert forward == backward

    def test_empty_pool(self):
        base = make_checkpoint({"w": [1.0]})
        with pytest.raises(EmptyPool):
            uniform_soup(CandidatePool(pre=base, candidates=[]))


class TestModelStock:
    def test_identical_inputs_return_ft(self):
        rng = np.random.default_rng(5)
        pre, ft = random_pair(rng, {"a.w": (4, 4), "a.b": (4,)})
        merged, profile = model_stock(pre, ft, ft)
        assert merged == Checkpoint(list(ft), metadata=pre.metadata)
        assert all(c == 1.0 for c in profile.per_layer.values())

    def test_orthogonal_deltas_return_pre(self):
        pre = make_checkpoint({"w": [0.0, 0.0]}, "F64")
        ft1 = make_checkpoint({"w": [1.0, 0.0]}, "F64")
        ft2 = make_checkpoint({"w": [0.0, 1.0]}, "F64")
        merged, profile = model_stock(pre, ft1, ft2)
        assert profile.per_layer["w"] == 0.0
        np.testing.assert_array_equal(merged["w"].data, pre["w"].data)

    def test_hand_evaluated_sixty_degrees(self):
        # unit updates at 60 degrees: cos 0.5, coefficient 2*0.5/1.5 = 2/3
        pre = make_checkpoint({"w": [[0.0, 0.0], [0.0, 0.0]]}, "F64")
        ft1 = make_checkpoint({"w": [[1.0, 0.0], [0.0, 0.0]]}, "F64")
        root3over2 = math.sqrt(3.0) / 2.0
        ft2 = make_checkpoint({"w": [[0.5, root3over2], [0.0, 0.0]]}, "F64")
        merged, profile = model_stock(pre, ft1, ft2)
        assert profile.per_layer["w"] == pytest.approx(0.5, abs=1e-15)
        lam = 2.0 * 0.5 / 1.5
        expected = lam * (np.array([[1.0, 0.0], [0.0, 0.0]]) + [[0.5, root3over2], [0.0, 0.0]]) / 2
        np.testing.assert_allclose(merged["w"].data, expected, atol=1e-15)

    def test_negative_alignment_clamps_to_pre(self):
        pre = make_checkpoint({"w": [0.0, 0.0]}, "F64")
        ft1 = make_checkpoint({"w": [1.0, 0.1]}, "F64")
        ft2 = make_checkpoint({"w": [-1.0, 0.1]}, "F64")
        merged, profile = model_stock(pre, ft1, ft2)
        assert profile.per_layer["w"] < 0
        np.testing.assert_array_equal(merged["w"].data, pre["w"].data)

    def test_antiparallel_raises(self):
        pre = make_checkpoint({"w": [0.0]}, "F64")
        ft1 = make_checkpoint({"w": [1.0]}, "F64")
        ft2 = make_checkpoint({"w": [-2.0]}, "F64")
        with pytest.raises(DegenerateAngle):
            model_stock(pre, ft1, ft2)

    def test_coefficient_monotone_in_alignment(self):
        coeffs = [stock_coefficient(float(c)) for c in np.linspace(-0.9, 1.0, 30)]
        assert all(a <= b + 1e-15 for a, b in zip(coeffs, coeffs[1:]))
        assert stock_coefficient(0.0) == 0.0
        assert stock_coefficient(1.0) == 1.0
        with pytest.raises(DegenerateAngle):
            stock_coefficient(-1.0)


class TestWiseFT:
    def test_endpoints(self):
        rng = np.random.default_rng(6)
        pre, ft = random_pair(rng, {"w": (3, 3), "b": (3,)})
        assert wise_ft(pre, ft, 0.0) == Checkpoint(list(pre), metadata=pre.metadata)
        assert wise_ft(pre, ft, 1.0) == Checkpoint(list(ft), metadata=pre.metadata)

    def test_midpoint(self):
        pre = make_checkpoint({"w": 2.0}, "F64")
        ft = make_checkpoint({"w": 4.0}, "F64")
        assert float(wise_ft(pre, ft, 0.5)["w"].data) == 3.0

    def test_affine_consistency(self):
        rng = np.random.default_rng(7)
        pre, ft = random_pair(rng, {"w": (5, 5)}, tag="F64")
        quarter = wise_ft(pre, ft, 0.25)["w"].data
        zero = wise_ft(pre, ft, 0.0)
        half = wise_ft(pre, ft, 0.5)
        pool = CandidatePool(pre=pre, candidates=[("z", zero), ("h", half)])
        averaged = uniform_soup(pool)["w"].data
        np.testing.assert_allclose(averaged, quarter, rtol=0, atol=1e-12)

    def test_out_of_range(self):
        pre = make_checkpoint({"w": 0.0})
        with pytest.raises(OutOfRange):
            wise_ft(pre, pre, 1.2)


class TestBlockDetection:
    def test_transformer_names(self):
        names = [
            "model.layers.0.mlp.weight",
            "model.layers.1.mlp.weight",
            "model.layers.11.attn.weight",
        ]
        blocks = detect_blocks(names)
        assert blocks["model.layers.0.mlp.weight"] == 0
        assert blocks["model.layers.11.attn.weight"] == 11

    def test_conv_stage_wins_over_inner_block(self):
        blocks = detect_blocks(["stages.2.blocks.5.conv.weight"])
        assert blocks["stages.2.blocks.5.conv.weight"] == 2

    def test_unmatched_adopt_longest_prefix(self):
        names = [
            "visual.transformer.resblocks.0.w",
            "visual.transformer.resblocks.3.w",
            "visual.positional_embedding",
            "text.embedding",
        ]
        blocks = detect_blocks(names)
        # shares the "visual" prefix with both matched names; tie resolves
        # to the lowest block
        assert blocks["visual.positional_embedding"] == 0
        assert blocks["text.embedding"] == 0

    def test_no_structure_raises(self):
        with pytest.raises(UnknownBlockStructure):
            detect_blocks(["weight", "bias"])

    def test_schedule_endpoints(self):
        scales = lines_scales([0, 1, 2], 0.1, 0.9)
        assert scales == {0: pytest.approx(0.1), 1: pytest.approx(0.5), 2: pytest.approx(0.9)}
        assert lines_scales([7], 0.1, 0.9) == {7: 0.9}


class TestLines:
    def _pair(self):
        rng = np.random.default_rng(8)
        shapes = {
            "layers.0.w": (3, 3),
            "layers.1.w": (3, 3),
            "layers.2.w": (3, 3),
            "embed.w": (4, 3),
        }
        return random_pair(rng, shapes, tag="F64")

    def test_unit_scaling_returns_ft(self):
        pre, ft = self._pair()
        merged = lines(pre, ft, 1.0, 1.0)
        assert merged == Checkpoint(list(ft), metadata=pre.metadata)

    def test_zero_scaling_returns_pre(self):
        pre, ft = self._pair()
        merged = lines(pre, ft, 0.0, 0.0)
        assert merged == Checkpoint(list(pre), metadata=pre.metadata)

    def test_three_block_schedule_elementwise(self):
        pre, ft = self._pair()
        merged = lines(pre, ft, 0.1, 0.9)
        scale_of = {"layers.0.w": 0.1, "layers.1.w": 0.5, "layers.2.w": 0.9, "embed.w": 0.1}
        for name, scale in scale_of.items():
            base = pre[name].data.astype(float)
            delta = ft[name].data.astype(float) - base
            np.testing.assert_allclose(
                merged[name].data, base + scale * delta, rtol=0, atol=1e-12
            )

    def test_explicit_block_map_overrides(self):
        pre, ft = self._pair()
        block_map = {name: 0 for name in pre.names()}
        merged = lines(pre, ft, 0.1, 0.9, block_map=block_map)
        # one block: everything scales by beta
        for name in pre.names():
            base = pre[name].data.astype(float)
            delta = ft[name].data.astype(float) - base
            np.testing.assert_allclose(merged[name].data, base + 0.9 * delta, atol=1e-12)

    def test_parameter_validation(self):
        pre, ft = self._pair()
        with pytest.raises(OutOfRange):
            lines(pre, ft, 0.9, 0.1)
        with pytest.raises(UnknownBlockStructure):
            lines(pre, ft, 0.1, 0.9, block_map={"layers.0.w": 0})


def _simple_pool(values: dict[str, float], ranking: dict[str, float]):
    pre = make_checkpoint({"w": 0.0}, "F64")
    members = [(cid, make_checkpoint({"w": v}, "F64")) for cid, v in values.items()]
    return CandidatePool(pre=pre, candidates=members, ranking=ranking)


class TestGreedySoup:
    def test_single_candidate(self):
        pool = _simple_pool({"only": 1.5}, {"only": 1.0})
        soup, selected = greedy_soup(pool, ScoresFile({"only": 0.8}))
        assert selected == ["only"]
        assert float(soup["w"].data) == 1.5

    def test_monotone_decreasing_scores_keep_top_only(self):
        pool = _simple_pool({"x": 1.0, "y": 2.0, "z": 3.0}, {"x": 3.0, "y": 2.0, "z": 1.0})
        scores = ScoresFile({"x": 0.9, "x,y": 0.8, "x,z": 0.7})
        soup, selected = greedy_soup(pool, scores)
        assert selected == ["x"]
        assert float(soup["w"].data) == 1.0

    def test_hand_traced_three_candidates(self):
        # visit order a, b, c; soup {a} scores 0.70, adding b improves to
        # 0.72, adding c drops to 0.71 and is rejected
        pool = _simple_pool({"a": 1.0, "b": 3.0, "c": 100.0}, {"a": 3.0, "b": 2.0, "c": 1.0})
        scores = ScoresFile({"a": 0.70, "a,b": 0.72, "a,b,c": 0.71})
        soup, selected = greedy_soup(pool, scores)
        assert selected == ["a", "b"]
        assert float(soup["w"].data) == 2.0

    def test_equal_score_is_kept(self):
        pool = _simple_pool({"a": 1.0, "b": 3.0}, {"a": 2.0, "b": 1.0})
        scores = ScoresFile({"a": 0.5, "a,b": 0.5})
        _, selected = greedy_soup(pool, scores)
        assert selected == ["a", "b"]

    def test_missing_score_is_evaluator_failure(self):
        pool = _simple_pool({"a": 1.0, "b": 2.0}, {"a": 2.0, "b": 1.0})
        with pytest.raises(EvaluatorFailure):
            greedy_soup(pool, ScoresFile({"a": 0.5}))

    def test_missing_ranking(self):
        pool = _simple_pool({"a": 1.0}, {"a": 1.0})
        pool.ranking = None
        with pytest.raises(MissingRanking):
            greedy_soup(pool, ScoresFile({"a": 0.5}))

    def test_external_command_evaluator(self, tmp_path):
        # score = 10 - |mean(w) - 2|, decoded straight from the file layout
        script = tmp_path / "score.py"
        script.write_text(
            textwrap.dedent(
                """
                import json, struct, sys
                import numpy as np
                raw = open(sys.argv[1], "rb").read()
                (n,) = struct.unpack("<Q", raw[:8])
                header = json.loads(raw[8 : 8 + n])
                entry = header["w"]
                begin, end = entry["data_offsets"]
                data = np.frombuffer(raw[8 + n + begin : 8 + n + end], dtype="<f8")
                print(10.0 - abs(float(data.mean()) - 2.0))
                """
            )
        )
        pool = _simple_pool({"a": 1.0, "b": 3.0, "c": 100.0}, {"a": 3.0, "b": 2.0, "c": 1.0})
        evaluator = ExternalCommand(f"{sys.executable} {script} {{}}")
        soup, selected = greedy_soup(pool, evaluator)
        assert selected == ["a", "b"]
        assert float(soup["w"].data) == 2.0

    def test_external_command_failure(self):
        pool = _simple_pool({"a": 1.0}, {"a": 1.0})
        with pytest.raises(EvaluatorFailure):
            greedy_soup(pool, ExternalCommand(f"{sys.executable} -c 'import sys; sys.exit(3)'"))
        with pytest.raises(EvaluatorFailure):
            greedy_soup(pool, ExternalCommand(f"{sys.executable} -c 'print(\"not-a-number\")'"))

    def test_final_score_never_below_top_model(self):
        # random score tables over every prefix the loop can query
        from itertools import combinations

        rng = np.random.default_rng(11)
        ids = ["p", "q", "r", "s"]
        for _ in range(30):
            table = {}
            for size in range(1, 5):
                for combo in combinations(ids, size):
                    table[",".join(sorted(combo))] = float(rng.uniform(0, 1))
            pool = _simple_pool(
                {cid: float(i) for i, cid in enumerate(ids)},
                {cid: 4.0 - i for i, cid in enumerate(ids)},
            )
            evaluator = ScoresFile(table)
            _, selected = greedy_soup(pool, evaluator)
            assert selected[0] == "p"  # top-ranked always seeds the soup
            final_score = table[",".join(sorted(selected))]
            assert final_score >= table["p"]


def _geometry_pool():
    """Four single-tensor candidates with prescribed pairwise cosines.

    tau_a = e1, tau_b = (e1+e2)/sqrt2, tau_c = (-e1+e3)/sqrt2,
    tau_d = (e1+e4)/sqrt2, so cos(a,b) = cos(a,d) = 1/sqrt2 ~ 0.707,
    cos(a,c) = -1/sqrt2, cos(b,c) = -1/2, cos(b,d) = 1/2, cos(c,d) = -1/2.
    """
    r = 1.0 / math.sqrt(2.0)
    taus = {
        "a": [1.0, 0.0, 0.0, 0.0],
        "b": [r, r, 0.0, 0.0],
        "c": [-r, 0.0, r, 0.0],
        "d": [r, 0.0, 0.0, r],
    }
    pre = make_checkpoint({"w": [0.0, 0.0, 0.0, 0.0]}, "F64")
    members = [(cid, make_checkpoint({"w": tau}, "F64")) for cid, tau in taus.items()]
    ranking = {"a": 4.0, "b": 3.0, "c": 2.0, "d": 1.0}
    return CandidatePool(pre=pre, candidates=members, ranking=ranking)


class TestSFGS:
    def test_vacuous_threshold_equals_uniform_soup(self):
        pool = _geometry_pool()
        soup, selected = sfgs(pool, -1.0)
        assert selected == ["a", "b", "c", "d"]
        assert soup == uniform_soup(pool)

    def test_identical_candidates_pass_delta_one(self):
        rng = np.random.default_rng(9)
        ckpt = make_checkpoint({"w": rng.standard_normal(5)}, "F64")
        pre = make_checkpoint({"w": np.zeros(5)}, "F64")
        pool = CandidatePool(
            pre=pre,
            candidates=[("a", ckpt), ("b", ckpt), ("c", ckpt)],
            ranking={"a": 3.0, "b": 2.0, "c": 1.0},
        )
        _, selected = sfgs(pool, 1.0)
        assert selected == ["a", "b", "c"]

    def test_hand_traced_accept_reject_sequence(self):
        # delta 0.5: b joins (0.707 >= 0.5); c is rejected against {a, b}
        # (mean of -0.707 and -0.5 is -0.604); d joins against {a, b}
        # (mean of 0.707 and 0.5 is 0.604)
        pool = _geometry_pool()
        soup, selected = sfgs(pool, 0.5)
        assert selected == ["a", "b", "d"]
        r = 1.0 / math.sqrt(2.0)
        expected = (np.array([1.0, 0, 0, 0]) + [r, r, 0, 0] + [r, 0, 0, r]) / 3.0
        np.testing.assert_allclose(soup["w"].data, expected, atol=1e-15)

    def test_threshold_validation_and_empty_pool(self):
        pool = _geometry_pool()
        with pytest.raises(OutOfRange):
            sfgs(pool, 1.5)
        with pytest.raises(EmptyPool):
            sfgs(CandidatePool(pre=pool.pre, candidates=[], ranking={}), 0.0)


class TestSchemaPreservation:
    def test_merges_keep_names_shapes_dtypes(self):
        rng = np.random.default_rng(10)
        shapes = {"layers.0.w": (4, 4), "layers.1.w": (4, 4), "b": (4,)}
        pre, ft = random_pair(rng, shapes, tag="F16")
        for merged in (
            wise_ft(pre, ft, 0.3),
            lines(pre, ft, 0.1, 0.9),
            model_stock(pre, ft, ft)[0],
        ):
            assert merged.names() == pre.names()
            for name in merged.names():
                assert merged[name].shape == pre[name].shape
                assert merged[name].dtype_tag == "F16"
