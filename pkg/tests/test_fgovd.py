import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsaa.errors import ContractError, GenerationError
from dsaa.fgovd.metrics import Detection, ap_per_threshold, assign_and_nms, coco_map, iou, score_regions
from dsaa.fgovd.protocol import COLUMNS, adversarial_scorer, oracle_scorer, pipeline_scorer, run_protocol
from dsaa.fgovd.world import GenConfig, WorldConfig, build_world, gen_benchmark, read_dataset, write_dataset
from dsaa.text import split_words


def tiny_world():
    cfg = WorldConfig(categories=["mug"], attributes={"color": ["red", "blue"], "material": [], "pattern": [], "transparency": []})
    return build_world(cfg, seed=3)


@pytest.fixture(scope="module")
def bench(small_world):
    return gen_benchmark(small_world, GenConfig(train_records=40, eval_records_per_subset=12), seed=7)


class TestWorld:
    def test_latent_angles(self, small_world):
        lat = np.concatenate([small_world.category_latents, small_world.attribute_latents])
        u = lat / np.linalg.norm(lat, axis=1, keepdims=True)
        cos = u @ u.T
        np.fill_diagonal(cos, -1)
        assert np.degrees(np.arccos(cos.max())) > 10

    def test_save_load(self, small_world, tmp_path):
        small_world.save(tmp_path)
        from dsaa.fgovd.world import SyntheticWorld

        again = SyntheticWorld.load(tmp_path)
        assert again.digest() == small_world.digest()
        np.testing.assert_array_equal(again.encoder.tok_emb.data, small_world.encoder.tok_emb.data)


class TestGeneration:
    def test_forced_single_negative(self):
        data = gen_benchmark(tiny_world(), GenConfig(train_records=4, train_negatives=1, eval_records_per_subset=3), 0)
        for item in data["train"]:
            rec = item["record"]
            assert {rec["positive"], *rec["negatives"]} == {"a red mug", "a blue mug"}
            assert len(rec["negatives"]) == 1

    def test_shortfall_named(self):
        with pytest.raises(GenerationError, match="short by 2"):
            gen_benchmark(tiny_world(), GenConfig(train_records=4, train_negatives=3), 0)

    def test_negative_bound(self):
        with pytest.raises(ContractError, match="10"):
            GenConfig(eval_negatives=11)

    def test_deterministic_files(self, small_world, tmp_path):
        cfg = GenConfig(train_records=16, eval_records_per_subset=4)
        digests = []
        for run in range(2):
            data = gen_benchmark(small_world, cfg, seed=11)
            digests.append(write_dataset(tmp_path / f"eval{run}.jsonl", data["eval"], "eval", {"seed": 11}))
        assert digests[0] == digests[1]
        assert (tmp_path / "eval0.jsonl").read_bytes() == (tmp_path / "eval1.jsonl").read_bytes()
        header, records = read_dataset(tmp_path / "eval0.jsonl")
        assert header["split"] == "eval" and len(records) == 4 * 6

    def test_train_split_exact(self, bench):
        assert all(len(it["record"]["negatives"]) == 3 for it in bench["train"])
        assert all(it["subset"] == "Hard" for it in bench["train"])

    def test_hard_differs_in_one_word(self, bench):
        for it in bench["eval"] + bench["train"]:
            if it["subset"] not in ("Hard", "Color", "Material"):
                continue
            pos = split_words(it["record"]["positive"])
            for neg in it["record"]["negatives"]:
                neg = split_words(neg)
                assert len(neg) == len(pos)
                assert sum(a != b for a, b in zip(pos, neg)) == 1

    def test_negatives_change_attributes_only(self, bench, small_world):
        attrs = {a for _, a in small_world.config.attribute_list()}
        for it in bench["eval"]:
            pos = split_words(it["record"]["positive"])
            assert len(it["record"]["negatives"]) <= 10
            for neg in map(split_words, it["record"]["negatives"]):
                assert neg[0] == "a" and len(neg) == len(pos)
                changed = [i for i, (a, b) in enumerate(zip(pos, neg)) if a != b]
                assert changed
                if it["subset"] != "Trivial":
                    assert all(pos[i] in attrs and neg[i] in attrs for i in changed)
                else:
                    assert changed == [len(pos) - 1]

    def test_attr_subsets_swap_their_type(self, bench, small_world):
        kinds = {"Color": "color", "Material": "material"}
        for it in bench["eval"]:
            if it["subset"] in kinds:
                pos = split_words(it["record"]["positive"])
                for neg in map(split_words, it["record"]["negatives"]):
                    (i,) = [i for i, (a, b) in enumerate(zip(pos, neg)) if a != b]
                    assert small_world.attr_type[neg[i]] == kinds[it["subset"]]

    def test_scene_validity(self, bench):
        for it in bench["eval"]:
            objs = it["scene"]["objects"]
            for o in objs:
                x0, y0, x1, y1 = o["box"]
                assert x0 < x1 and y0 < y1
                assert o["attributes"]
            assert all(o["category"] != objs[0]["category"] for o in objs[1:])

    def test_absent_subsets_skipped(self, bench):
        assert not [it for it in bench["eval"] if it["subset"] in ("Pattern", "Transparency")]


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_hand(self):
        assert abs(iou((0, 0, 2, 2), (1, 0, 3, 2)) - 1 / 3) < 1e-15


class TestScoring:
    def test_identical_and_orthogonal(self):
        s = score_regions([[1.0, 2.0, 0.0]], [[1.0, 2.0, 0.0], [-2.0, 1.0, 0.0]])
        np.testing.assert_allclose(s, [[1.0, 0.0]], atol=1e-15)

    def test_hand(self):
        s = score_regions([[1.0, 0.0], [1.0, 1.0]], [[3.0, 4.0], [0.0, 2.0]])
        r = 1 / np.sqrt(2)
        np.testing.assert_allclose(s, [[0.6, 0.0], [0.7 * 2 * r, r]], atol=1e-12)

    def test_zero_norm(self, caplog):
        with caplog.at_level(logging.WARNING):
            s = score_regions([[0.0, 0.0]], [[1.0, 0.0]])
        assert s[0, 0] == 0.0 and "zero-norm" in caplog.text

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            score_regions([[1.0, 0.0]], [[1.0, 0.0, 0.0]])


class TestNms:
    def test_single(self):
        dets = assign_and_nms([[0.1, 0.3]], [(0, 0, 1, 1)])
        assert len(dets) == 1 and dets[0].caption == 1

    def test_identical_boxes(self):
        dets = assign_and_nms([[0.9], [0.8]], [(0, 0, 1, 1), (0, 0, 1, 1)])
        assert [d.score for d in dets] == [0.9]

    def test_hand_trace(self):
        # B overlaps A at 0.54 (suppressed); C overlaps A at 0.43 (kept) even though C overlaps B heavily
        boxes = [(0, 0, 10, 10), (3, 0, 13, 10), (4, 0, 14, 10)]
        dets = assign_and_nms([[0.9], [0.8], [0.7]], boxes, 0.5)
        assert [d.box for d in dets] == [boxes[0], boxes[2]]

    def test_class_agnostic(self):
        dets = assign_and_nms([[0.9, 0.1], [0.1, 0.8]], [(0, 0, 1, 1), (0, 0, 1, 1)])
        assert len(dets) == 1

    def test_threshold_range(self):
        with pytest.raises(ContractError):
            assign_and_nms([[0.9]], [(0, 0, 1, 1)], 1.0)

    def test_nonfinite_score(self):
        with pytest.raises(ContractError):
            Detection((0, 0, 1, 1), 0, float("nan"))


class TestMap:
    GT = [[((0.0, 0.0, 10.0, 10.0), 0)]]

    def test_perfect(self):
        assert coco_map([[Detection((0, 0, 10, 10), 0, 0.9)]], self.GT) == 1.0

    def test_no_detections(self):
        assert coco_map([[]], self.GT) == 0.0

    def test_iou_06(self):
        assert coco_map([[Detection((0, 0, 6, 10), 0, 0.9)]], self.GT) == pytest.approx(0.3, abs=1e-15)

    def test_wrong_label(self):
        assert coco_map([[Detection((0, 0, 10, 10), 1, 0.9)]], self.GT) == 0.0

    def test_no_ground_truth(self):
        assert coco_map([[Detection((0, 0, 1, 1), 0, 0.5)]], [[]]) is None

    @given(st.integers(0, 2**31))
    def test_monotone_in_threshold(self, seed):
        rng = np.random.default_rng(seed)
        gts, dets = [], []
        for _ in range(4):
            x, y = rng.uniform(0, 5, size=2)
            gts.append([((x, y, x + 3, y + 3), int(rng.integers(0, 2)))])
            dets.append([Detection((x + dx, y + dy, x + 3 + dx, y + 3 + dy), int(rng.integers(0, 2)), float(rng.random()))
                         for dx, dy in rng.normal(0, 0.6, size=(3, 2))])
        per = list(ap_per_threshold(dets, gts).values())
        assert all(b <= a + 1e-12 for a, b in zip(per, per[1:]))


class TestProtocol:
    def test_oracle(self, bench):
        rep = run_protocol(bench["eval"], oracle_scorer)
        assert all(rep.columns[c] == 1.0 for c in COLUMNS if rep.columns[c] is not None)
        assert rep.columns["Pattern"] is None and rep.columns["Transp."] is None
        assert rep.average == 1.0

    def test_adversarial(self, bench):
        rep = run_protocol(bench["eval"], adversarial_scorer)
        assert all(rep.columns[c] == 0.0 for c in COLUMNS if rep.columns[c] is not None)

    def test_workers_agree(self, bench, small_world):
        scorer = pipeline_scorer(small_world.pipeline(), small_world, bench["eval"])
        assert run_protocol(bench["eval"], scorer, workers=4).columns == run_protocol(bench["eval"], scorer).columns

    def test_row_shape(self, bench):
        rep = run_protocol(bench["eval"], oracle_scorer)
        assert len(rep.row()) == 9
