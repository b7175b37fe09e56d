"""Acceptance suite: every release criterion with its stated tolerance.

Each criterion prints one PASS/FAIL line in the terminal summary. The
training-backed criteria share a pool of models trained once per session;
criterion 4 owns the pool's wall-clock budget.
"""

import time

import numpy as np
import pytest
import torch

from conftest import record_acceptance
from oracles import (
    brute_force_expand,
    cross_precision_directional_check,
    directional_grad_check,
    elementwise_grad_check,
    oracle_ap,
)

from phrasebox.boxes import anchor_grid
from phrasebox.evaluation import evaluate_detection
from phrasebox.inference import (
    classifier_prompt,
    detection_mode_check,
    infer,
    infer_chunked,
)
from phrasebox.losses import grounding_loss, localization_loss, record_loss
from phrasebox.metrics import IOU_GRID, compute_ap, compute_recall_at_k
from phrasebox.model import GroundingModel, ModelConfig, parameter_hash
from phrasebox.prompts import (
    NOOBJ_ID,
    NOOBJ_STRING,
    Phrase,
    PromptConfig,
    TokenizedPrompt,
    build_detection_prompt,
)
from phrasebox.records import write_records
from phrasebox.selftrain import CaptionedImage, assemble_student_corpus, generate_pseudo_labels
from phrasebox.shapes import (
    ShapesWorldSpec,
    generate_compositional_eval,
    generate_records,
    generate_shapes_world,
)
from phrasebox.targets import expand_targets, match_anchors
from phrasebox.training import TrainConfig, train
from phrasebox.transfer import (
    TransferTask,
    evaluate_prompt_embedding,
    full_tune,
    linear_probe,
    make_x_shot_task,
    prompt_tune,
)

# -- shared corpus and training recipe (frozen acceptance configuration) -----

SPEC = ShapesWorldSpec(size_range=(12, 20), noise_std=0.01)
CORPUS_SEED = 100
TRAIN_RECIPE = dict(steps=2200, batch_size=8, optimizer="adam", tau_neg=0.2, lr=2e-4)
_CACHE: dict = {}


def shapes_corpus():
    if "corpus" not in _CACHE:
        _CACHE["corpus"] = generate_shapes_world(
            SPEC, seed=CORPUS_SEED, counts={"train": 1400, "val": 150, "test": 150}
        )
        _CACHE["comp"] = generate_compositional_eval(SPEC, seed=555, count=120)
    return _CACHE["corpus"], _CACHE["comp"]


def trained_model(kind: str, seed: int) -> GroundingModel:
    """Train-once cache of deep/late/classical models on the shared corpus."""
    key = (kind, seed)
    if key in _CACHE:
        return _CACHE[key]
    corpus, _ = shapes_corpus()
    vocab = sorted(SPEC.train_class_names)
    recipe = dict(TRAIN_RECIPE)
    if kind == "classical":
        config = ModelConfig(fusion_enabled=False, classifier_classes=len(vocab))
        extra = dict(gold_caption_fraction=0.0, mix_captions=False)
        recipe["steps"] = 2600
    elif kind == "grounding-twin":
        # the apples-to-apples counterpart of the classical model: same data
        # order, no caption route, fusion off
        config = ModelConfig(fusion_enabled=False)
        extra = dict(gold_caption_fraction=0.0, mix_captions=False)
        recipe["steps"] = 2600
    elif kind == "deep":
        config = ModelConfig(fusion_enabled=True)
        extra = {}
    elif kind == "late":
        config = ModelConfig(fusion_enabled=False)
        extra = {}
    else:
        raise ValueError(kind)
    model = GroundingModel(config, seed=seed)
    train(model, corpus["train"], vocab, TrainConfig(seed=seed, **recipe, **extra))
    _CACHE[key] = model
    return model


def held_out_ap50(model: GroundingModel, records, name_map=None, class_names=None) -> float:
    names = class_names if class_names is not None else SPEC.class_names
    result, _ = evaluate_detection(model, records, names, name_map=name_map)
    vals = [v for k, v in result.per_class_ap50.items() if k in SPEC.held_out_class_names]
    return float(np.mean(vals))


# -- criterion 2: target-expansion oracle ------------------------------------


def random_prompt(rng) -> TokenizedPrompt:
    """Random synthetic prompt with M <= 16 tokens and disjoint multi-token
    phrase spans."""
    m_content = int(rng.integers(1, 15))
    tokens = [f"t{i}" for i in range(m_content)] + [NOOBJ_STRING]
    ids = list(range(2, 2 + m_content)) + [NOOBJ_ID]
    positions = list(range(m_content))
    rng.shuffle(positions)
    spans: list[tuple[int, ...]] = []
    taken = 0
    while positions and len(spans) < 4:
        size = int(rng.integers(1, 4))
        chunk = sorted(positions[:size])
        positions = positions[size:]
        if chunk:
            spans.append(tuple(chunk))
    if not spans:
        spans = [(0,)]
        positions = [p for p in positions if p != 0]
    owned = {t for span in spans for t in span}
    special = [i not in owned for i in range(m_content)] + [True]
    text = " ".join(tokens[:-1])
    cursor = 0
    char_spans = []
    for tok in tokens[:-1]:
        char_spans.append((cursor, cursor + len(tok)))
        cursor += len(tok) + 1
    char_spans.append((len(text), len(text)))
    phrases = tuple(
        Phrase(text="x", char_span=(0, 1)) for _ in spans
    )
    return TokenizedPrompt(
        text=text,
        token_ids=tuple(ids),
        token_strings=tuple(tokens),
        token_spans=tuple(char_spans),
        phrases=phrases,
        phrase_token_spans=tuple(spans),
        special_mask=tuple(special),
    )


class TestCriterion2TargetExpansion:
    def test_oracle_equality_1000_instances(self):
        rng = np.random.default_rng(2024)
        checked = 0
        for _ in range(1000):
            prompt = random_prompt(rng)
            n = int(rng.integers(1, 17))
            c = prompt.num_phrases
            matrix = np.zeros((n, c), dtype=np.uint8)
            for i in range(n):
                if rng.random() < 0.7:
                    matrix[i, int(rng.integers(0, c))] = 1
            expanded = expand_targets(matrix, prompt)
            expected = brute_force_expand(matrix, prompt)
            assert np.array_equal(expanded, expected)
            checked += 1
        record_acceptance(
            "AC2", True, f"expand_targets == brute-force oracle on {checked} random instances"
        )


# -- criterion 3: gradient suite ----------------------------------------------


def _loss_setup(dtype):
    torch.manual_seed(0)
    prompt = build_detection_prompt(["red circle", "toothbrush", "dot"])
    n, m = 12, prompt.num_tokens
    logits = torch.randn(n, m, dtype=dtype, requires_grad=True)
    rng = np.random.default_rng(1)
    target = np.zeros((n, m), dtype=np.uint8)
    matrix = np.zeros((n, prompt.num_phrases), dtype=np.uint8)
    for i in range(n):
        if rng.random() < 0.6:
            matrix[i, int(rng.integers(0, prompt.num_phrases))] = 1
    target = expand_targets(matrix, prompt)
    ignore = rng.random(n) < 0.2
    return prompt, logits, target, ignore


class TestCriterion3Gradients:
    started = time.time()

    @pytest.mark.parametrize("mode", ["focal_sigmoid", "softmax_ce"])
    def test_grounding_loss_gradients_f64(self, mode):
        prompt, logits, target, ignore = _loss_setup(torch.float64)

        def fn():
            return grounding_loss(logits, target, mode, prompt, ignore=ignore)

        rng = np.random.default_rng(7)
        n, m = logits.shape
        live_rows = [i for i in range(n) if not ignore[i]]
        samples = [
            (live_rows[int(rng.integers(0, len(live_rows)))], int(rng.integers(0, m)))
            for _ in range(20)
        ]
        err = elementwise_grad_check(fn, logits, samples)
        err = max(err, directional_grad_check(fn, [logits], rng=np.random.default_rng(8)))
        assert err < 1e-4, f"{mode} f64: rel err {err:.2e}"

    @pytest.mark.parametrize("mode", ["focal_sigmoid", "softmax_ce"])
    def test_grounding_loss_gradients_f32(self, mode):
        prompt, logits64, target, ignore = _loss_setup(torch.float64)
        logits32 = logits64.detach().float().requires_grad_(True)

        def fn64():
            return grounding_loss(logits64, target, mode, prompt, ignore=ignore)

        def fn32():
            return grounding_loss(logits32, target, mode, prompt, ignore=ignore)

        err = cross_precision_directional_check(
            fn32, [logits32], fn64, [logits64], rng=np.random.default_rng(9)
        )
        assert err < 1e-2, f"{mode} f32: rel err {err:.2e}"

    def test_localization_loss_gradients(self):
        anchors = anchor_grid(64, 8)
        gt = np.array([[10.0, 12.0, 26.0, 30.0], [40.0, 36.0, 56.0, 52.0]])
        targets = match_anchors(anchors, gt, np.array([0, 1]), 2)
        torch.manual_seed(1)
        deltas64 = torch.randn(64, 4, dtype=torch.float64, requires_grad=True)
        deltas32 = deltas64.detach().float().requires_grad_(True)

        def fn64():
            return localization_loss(deltas64, anchors, targets, gt)

        def fn32():
            return localization_loss(deltas32, anchors, targets, gt)

        pos = np.nonzero(targets.assigned_gt >= 0)[0]
        samples = [(int(p), j) for p in pos for j in range(4)]
        err64 = elementwise_grad_check(fn64, deltas64, samples)
        assert err64 < 1e-4, f"loc f64: rel err {err64:.2e}"
        err32 = cross_precision_directional_check(
            fn32, [deltas32], fn64, [deltas64], rng=np.random.default_rng(10)
        )
        assert err32 < 1e-2, f"loc f32: rel err {err32:.2e}"

    def _xmha_pair(self):
        from phrasebox.model.fusion import CrossModalAttention

        cfg = ModelConfig(d=16, heads=4, grid=2, image_size=8)
        xmha32 = CrossModalAttention(cfg)
        with torch.no_grad():  # open the zero-initialized output paths
            for lin in (xmha32.out_vis, xmha32.out_txt):
                lin.weight.normal_(0, 0.3)
                lin.bias.normal_(0, 0.1)
        import copy

        xmha64 = copy.deepcopy(xmha32).double()
        torch.manual_seed(2)
        o = torch.randn(1, 4, 16)
        p = torch.randn(1, 5, 16)
        wo = torch.randn(1, 4, 16)
        wp = torch.randn(1, 5, 16)

        def make_fn(module, dtype):
            od, pd, wod, wpd = (t.to(dtype) for t in (o, p, wo, wp))

            def fn():
                vis_ctx, txt_ctx = module(od, pd)
                return (vis_ctx * wod).sum() + (txt_ctx * wpd).sum()

            return fn

        return xmha32, xmha64, make_fn

    def test_xmha_parameter_gradients(self):
        xmha32, xmha64, make_fn = self._xmha_pair()
        err64 = directional_grad_check(
            make_fn(xmha64, torch.float64), list(xmha64.parameters()),
            rng=np.random.default_rng(5),
        )
        assert err64 < 1e-4, f"xmha f64: rel err {err64:.2e}"
        err32 = cross_precision_directional_check(
            make_fn(xmha32, torch.float32), list(xmha32.parameters()),
            make_fn(xmha64, torch.float64), list(xmha64.parameters()),
            rng=np.random.default_rng(12),
        )
        assert err32 < 1e-2, f"xmha f32: rel err {err32:.2e}"

    def _objective_pair(self):
        import copy

        config = ModelConfig(d=16, heads=2, text_layers=1, fusion_layers=1, grid=4, image_size=32)
        model32 = GroundingModel(config, seed=0)
        with torch.no_grad():  # make fusion context paths non-trivial
            for layer in model32.fusion:
                layer.cross.out_vis.weight.normal_(0, 0.1)
                layer.cross.out_txt.weight.normal_(0, 0.1)
        model64 = copy.deepcopy(model32).double()
        prompt = build_detection_prompt(["red circle", "blue square"])
        rng = np.random.default_rng(11)
        image = rng.uniform(0, 1, (32, 32, 3))
        gt = np.array([[4.0, 4.0, 14.0, 14.0], [18.0, 18.0, 30.0, 28.0]])
        ids = np.array([0, 1])

        def make_fn(model, dtype):
            img = torch.from_numpy(image).to(dtype)

            def fn():
                output = model(img, prompt)
                targets = match_anchors(output.anchors, gt, ids, prompt.num_phrases)
                loss, _ = record_loss(
                    output.logits[0], output.deltas[0], output.anchors, targets, gt,
                    prompt, "focal_sigmoid",
                )
                return loss

            return fn

        return model32, model64, make_fn

    def test_full_objective_gradients(self):
        model32, model64, make_fn = self._objective_pair()
        err64 = directional_grad_check(
            make_fn(model64, torch.float64),
            [p for p in model64.parameters() if p.requires_grad],
            rng=np.random.default_rng(6),
        )
        assert err64 < 1e-4, f"full objective f64: rel err {err64:.2e}"
        err32 = cross_precision_directional_check(
            make_fn(model32, torch.float32), list(model32.parameters()),
            make_fn(model64, torch.float64), list(model64.parameters()),
            rng=np.random.default_rng(13),
        )
        assert err32 < 1e-2, f"full objective f32: rel err {err32:.2e}"

    def test_zzz_report(self):
        elapsed = time.time() - TestCriterion3Gradients.started
        ok = elapsed < 120
        record_acceptance(
            "AC3",
            ok,
            f"grounding/localization/X-MHA/full-objective FD checks passed in {elapsed:.0f}s (< 2 min)",
        )
        assert ok


# -- criterion 7: metric oracles ----------------------------------------------


class TestCriterion7MetricOracles:
    def test_ap_oracle_500_instances(self):
        rng = np.random.default_rng(77)
        worst = 0.0
        for _ in range(500):
            classes = ["a", "b"][: rng.integers(1, 3)]
            images = [f"im{i}" for i in range(rng.integers(1, 3))]

            def rand_box():
                x1, y1 = rng.uniform(0, 40, size=2)
                w, h = rng.uniform(3, 22, size=2)
                return (float(x1), float(y1), float(x1 + w), float(y1 + h))

            gt = {
                img: [
                    (rand_box(), classes[rng.integers(0, len(classes))])
                    for _ in range(rng.integers(1, 4))
                ]
                for img in images
            }
            dets = {
                img: [
                    (rand_box(), classes[rng.integers(0, len(classes))], float(rng.uniform(0, 1)))
                    for _ in range(rng.integers(0, 6))
                ]
                for img in images
            }
            for img in images:
                for box, cls in gt[img][: rng.integers(0, 3)]:
                    moved = tuple(np.asarray(box) + rng.uniform(-2, 2, 4))
                    dets[img].append((moved, cls, float(rng.uniform(0, 1))))
            res = compute_ap(dets, gt)
            mean_ap, ap50, _ = oracle_ap(dets, gt, list(IOU_GRID))
            worst = max(worst, abs(res.ap - mean_ap), abs(res.ap50 - ap50))
            assert abs(res.ap - mean_ap) < 1e-9
            assert abs(res.ap50 - ap50) < 1e-9
        part_a = f"compute_ap == exhaustive oracle on 500 instances (max |d|={worst:.1e})"

        rng = np.random.default_rng(99)
        for _ in range(1000):
            gold, preds = {}, {}
            for p in range(rng.integers(1, 4)):
                key = ("im", p)

                def rand_box():
                    x1, y1 = rng.uniform(0, 40, size=2)
                    w, h = rng.uniform(2, 24, size=2)
                    return (float(x1), float(y1), float(x1 + w), float(y1 + h))

                gold[key] = [rand_box() for _ in range(rng.integers(1, 3))]
                preds[key] = [
                    (rand_box(), float(rng.uniform(0, 1))) for _ in range(rng.integers(0, 12))
                ]
            rec = compute_recall_at_k(preds, gold, ks=(1, 5, 10))
            assert rec[1] <= rec[5] <= rec[10]
        record_acceptance(
            "AC7", True, part_a + "; recall@k monotone on 1000 instances"
        )


# -- criterion 1: detection <-> grounding equivalence --------------------------


@pytest.mark.slow
class TestCriterion1Equivalence:
    def test_tied_weights_exact_and_detections_identical(self):
        corpus, _ = shapes_corpus()
        classical = trained_model("classical", 0)
        images = [r.image for r in corpus["val"][:100]]
        started = time.time()
        report = detection_mode_check(classical, images, sorted(SPEC.train_class_names))
        elapsed = time.time() - started
        ok = (
            report.max_abs_diff == 0.0
            and report.logits_identical
            and report.detections_identical
            and report.images_checked == 100
            and elapsed < 60
        )
        record_acceptance(
            "AC1a",
            ok,
            f"tied-weights S_ground == S_cls at 0 ULP and identical detection lists "
            f"on 100 images in {elapsed:.1f}s",
        )
        assert ok, report

    def test_classical_and_grounding_reach_matching_ap(self):
        classical = trained_model("classical", 0)
        twin = trained_model("grounding-twin", 0)
        vocab = sorted(SPEC.train_class_names)
        # a 500-image parity split keeps the AP-difference estimate's noise
        # well under the 1.5-point tolerance
        parity_split = generate_records(
            SPEC, seed=CORPUS_SEED + 9, count=500, id_prefix="parity", pair_pool=SPEC.train_pairs
        )

        # classical decode path
        from phrasebox.inference import decode_detections, decode_logits, phrase_scores
        from phrasebox.metrics import compute_ap
        from phrasebox.evaluation import ground_truth_index
        from phrasebox.records import load_image

        prompt = classifier_prompt(vocab)
        dets = {}
        with torch.no_grad():
            for record in parity_split:
                image = torch.from_numpy(np.ascontiguousarray(load_image(record), np.float32))
                output = classical(image, prompt)
                scores = phrase_scores(decode_logits(classical, output)[0], prompt, "focal_sigmoid")
                dets[record.image_id] = decode_detections(
                    scores, output.deltas[0].numpy(), output.anchors, prompt, SPEC.image_size
                )
        det_index = {
            iid: [(d.box, d.phrase_text, d.score) for d in lst] for iid, lst in dets.items()
        }
        classical_result = compute_ap(det_index, ground_truth_index(parity_split))
        twin_result, _ = evaluate_detection(twin, parity_split, vocab)

        cls_ap = float(np.mean([v for k, v in classical_result.per_class_ap.items() if k in vocab]))
        twin_ap = float(np.mean([v for k, v in twin_result.per_class_ap.items() if k in vocab]))
        diff = abs(cls_ap - twin_ap)
        ok = diff <= 0.015
        record_acceptance(
            "AC1b",
            ok,
            f"same-seed classical AP {cls_ap:.3f} vs grounding AP {twin_ap:.3f} "
            f"(|diff| {diff * 100:.2f} pts <= 1.5)",
        )
        assert ok


# -- criterion 4: zero-shot compositional transfer -----------------------------


COLOR_SHUFFLE = {"red": "green", "green": "blue", "blue": "yellow", "yellow": "red"}


def shuffled_heldout_names() -> tuple[list[str], dict[str, str]]:
    """Held-out class names with deranged color attributes, plus the map back
    to the original names for reporting."""
    rewritten, back = [], {}
    for name in SPEC.held_out_class_names:
        color, shape = name.split(" ")
        wrong = f"{COLOR_SHUFFLE[color]} {shape}"
        rewritten.append(wrong)
        back[wrong] = name
    return rewritten, back


@pytest.mark.slow
class TestCriterion4CompositionalTransfer:
    def test_deep_fusion_beats_late_and_shuffled_control(self):
        started = time.time()
        _, comp = shapes_corpus()
        rows = []
        for seed in (0, 1, 2):
            deep = trained_model("deep", seed)
            late = trained_model("late", seed)
            deep_ap = held_out_ap50(deep, comp)
            late_ap = held_out_ap50(late, comp)

            # attribute-shuffled control: held-out-only prompts, wrong colors,
            # scored against the true ground truth
            true_names = SPEC.held_out_class_names
            control_names, back = shuffled_heldout_names()
            true_result, _ = evaluate_detection(deep, comp, true_names)
            control_result, _ = evaluate_detection(deep, comp, control_names, name_map=back)
            deep_self = float(
                np.mean([true_result.per_class_ap50.get(n, 0.0) for n in true_names])
            )
            control = float(
                np.mean([control_result.per_class_ap50.get(n, 0.0) for n in true_names])
            )
            rows.append((seed, deep_ap, late_ap, deep_self, control))
        elapsed = time.time() - started
        ok = all(
            deep_ap >= 0.3 and deep_ap > late_ap and deep_self > control
            for _, deep_ap, late_ap, deep_self, control in rows
        ) and elapsed < 1800
        detail = "; ".join(
            f"seed {s}: deep {d:.3f} > late {l:.3f}, true {t:.3f} > shuffled {c:.3f}"
            for s, d, l, t, c in rows
        )
        record_acceptance(
            "AC4", ok, f"held-out AP50 over 3 seeds ({detail}) in {elapsed / 60:.1f} min (< 30)"
        )
        assert ok, rows


# -- criterion 5: transfer-regime ordering --------------------------------------

# AC5 bases are pre-trained longer than the AC4 pool (which is capped by AC4's
# runtime budget): a mature class-agnostic box head narrows the part of the
# full-tune advantage that prompt tuning cannot reach by design.
AC5_RECIPE = dict(steps=4500, batch_size=8, optimizer="adam", tau_neg=0.2, lr=2e-4)
AC5_CORPUS_IMAGES = 1400
# prompt-tune hypers recalibrated for desk scale; the paper-scale defaults
# (lr 0.05, wd 0.25) diverge on this model (see decisions ledger)
AC5_PT = dict(steps=400, lr=0.01, weight_decay=0.01)


def ac5_base(kind: str) -> GroundingModel:
    key = ("ac5", kind)
    if key in _CACHE:
        return _CACHE[key]
    corpus = generate_shapes_world(
        SPEC, seed=CORPUS_SEED, counts={"train": AC5_CORPUS_IMAGES}
    )
    model = GroundingModel(ModelConfig(fusion_enabled=(kind == "deep")), seed=0)
    train(
        model,
        corpus["train"],
        sorted(SPEC.train_class_names),
        TrainConfig(seed=0, **AC5_RECIPE),
    )
    _CACHE[key] = model
    return model


def transfer_task() -> TransferTask:
    _, comp = shapes_corpus()
    # the 5-shot pool carries the same binding distractors as the eval split
    pool = generate_records(
        SPEC, seed=777, count=150, id_prefix="task", pair_pool=SPEC.all_pairs,
        force_first_pair=list(SPEC.held_out_pairs), bind_distractors=True,
    )
    base = TransferTask(
        name="held-out-pairs",
        class_names=list(SPEC.held_out_class_names),
        train=pool,
        test=comp,
    )
    return make_x_shot_task(base, shots=5, seed=0)


def task_metrics(result) -> tuple[float, float]:
    ap = float(np.mean([v for k, v in result.per_class_ap.items() if k in SPEC.held_out_class_names]))
    ap50 = float(
        np.mean([v for k, v in result.per_class_ap50.items() if k in SPEC.held_out_class_names])
    )
    return ap, ap50


@pytest.mark.slow
class TestCriterion5TransferRegimes:
    def test_regime_ordering(self):
        task = transfer_task()
        gaps = {}
        gaps50 = {}
        hashes_ok = True
        pt_metrics = {}
        for kind in ("deep", "late"):
            base = ac5_base(kind)
            before = parameter_hash(base)
            embedding, _curve = prompt_tune(base, task, seed=0, **AC5_PT)
            hashes_ok &= parameter_hash(base) == before == embedding.base_parameter_hash
            pt = task_metrics(evaluate_prompt_embedding(base, task, embedding))
            tuned = full_tune(base, task, steps=300, lr=1e-4, seed=0)
            ft_result, _ = evaluate_detection(tuned, task.test, task.eval_names())
            ft = task_metrics(ft_result)
            gaps[kind] = ft[0] - pt[0]
            gaps50[kind] = ft[1] - pt[1]
            pt_metrics[kind] = pt

        deep = ac5_base("deep")
        before = parameter_hash(deep)
        probe, _frozen = linear_probe(deep, task, steps=300, seed=0)
        hashes_ok &= parameter_hash(deep) == before
        lp_result, _ = evaluate_detection(probe, task.test, task.eval_names())
        lp = task_metrics(lp_result)

        ok = (
            gaps["deep"] <= 0.05
            and gaps["late"] > gaps["deep"]
            and lp[0] <= pt_metrics["deep"][0]
            and hashes_ok
        )
        record_acceptance(
            "AC5",
            ok,
            f"AP gap deep {gaps['deep'] * 100:+.1f} pts (<= 5 required), "
            f"late {gaps['late'] * 100:+.1f} pts (> deep required); "
            f"linear probe AP {lp[0]:.3f} vs prompt tune {pt_metrics['deep'][0]:.3f}; "
            f"AP50 view: deep gap {gaps50['deep'] * 100:+.1f}, late {gaps50['late'] * 100:+.1f}, "
            f"lp {lp[1]:.3f} vs pt {pt_metrics['deep'][1]:.3f}; hashes intact: {hashes_ok}",
        )
        assert ok, (gaps, gaps50, lp, pt_metrics)


# -- criterion 6: self-training gain --------------------------------------------


@pytest.mark.slow
class TestCriterion6SelfTraining:
    def test_student_beats_teacher_on_pseudo_only_classes(self):
        corpus, comp = shapes_corpus()
        pool_records = generate_records(
            SPEC, seed=888, count=250, id_prefix="web",
            pair_pool=SPEC.all_pairs, force_first_pair=list(SPEC.held_out_pairs),
        )
        pool = [
            CaptionedImage(image_id=r.image_id, caption=r.caption, image=r.image)
            for r in pool_records
        ]
        margins = []
        details = []
        for seed in (0, 1, 2):
            teacher = trained_model("deep", seed)
            teacher_ap = held_out_ap50(teacher, comp)
            pseudo = generate_pseudo_labels(teacher, pool, threshold=0.5)
            assert pseudo, "teacher produced no confident pseudo labels"
            for record in pseudo:
                for ann in record.annotations:
                    assert all(c > 0.5 for c in ann.confidences)
            student_corpus, _report = assemble_student_corpus(
                corpus["train"], pseudo, mixing=(1, 1)
            )
            student = GroundingModel(ModelConfig(fusion_enabled=True), seed=seed + 50)
            train(
                student,
                student_corpus,
                sorted(SPEC.train_class_names),
                TrainConfig(seed=seed + 50, **TRAIN_RECIPE),
            )
            student_ap = held_out_ap50(student, comp)
            margins.append(student_ap - teacher_ap)
            details.append(f"seed {seed}: student {student_ap:.3f} vs teacher {teacher_ap:.3f}")
        median = float(np.median(margins))
        ok = median > 0.0
        record_acceptance(
            "AC6",
            ok,
            f"median pseudo-only-class AP50 margin {median * 100:+.1f} pts over 3 seeds "
            f"({'; '.join(details)})",
        )
        assert ok, margins

    def test_teacher_recall_on_gold_measured(self):
        # derived measurement, reported but not asserted: how much of the gold
        # phrase set the teacher reproduces when re-run on gold images
        from phrasebox.boxes import iou_matrix

        corpus, _ = shapes_corpus()
        teacher = trained_model("deep", 0)
        gold_records = corpus["val"][:80]
        pool = [
            CaptionedImage(image_id=r.image_id, caption=r.caption, image=r.image)
            for r in gold_records
        ]
        pseudo = {r.image_id: r for r in generate_pseudo_labels(teacher, pool, threshold=0.5)}
        total = recovered = 0
        for record in gold_records:
            regenerated = pseudo.get(record.image_id)
            for ann in record.annotations:
                total += 1
                if regenerated is None:
                    continue
                match = next(
                    (a for a in regenerated.annotations if a.char_span == ann.char_span), None
                )
                if match is None:
                    continue
                ious = iou_matrix(np.array(match.boxes), np.array(ann.boxes))
                if ious.max() >= 0.5:
                    recovered += 1
        r0 = recovered / max(total, 1)
        record_acceptance(
            "AC6-teacher-recall", True,
            f"teacher reproduces gold phrases at recall r0 = {r0:.3f} "
            f"({recovered}/{total} phrase sets, IoU >= 0.5; measured, not asserted)",
        )

    def test_generation_idempotent_byte_identical(self, tmp_path):
        teacher = trained_model("deep", 0)
        pool_records = generate_records(
            SPEC, seed=888, count=60, id_prefix="web",
            pair_pool=SPEC.all_pairs, force_first_pair=list(SPEC.held_out_pairs),
        )
        pool = [
            CaptionedImage(image_id=r.image_id, caption=r.caption, image=r.image)
            for r in pool_records
        ]
        first = generate_pseudo_labels(teacher, pool, threshold=0.5)
        second = generate_pseudo_labels(teacher, pool, threshold=0.5)
        write_records(first, tmp_path / "a.jsonl")
        write_records(second, tmp_path / "b.jsonl")
        identical = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        record_acceptance(
            "AC6-idempotence", identical,
            f"two pseudo-label generations byte-identical over {len(first)} records",
        )
        assert identical


# -- criterion 8: chunked-inference consistency ---------------------------------


@pytest.mark.slow
class TestCriterion8ChunkedInference:
    def test_late_fusion_chunked_identical(self):
        corpus, _ = shapes_corpus()
        late = trained_model("late", 0)
        names = SPEC.class_names
        prompt_cfg = PromptConfig(chunk_size=5)
        mismatches = 0
        for record in corpus["val"]:
            direct = infer(late, record.image, build_detection_prompt(names, prompt_cfg))
            chunked = infer_chunked(late, record.image, names, prompt_cfg)
            if direct != chunked:
                mismatches += 1
        ok = mismatches == 0
        record_acceptance(
            "AC8a", ok,
            f"late-fusion chunked == unchunked detections on {len(corpus['val'])} images",
        )
        assert ok

    def test_deep_fusion_chunked_ap_within_two_points(self):
        corpus, _ = shapes_corpus()
        deep = trained_model("deep", 0)
        names = SPEC.class_names
        direct, _ = evaluate_detection(deep, corpus["val"], names)
        chunked, _ = evaluate_detection(
            deep, corpus["val"], names, PromptConfig(chunk_size=5), chunked=True
        )
        diff = abs(direct.ap - chunked.ap)
        ok = diff <= 0.02
        record_acceptance(
            "AC8b", ok,
            f"deep-fusion chunked AP {chunked.ap:.3f} vs unchunked {direct.ap:.3f} "
            f"(|diff| {diff * 100:.2f} pts <= 2)",
        )
        assert ok


# -- regression baselines (spec examples, values established by running the
# pipeline at the frozen recipe) ------------------------------------------------


@pytest.mark.slow
class TestRegressionBaselines:
    def test_seen_class_detection_quality(self):
        corpus, _ = shapes_corpus()
        deep = trained_model("deep", 0)
        result, _ = evaluate_detection(deep, corpus["val"], SPEC.class_names)
        seen_ap = float(
            np.mean([v for k, v in result.per_class_ap.items() if k in SPEC.train_class_names])
        )
        seen_ap50 = float(
            np.mean([v for k, v in result.per_class_ap50.items() if k in SPEC.train_class_names])
        )
        # frozen desk-scale floors; see the decisions ledger for the gap to
        # the aspirational 0.8 COCO-AP figure
        assert seen_ap >= 0.55, seen_ap
        assert seen_ap50 >= 0.75, seen_ap50

    def test_grounding_recall_on_captions(self):
        from phrasebox.evaluation import evaluate_grounding

        corpus, _ = shapes_corpus()
        deep = trained_model("deep", 0)
        recall = evaluate_grounding(deep, corpus["val"][:60])
        assert recall[1] >= 0.5, recall
        assert recall[1] <= recall[5] <= recall[10]

    def test_trained_deep_fusion_region_features_depend_on_prompt(self):
        # late fusion is prompt-independent by construction; a trained deep
        # checkpoint must not be
        deep = trained_model("deep", 0)
        corpus, _ = shapes_corpus()
        image = torch.from_numpy(
            np.ascontiguousarray(corpus["val"][0].image, dtype=np.float32)
        )
        with torch.no_grad():
            out_a = deep(image, build_detection_prompt(["red circle"]))
            out_b = deep(image, build_detection_prompt(["blue square"]))
        assert not torch.equal(out_a.region_features, out_b.region_features)
