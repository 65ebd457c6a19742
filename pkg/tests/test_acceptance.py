"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The verdict lines are repeated in the "acceptance criteria" section of the
pytest terminal summary. Criteria 7 to 9 share one seeded study (five seeds,
one baseline per seed, four finetunes from it), so they run long.
"""

import json
import time

import numpy as np
import pytest

from sbirlab import autodiff as ad
from sbirlab import formats
from sbirlab.encoders import (CnnEncoderConfig, EmbeddingPool, VitEncoderConfig, embed, forward,
                              init_params, mirror_embedding)
from sbirlab.experiments import direction_study, evaluate_checkpoint, vit_sanity
from sbirlab.retrieval import EmbeddingIndex, improvement_percentage, knn
from sbirlab.sampling import (BatchSpec, Strategy, batch_violations, draw_group_size, sample_batch)
from sbirlab.synth import SynthSpec, generate_dataset
from sbirlab.training import LossConfig, TrainSchedule, batch_loss, finetune, train, triplet_loss

from acceptance_log import criterion
from oracles import OP_CASES, brute_force_knn, check_gradients, check_gradients_piecewise

SEEDS = (0, 1, 2, 3, 4)


# -- 1. gradients ------------------------------------------------------------

GRAD_CNN = dict(stage_channels=(2, 3), input_size=(16, 16), num_classes=3)
GRAD_VIT = dict(patch_size=4, model_dim=8, num_heads=2, depth=1, num_classes=3,
                input_size=(16, 16), mlp_dim=8)


def _full_loss_error(ds, photo_cfg, sketch_cfg, seed):
    rng = np.random.default_rng(seed)
    strategy = list(Strategy)[seed % len(Strategy)]
    batch = sample_batch(ds, BatchSpec(strategy=strategy, batch_size=4), rng)
    photo = init_params(photo_cfg, 2 * seed)
    sketch = init_params(sketch_cfg, 2 * seed + 1)
    loss = LossConfig()

    def build():
        return batch_loss(photo, photo_cfg, sketch, sketch_cfg, batch, loss)[0]

    leaves = list(photo.values()) + list(sketch.values())
    coords = [rng.choice(t.size, size=min(t.size, 2), replace=False) for t in leaves]
    # a 1e-4 step leaves ~1e-4 truncation error through layer norm on mostly blank
    # sketches; at 1e-5 rounding noise is ~1e-10, hence the matching relative-error floor
    return check_gradients_piecewise(build, leaves, coords, eps=1e-5, floor=1e-5)


def test_criterion_01_gradients(tiny_dataset):
    with criterion(1, "finite-difference gradients, all ops + full loss, 50 seeds") as d:
        start = time.perf_counter()
        worst, skipped = {}, 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            for name, factory in OP_CASES.items():
                build, leaves = factory(rng)
                worst[name] = max(worst.get(name, 0.0), check_gradients(build, leaves))
            pool = list(EmbeddingPool)[seed % 2]
            cnn = CnnEncoderConfig(**GRAD_CNN, embedding_pool=pool)
            vit = VitEncoderConfig(**GRAD_VIT)
            for name, cfg in (("loss_cnn", cnn), ("loss_vit", vit)):
                err, skip = _full_loss_error(tiny_dataset, cfg, cfg, seed)
                worst[name] = max(worst.get(name, 0.0), err)
                skipped += skip
        elapsed = time.perf_counter() - start
        d["max_rel_err"] = max(worst.values())
        d["worst"] = max(worst, key=worst.get)
        d["kink_skipped_coords"] = skipped
        d["seconds"] = elapsed
        assert d["max_rel_err"] < 1e-4, worst
        assert elapsed < 120


# -- 2. triplet unit cases -----------------------------------------------------

def test_criterion_02_triplet_unit_cases():
    with criterion(2, "hinge example gives 0, substitution example gives 2") as d:
        t = lambda x: ad.Tensor(np.asarray(x, float))
        a = t([[0.0, 0.0]])
        hinge = triplet_loss(a, a, t([[1.0, 2.0]]), margin=3.0).item()
        subst = triplet_loss(a, t([[1.0, 0.0]]), t([[1.0, 1.0]]), margin=3.0).item()
        d["hinge"], d["substitution"] = hinge, subst
        assert hinge == 0.0 and subst == 2.0


# -- 3. knn oracle ---------------------------------------------------------------

def test_criterion_03_knn_oracle():
    with criterion(3, "knn equals exhaustive sort incl. ties, 100 indices") as d:
        start = time.perf_counter()
        mismatches = 0
        for trial in range(100):
            rng = np.random.default_rng(trial)
            n, dim = int(rng.integers(1, 1001)), int(rng.integers(1, 65))
            # every other index uses small integers so exact distance ties are common
            if trial % 2:
                vecs = rng.integers(-1, 2, size=(n, dim)).astype(float)
                query = rng.integers(-1, 2, size=dim).astype(float)
            else:
                vecs, query = rng.normal(size=(n, dim)), rng.normal(size=dim)
            ids = rng.permutation(3 * n)[:n]
            k = int(rng.integers(1, n + 1))
            index = EmbeddingIndex(ids, vecs, np.zeros(n, dtype=int))
            got = [i for i, _ in knn(index, query, k)]
            mismatches += got != brute_force_knn(ids, vecs, query, k)
        d["mismatches"] = mismatches
        d["seconds"] = time.perf_counter() - start
        assert mismatches == 0 and d["seconds"] < 60


# -- 4. pooling head dimension ------------------------------------------------------

def test_criterion_04_spatial_dim():
    with criterion(4, "Spatial2x2 embedding length is 4x Global1x1") as d:
        x = np.random.default_rng(0).random((2, 1, 32, 32))
        for channels in [(8, 16, 32), (4, 6), (5,)]:
            dims = {}
            for pool in EmbeddingPool:
                cfg = CnnEncoderConfig(stage_channels=channels, embedding_pool=pool)
                dims[pool] = embed(init_params(cfg, 0), cfg, x).shape[1]
                assert dims[pool] == cfg.embedding_dim
            d[f"dims{channels[-1]}"] = (dims[EmbeddingPool.GLOBAL_1X1], dims[EmbeddingPool.SPATIAL_2X2])
            assert dims[EmbeddingPool.SPATIAL_2X2] == 4 * dims[EmbeddingPool.GLOBAL_1X1]


# -- 5. constructed flip equivariance ------------------------------------------------

def _symmetric_params(cfg, seed):
    params = init_params(cfg, seed)
    for t in params.values():
        if t.ndim == 4:
            t.data = 0.5 * (t.data + t.data[..., ::-1])
    return params


def test_criterion_05_flip_equivariance():
    with criterion(5, "symmetric kernels: 1x1 flip invariant, 2x2 column-swap equivariant") as d:
        worst = {}
        for seed in range(5):
            x = np.random.default_rng(seed).random((4, 1, 32, 32))
            mirrored = x[..., ::-1].copy()
            for pool in EmbeddingPool:
                cfg = CnnEncoderConfig(embedding_pool=pool, stage_channels=(8, 16, 32))
                params = _symmetric_params(cfg, seed)
                e, em = forward(params, cfg, x).embedding.data, forward(params, cfg, mirrored).embedding.data
                target = e if pool == EmbeddingPool.GLOBAL_1X1 else mirror_embedding(e, cfg)
                worst[pool.value] = max(worst.get(pool.value, 0.0), float(np.max(np.abs(em - target))))
        d.update(worst)
        assert max(worst.values()) < 1e-9


# -- 6. sampler invariants ---------------------------------------------------------

def test_criterion_06_sampler_invariants(default_split):
    with criterion(6, "1000 batches per strategy with zero violations, k histogram within 2%") as d:
        train_ds, _ = default_split
        violations = {}
        for strategy in Strategy:
            spec = BatchSpec(strategy=strategy)
            rng = np.random.default_rng(100 + list(Strategy).index(strategy))
            violations[strategy.value] = sum(
                len(batch_violations(sample_batch(train_ds, spec, rng), train_ds, spec))
                for _ in range(1000))
        rng = np.random.default_rng(7)
        draws = np.array([draw_group_size(rng) for _ in range(10_000)])
        freq = np.bincount(draws, minlength=6)[2:] / len(draws)
        d["violations"] = sum(violations.values())
        d["k_max_dev"] = float(np.max(np.abs(freq - 0.25)))
        assert violations == {s.value: 0 for s in Strategy}
        assert set(np.unique(draws)) == {2, 3, 4, 5} and d["k_max_dev"] < 0.02


# -- 7 to 9. direction-of-effect studies -------------------------------------------

@pytest.fixture(scope="module")
def study():
    start = time.perf_counter()
    summary = direction_study(SEEDS)
    return summary, time.perf_counter() - start


def test_criterion_07_pooling_direction(study):
    with criterion(7, "Spatial2x2 beats Global1x1 on recall@1 and flip confusion, 5 seeds") as d:
        summary, seconds = study
        d["recall_gain"] = summary.recall_gain("spatial2x2", "continued")
        d["flip_2x2"] = summary.mean_flip("spatial2x2")
        d["flip_1x1"] = summary.mean_flip("continued")
        d["study_minutes"] = seconds / 60
        assert d["recall_gain"] > 0
        assert d["flip_2x2"] < d["flip_1x1"]
        assert seconds <= 30 * 60


def test_criterion_08_flip_sampling_direction(study):
    with criterion(8, "Flip finetune lowers flip confusion vs continued baseline, 5 seeds") as d:
        summary, _ = study
        d["flip_sampler"] = summary.mean_flip("flip")
        d["continued"] = summary.mean_flip("continued")
        assert d["flip_sampler"] < d["continued"]


def test_criterion_09_category_sampling_direction(study):
    with criterion(9, "Category finetune improves category-mismatch errors, 5 seeds; 100->90 = 10") as d:
        summary, _ = study
        assert improvement_percentage(100, 90) == 10.0
        per_seed = summary.mismatch_improvements("category", "continued")
        defined = [p for p in per_seed if p is not None]
        d["per_seed"] = ["n/a" if p is None else round(p, 1) for p in per_seed]
        d["counts_continued"] = [r["continued"].category_mismatch_count for r in summary.reports]
        d["counts_category"] = [r["category"].category_mismatch_count for r in summary.reports]
        assert defined, "the continued baseline made no category-mismatch error on any seed"
        d["mean_improvement"] = float(np.mean(defined))
        assert d["mean_improvement"] > 0


# -- 10. toy transformer ------------------------------------------------------------

def test_criterion_10_vit_sanity():
    with criterion(10, "ViT: attention rows sum to 1, loss < 50% after 20 epochs, recall@1 >= 10x chance") as d:
        cfg = VitEncoderConfig()
        x = np.random.default_rng(0).random((6, 1, 32, 32))
        out = forward(init_params(cfg, 0), cfg, x)
        d["row_sum_err"] = max(float(np.max(np.abs(p.sum(axis=-1) - 1.0))) for p in out.attention)
        run = vit_sanity(seed=0)
        d["loss_ratio@20"] = run.loss_ratio
        d["recall@1"] = run.recall_at_1
        d["chance"] = run.chance
        assert d["row_sum_err"] < 1e-9
        assert run.loss_ratio < 0.5
        assert run.recall_at_1 >= 10 * run.chance


# -- 11. determinism and persistence ---------------------------------------------------

def test_criterion_11_determinism_and_round_trips(tmp_path):
    with criterion(11, "same seed gives bit-identical artifacts; file round trips bit-exact") as d:
        spec = SynthSpec(num_categories=3, instances_per_category=4, sketches_per_instance=2,
                         image_size=(16, 16), seed=9)
        cfg = CnnEncoderConfig(stage_channels=(4, 8), input_size=(16, 16), num_classes=3)
        sched = TrainSchedule(epochs=2, drop_epoch=1, initial_lr=1e-3, dropped_lr=1e-4,
                              finetune_lr=1e-5, batch_size=6, seed=4)

        def run():
            ds = generate_dataset(spec)
            ckpt = train(ds, cfg, cfg, BatchSpec(), LossConfig(), sched)
            ckpt = finetune(ckpt, ds, BatchSpec(strategy="flip_category"), sched, epochs=1)
            emb = embed(ckpt.photo_tensors(), ckpt.photo_config, ds.photos)
            report = formats.dumps(evaluate_checkpoint(ckpt, ds).to_dict())
            return ds, formats.checkpoint_to_bytes(ckpt), emb, report

        ds, ck1, emb1, rep1 = run()
        _, ck2, emb2, rep2 = run()
        d["checkpoint_identical"] = ck1 == ck2
        d["embeddings_identical"] = emb1.tobytes() == emb2.tobytes()
        d["report_identical"] = rep1 == rep2

        trips = {}
        ckpt = formats.checkpoint_from_bytes(ck1)
        formats.write_checkpoint(tmp_path / "m.ck", ckpt)
        trips["checkpoint"] = (tmp_path / "m.ck").read_bytes() == ck1
        ids = np.arange(len(emb1), dtype=np.int64) * 3
        formats.write_embeddings(tmp_path / "e.bin", ids, emb1)
        ids_back, emb_back = formats.read_embeddings(tmp_path / "e.bin")
        trips["embeddings"] = ids_back.tobytes() == ids.tobytes() and emb_back.tobytes() == emb1.tobytes()
        formats.write_dataset(tmp_path / "data", ds)
        ds_back, _, _ = formats.read_dataset(tmp_path / "data")
        trips["dataset"] = (ds_back.photos.tobytes() == ds.photos.tobytes()
                            and ds_back.sketches.tobytes() == ds.sketches.tobytes()
                            and ds_back.items == ds.items)
        formats.write_json(tmp_path / "r.json", json.loads(rep1))
        trips["report"] = formats.dumps(formats.read_json(tmp_path / "r.json")) == rep1
        d["round_trips"] = sorted(k for k, ok in trips.items() if ok)
        assert ck1 == ck2 and emb1.tobytes() == emb2.tobytes() and rep1 == rep2
        assert all(trips.values()), trips
