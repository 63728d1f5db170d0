#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""端到端服务测试：VLM 训练、GAN 训练与续训、生成、评价、探针、报告"""

import csv

import pytest
import torch

from app.core.checkpoint import (
    load_gan,
    load_run_state,
    load_vlm,
    parameter_digest,
    read_manifest,
    save_run_state,
)
from app.core.exceptions import CheckpointError, ConfigurationError, DataError, DivergenceError
from app.core.history import LossHistory, MetricsLog
from app.schemas.report import MetricReport
from app.service.evaluation_service import evaluation_service, owner_id
from app.service.gan_training_service import GANTrainer, active_levels, gan_training_service, stage_real_images
from app.service.generation_service import generation_service
from app.service.probe_service import vlms_probe_service
from app.service.report_service import report_service
from app.service.vlm_training_service import check_finite, matching_separation, vlm_training_service
from tests.conftest import make_config


def _trainer(vlm_dir, dataset, **overrides):
    config = make_config(**overrides)
    vlm, vocab, _, _ = load_vlm(vlm_dir, config)
    return GANTrainer(config, vlm, vocab, dataset)


# ------------------------ VLM ------------------------
def test_vlm_training_writes_checkpoint(vlm_dir):
    for name in ("text_encoder.pt", "vision_encoder.pt", "msb.pt", "vlm.manifest", "config.txt", "vocab.txt",
                 "metrics.log", "loss_history.json", "loss_curve.png"):
        assert (vlm_dir / name).exists(), name
    manifest = read_manifest(vlm_dir / "vlm.manifest")
    assert manifest["steps"] == "3"
    assert manifest["n_pairs"] == "12"
    assert manifest["include_test"] == "false"
    assert "held_out_separation" in manifest
    assert LossHistory.load(vlm_dir / "loss_history.json").iterations == [1, 2, 3]
    assert [row["iter"] for row in MetricsLog(vlm_dir / "metrics.log", resume_from=3).read()] == [1, 2, 3]


def test_loaded_vlm_is_frozen_and_checked(vlm_dir, tmp_path):
    model, vocab, config, _ = load_vlm(vlm_dir, make_config())
    assert not any(p.requires_grad for p in model.parameters())
    assert config.embed_dim == 16
    with pytest.raises(CheckpointError):
        load_vlm(vlm_dir, make_config(embed_dim=32))
    with pytest.raises(CheckpointError):
        load_vlm(tmp_path / "missing")


def _copy_dir(src, dst):
    dst.mkdir()
    for path in src.iterdir():
        (dst / path.name).write_bytes(path.read_bytes())
    return dst


def test_each_vlm_part_has_its_own_manifest(vlm_dir, tmp_path):
    for part in ("text_encoder", "vision_encoder", "msb"):
        manifest = read_manifest(vlm_dir / f"{part}.manifest")
        assert manifest["part"] == part
        assert manifest["D"] == "16" and manifest["dtype"] == "float32"
        assert int(manifest["num_params"]) > 0
    copy = _copy_dir(vlm_dir, tmp_path / "vlm")
    text = (copy / "msb.manifest").read_text(encoding="utf-8").replace("D=16", "D=32")
    (copy / "msb.manifest").write_text(text, encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_vlm(copy)
    (copy / "vision_encoder.pt").unlink()
    with pytest.raises(CheckpointError):
        load_vlm(copy)


def test_dtype_mismatch_with_vlm_fails_early(vlm_dir, toy_train):
    with pytest.raises(ConfigurationError):
        load_vlm(vlm_dir, make_config(dtype="float64"))
    vlm, vocab, _, _ = load_vlm(vlm_dir)
    with pytest.raises(ConfigurationError):
        GANTrainer(make_config(dtype="float64"), vlm, vocab, toy_train)


def test_tampered_vocab_is_rejected(vlm_dir, tmp_path):
    copy = tmp_path / "vlm"
    copy.mkdir()
    for path in vlm_dir.iterdir():
        (copy / path.name).write_bytes(path.read_bytes())
    with open(copy / "vocab.txt", "a", encoding="utf-8") as f:
        f.write("zebra\n")
    with pytest.raises(CheckpointError):
        load_vlm(copy)


def test_vlm_training_is_deterministic(toy_train, toy_vocab):
    a = vlm_training_service.train(toy_train, make_config(), vocab=toy_vocab)
    b = vlm_training_service.train(toy_train, make_config(), vocab=toy_vocab)
    assert a.steps == b.steps == 3
    assert parameter_digest(a.model) == parameter_digest(b.model)


def test_vlm_training_include_test(toy_train, toy_test, toy_vocab, tmp_path):
    result = vlm_training_service.train(toy_train, make_config(), vocab=toy_vocab, test_dataset=toy_test,
                                        include_test=True, out_dir=tmp_path)
    manifest = read_manifest(tmp_path / "vlm.manifest")
    assert manifest["n_pairs"] == "18" and manifest["include_test"] == "true"
    assert "held_out_separation" not in manifest
    assert result.steps == 18 // 4
    with pytest.raises(DataError):
        vlm_training_service.train(toy_train, make_config(), include_test=True)


def test_vlm_training_input_checks(toy_train, toy_vocab):
    with pytest.raises(DataError):
        vlm_training_service.train(toy_train, make_config(batch_size_vlm=16), vocab=toy_vocab)
    with pytest.raises(DataError):
        vlm_training_service.train(toy_train, make_config(base_size=16), vocab=toy_vocab)


def test_check_finite_raises_divergence():
    check_finite({"L_VLM": torch.tensor(1.0)}, "[t]")
    with pytest.raises(DivergenceError):
        check_finite({"L_VLM": torch.tensor(float("nan"))}, "[t]")


def test_matching_separation_keys(vlm_dir, toy_test):
    model, vocab, config, _ = load_vlm(vlm_dir)
    sep = matching_separation(model, toy_test, vocab, seed=0, t_max=config.t_max)
    assert set(sep) == {"matched", "mismatched", "separation"}
    assert 0.0 < sep["matched"] < 1.0 and 0.0 < sep["mismatched"] < 1.0
    assert sep["separation"] == pytest.approx(sep["matched"] - sep["mismatched"])


# ------------------------ GAN ------------------------
def test_stage_real_images_pools_to_each_size():
    images = torch.rand(2, 3, 32, 32)
    staged = stage_real_images(images, (8, 16, 32))
    assert [x.shape[-1] for x in staged] == [8, 16, 32]
    assert staged[-1] is images
    assert torch.allclose(staged[0].mean(dim=(-1, -2)), images.mean(dim=(-1, -2)), atol=1e-6)
    with pytest.raises(DataError):
        stage_real_images(images, (12,))


def test_active_levels():
    assert active_levels(make_config()) == ("local", "global", "general")
    assert active_levels(make_config(use_local_level=False, use_general_level=False)) == ("global",)


def test_gan_step_reports_every_term(vlm_dir, toy_train):
    trainer = _trainer(vlm_dir, toy_train)
    report = trainer.step()
    flat = report.as_dict()
    for key in ("L_local", "L_global", "L_general", "L_VLM", "L_VG", "L_VL", "L_VGEN", "L_VVM", "kl",
                "L_G0", "L_G1", "L_G2", "L_D0", "L_D1", "L_D2", "L_total"):
        assert key in flat, key
    assert report.L_VLM == pytest.approx(report.L_local + report.L_global + report.L_general, rel=1e-5)
    assert report.L_VVM == pytest.approx(report.L_VG + report.L_VL + report.L_VGEN, rel=1e-5)
    assert trainer.iteration == 1 and trainer.history.iterations == [1]


def test_gan_step_keeps_vlm_frozen_and_restores_discriminators(vlm_dir, toy_train):
    trainer = _trainer(vlm_dir, toy_train)
    before = parameter_digest(trainer.vlm)
    g_before = [p.detach().clone() for p in trainer.generator.parameters()]
    trainer.step()
    assert parameter_digest(trainer.vlm) == before
    assert all(p.requires_grad for p in trainer.discriminators.parameters())
    assert any(not torch.equal(a, b) for a, b in zip(g_before, trainer.generator.parameters()))


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _unchanged(module, snapshot):
    return all(torch.equal(v, snapshot[k]) for k, v in module.state_dict().items())


def test_supervision_reaches_only_the_last_image_head(vlm_dir, toy_train):
    trainer = _trainer(vlm_dir, toy_train)
    ctx = trainer.prepare()
    sup = trainer.supervision_losses(ctx)
    heads = trainer.generator.image_heads
    params = [p for head in heads for p in head.parameters()]
    grads = torch.autograd.grad(sup["L_VLM"] + sup["L_VVM"], params, allow_unused=True)
    by_head = []
    offset = 0
    for head in heads:
        n = len(list(head.parameters()))
        by_head.append(grads[offset:offset + n])
        offset += n
    for early in by_head[:-1]:
        assert all(g is None or torch.count_nonzero(g) == 0 for g in early)
    assert any(g is not None and torch.count_nonzero(g) > 0 for g in by_head[-1])


def test_generator_update_leaves_discriminators_alone(vlm_dir, toy_train):
    trainer = _trainer(vlm_dir, toy_train)
    ctx = trainer.prepare()
    d_before = _snapshot(trainer.discriminators)
    g_before = _snapshot(trainer.generator)
    trainer.update_generator(ctx)
    assert _unchanged(trainer.discriminators, d_before)
    assert not _unchanged(trainer.generator, g_before)


def test_discriminator_update_leaves_generator_alone(vlm_dir, toy_train):
    trainer = _trainer(vlm_dir, toy_train)
    ctx = trainer.prepare()
    g_before = _snapshot(trainer.generator)
    ca_before = _snapshot(trainer.generator.ca)
    d_before = _snapshot(trainer.discriminators)
    trainer.update_discriminators(ctx)
    assert _unchanged(trainer.generator, g_before)
    assert _unchanged(trainer.generator.ca, ca_before)
    assert not _unchanged(trainer.discriminators, d_before)


def test_supervision_weights_do_not_change_first_adversarial_losses(vlm_dir, toy_train):
    plain = _trainer(vlm_dir, toy_train, lambda1=0.0, lambda2=0.0).step()
    full = _trainer(vlm_dir, toy_train).step()
    assert "L_VLM" in full.as_dict() and "L_VLM" not in plain.as_dict()
    assert plain.L_D == pytest.approx(full.L_D, rel=1e-12, abs=1e-12)
    assert plain.L_G_adv == pytest.approx(full.L_G_adv, rel=1e-12, abs=1e-12)
    assert plain.kl == pytest.approx(full.kl, rel=1e-12, abs=1e-12)
    assert plain.L_total != pytest.approx(full.L_total)


@pytest.mark.parametrize("overrides,present,absent", [
    ({"lambda1": 0.0, "lambda2": 0.0}, [], ["L_VLM", "L_VVM"]),
    ({"use_vvm_supervision": False}, ["L_VLM"], ["L_VVM", "L_VG"]),
    ({"use_vlm_supervision": False}, ["L_VVM"], ["L_VLM"]),
    ({"use_local_level": False, "use_general_level": False}, ["L_global", "L_VG"],
     ["L_local", "L_general", "L_VL", "L_VGEN"]),
])
def test_gan_ablations(vlm_dir, toy_train, overrides, present, absent):
    flat = _trainer(vlm_dir, toy_train, **overrides).step().as_dict()
    for key in present:
        assert key in flat, key
    for key in absent:
        assert key not in flat, key
    assert "L_total" in flat and "L_G2" in flat


def test_gan_rejects_supervision_without_levels(vlm_dir, toy_train):
    with pytest.raises(ConfigurationError):
        _trainer(vlm_dir, toy_train, use_local_level=False, use_global_level=False, use_general_level=False)
    # 监督全部关闭时不需要匹配层级
    _trainer(vlm_dir, toy_train, use_local_level=False, use_global_level=False, use_general_level=False,
             lambda1=0.0, lambda2=0.0)


def test_gan_requires_frozen_vlm(vlm_dir, toy_train):
    config = make_config()
    vlm, vocab, _, _ = load_vlm(vlm_dir, config)
    vlm.msb.requires_grad_(True)
    with pytest.raises(CheckpointError):
        GANTrainer(config, vlm, vocab, toy_train)


def test_gan_resume_matches_uninterrupted_run(vlm_dir, toy_train, tmp_path):
    straight = _trainer(vlm_dir, toy_train)
    for _ in range(3):
        straight.step()

    first = _trainer(vlm_dir, toy_train)
    first.step()
    first.step()
    path = save_run_state(tmp_path / "run_state.pt", first.state_dict())

    resumed = _trainer(vlm_dir, toy_train)
    resumed.load_state_dict(load_run_state(path))
    assert resumed.iteration == 2
    resumed.step()

    assert resumed.history.iterations == [1, 2, 3]
    for a, b in zip(straight.generator.state_dict().values(), resumed.generator.state_dict().values()):
        assert torch.allclose(a, b, atol=1e-6)
    for a, b in zip(straight.discriminators.state_dict().values(), resumed.discriminators.state_dict().values()):
        assert torch.allclose(a, b, atol=1e-6)


def test_gan_state_rejects_other_config(vlm_dir, toy_train):
    state = _trainer(vlm_dir, toy_train).state_dict()
    with pytest.raises(CheckpointError):
        _trainer(vlm_dir, toy_train, seed=99).load_state_dict(state)


def test_gan_service_writes_checkpoint(gan_dir, vlm_dir):
    for name in ("gan.pt", "gan.manifest", "config.txt", "vocab.txt", "run_state.pt", "loss_history.json",
                 "loss_curve.png", "metrics.log"):
        assert (gan_dir / name).exists(), name
    manifest = read_manifest(gan_dir / "gan.manifest")
    assert manifest["iteration"] == "3"
    assert manifest["vlm_digest"] == parameter_digest(load_vlm(vlm_dir)[0])
    assert LossHistory.load(gan_dir / "loss_history.json").iterations == [1, 2, 3]

    bundle = load_gan(gan_dir)
    assert bundle.config.stage_sizes == (8, 16, 32)
    assert not bundle.generator.training
    assert not any(p.requires_grad for p in bundle.text_encoder.parameters())


def test_gan_service_resume_checks(toy_train, vlm_dir, gan_dir, tmp_path):
    with pytest.raises(CheckpointError):
        gan_training_service.train(toy_train, vlm_dir, make_config(), tmp_path / "fresh", resume=True)
    copy = tmp_path / "gan"
    copy.mkdir()
    for path in gan_dir.iterdir():
        (copy / path.name).write_bytes(path.read_bytes())
    with pytest.raises(CheckpointError):
        gan_training_service.train(toy_train, vlm_dir, make_config(seed=5), copy, resume=True)
    # 已完成的运行续训时不再迭代
    result = gan_training_service.train(toy_train, vlm_dir, make_config(), copy, resume=True)
    assert result.trainer.iteration == 3
    assert [row["iter"] for row in MetricsLog(copy / "metrics.log", resume_from=3).read()] == [1, 2, 3]


# ------------------------ 生成 ------------------------
def _captions(dataset, n=3):
    return [(ex.image_id, ex.captions[0]) for ex in list(dataset)[:n]]


def test_generate_writes_images_and_captions(gan_dir, toy_test, tmp_path):
    captions = _captions(toy_test)
    paths = generation_service.generate(gan_dir, captions, n_per_caption=2, out_dir=tmp_path, seed=3)
    assert len(paths) == 6
    stems = sorted(p.stem for p in paths)
    assert stems == sorted(f"{image_id}_{k}" for image_id, _ in captions for k in range(2))
    with open(tmp_path / "captions.tsv", encoding="utf-8") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    assert rows[0] == ["image_id", "caption"]
    assert len(rows) == 7
    assert all(owner_id(stem) in {image_id for image_id, _ in captions} for stem, _ in rows[1:])


def test_generate_is_seeded(gan_dir, toy_test, tmp_path):
    captions = _captions(toy_test, 2)
    a = generation_service.generate(gan_dir, captions, 1, tmp_path / "a", seed=7)
    b = generation_service.generate(gan_dir, captions, 1, tmp_path / "b", seed=7)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_generate_argument_checks(gan_dir, tmp_path):
    with pytest.raises(ConfigurationError):
        generation_service.generate(gan_dir, [("x", "a red circle")], 0, tmp_path)
    with pytest.raises(DataError):
        generation_service.generate(gan_dir, [("x", "a zebra hexagon")], 1, tmp_path)
    with pytest.raises(CheckpointError):
        generation_service.generate(tmp_path / "missing", [("x", "a red circle")], 1, tmp_path)


# ------------------------ 评价 ------------------------
@pytest.fixture(scope="module")
def generated_dir(gan_dir, toy_test, tmp_path_factory):
    out = tmp_path_factory.mktemp("generated")
    generation_service.generate(gan_dir, _captions(toy_test, len(toy_test)), 1, out, seed=0)
    return out


def test_owner_id():
    assert owner_id("test_00003_0") == "test_00003"
    assert owner_id("a_b_12") == "a_b"
    for bad in ("nounderscore", "img_x"):
        with pytest.raises(DataError):
            owner_id(bad)


def test_evaluate_reports_every_metric(generated_dir, toy_test, vlm_dir, tmp_path):
    report = evaluation_service.evaluate(generated_dir, toy_test, vlm_dir, out_dir=tmp_path, pool_size=5,
                                         n_splits=2, classifier_epochs=1)
    assert isinstance(report, MetricReport)
    assert report.n_samples == len(toy_test)
    assert 0.0 < report.vlms_mean < 1.0 and report.vlms_std >= 0.0
    assert report.is_mean >= 1.0 - 1e-9
    assert report.fid >= 0.0
    assert 0.0 <= report.r_precision_mean <= 1.0
    for name in ("metrics.json", "metrics.tsv", "metrics.png", "classifier.pt", "classifier.manifest"):
        assert (tmp_path / name).exists(), name

    # 第二次评价复用缓存的分类器，结果一致
    again = evaluation_service.evaluate(generated_dir, toy_test, vlm_dir, out_dir=tmp_path, pool_size=5,
                                        n_splits=2, classifier_epochs=1)
    assert again.fid == pytest.approx(report.fid)
    assert again.is_mean == pytest.approx(report.is_mean)


def test_evaluate_missing_image(generated_dir, toy_test, vlm_dir, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "captions.tsv").write_text((generated_dir / "captions.tsv").read_text(encoding="utf-8"),
                                         encoding="utf-8")
    with pytest.raises(DataError):
        evaluation_service.evaluate(broken, toy_test, vlm_dir, pool_size=5, n_splits=2, classifier_epochs=1)


def test_evaluate_pool_larger_than_distractors(generated_dir, toy_test, vlm_dir):
    with pytest.raises(DataError):
        evaluation_service.evaluate(generated_dir, toy_test, vlm_dir, pool_size=1000, n_splits=2,
                                    classifier_epochs=1)


# ------------------------ 探针与报告 ------------------------
def test_probe_rows_and_files(vlm_dir, toy_test, tmp_path):
    sigmas, fractions = (0.1, 0.5), (0.2, 0.7)
    rows = vlms_probe_service.probe(toy_test, vlm_dir, out_dir=tmp_path, sigmas=sigmas, mask_fractions=fractions)
    assert [(r.probe, r.level) for r in rows] == [
        ("ground_truth", None), ("random", None),
        ("noise", 0.1), ("noise", 0.5),
        ("mask", 0.2), ("mask", 0.7),
        ("replace", 0.2), ("replace", 0.7),
        ("stopwords", None),
    ]
    assert all(r.n == len(toy_test) and 0.0 < r.vlms_mean < 1.0 for r in rows)
    for name in ("vlms_probe.json", "vlms_probe.tsv", "vlms_probe.png"):
        assert (tmp_path / name).exists(), name

    again = vlms_probe_service.probe(toy_test, vlm_dir, sigmas=sigmas, mask_fractions=fractions, replace=False)
    assert [r.vlms_mean for r in again] == [r.vlms_mean for r in rows if r.probe != "replace"]


def test_report_collects_runs(vlm_dir, gan_dir, toy_test, tmp_path):
    probe_dir = tmp_path / "probe"
    vlms_probe_service.probe(toy_test, vlm_dir, out_dir=probe_dir, sigmas=(0.1,), mask_fractions=(0.5,))
    produced = report_service.build([vlm_dir, gan_dir, probe_dir], tmp_path / "report")
    assert len(produced["loss_curves"]) == 2
    assert len(produced["probe_plots"]) == 1
    assert (tmp_path / "report" / "report.json").exists()
    with pytest.raises(DataError):
        report_service.build([tmp_path / "nope"], tmp_path / "report")

