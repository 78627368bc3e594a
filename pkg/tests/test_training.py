"""Stage orchestration: freezing, determinism, stage tags, ablations."""

import numpy as np
import pytest

from tsarank.data import RankExample, SynthParams, WeakPair, synth_corpus
from tsarank.model import LmConfig, new_model
from tsarank.objectives import SftHyperparams
from tsarank.training import (
    ABLATION_CONFIGS,
    EmptyDatasetError,
    StageConfig,
    StageError,
    ablation_suite,
    default_sft_trainable_layers,
    run_cpt,
    run_sft,
    trainable_parameter_names,
)

MICRO_CONFIG = LmConfig(vocab_size=260, num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, max_sequence_length=96)


def micro_pairs(n=10):
    return [
        WeakPair(pair_id=f"p{i}", query=f"word{i % 4}", document=f"word{i % 4} plus text {i}", category="title-body")
        for i in range(n)
    ]


def micro_examples(n=6, m=2):
    out = []
    for i in range(n):
        out.append(
            RankExample(
                query_id=f"q{i}",
                query=f"word{i % 3}",
                positive_id=f"pos{i}",
                positive=f"word{i % 3} in this document",
                negative_ids=tuple(f"n{i}_{j}" for j in range(m)),
                negatives=tuple(f"other text {j} number {i}" for j in range(m)),
            )
        )
    return out


def sft_config(**kw):
    defaults = dict(
        epochs=1,
        batch_size=2,
        learning_rate=1e-3,
        seed=5,
        trainable_layers=1,
        train_embeddings=False,
        train_head=True,
        hyperparams=SftHyperparams(tau=0.5, alpha=0.6, num_negatives=2),
    )
    defaults.update(kw)
    return StageConfig(**defaults)


class TestFreezePolicy:
    def test_default_sft_trains_top_half(self):
        assert default_sft_trainable_layers(2) == 1
        assert default_sft_trainable_layers(32) == 16
        assert default_sft_trainable_layers(3) == 2

    def test_trainable_names_top_layers_only(self):
        cfg = StageConfig(trainable_layers=1, train_embeddings=False, train_head=True, seed=0)
        names = trainable_parameter_names(MICRO_CONFIG, cfg)
        assert any(n.startswith("layers.1.") for n in names)
        assert not any(n.startswith("layers.0.") for n in names)
        assert "head.weight" in names and "final_norm.gain" in names
        assert "embed.tok" not in names

    def test_too_many_layers_rejected(self):
        cfg = StageConfig(trainable_layers=5, seed=0)
        with pytest.raises(ValueError):
            trainable_parameter_names(MICRO_CONFIG, cfg)


class TestRunCpt:
    def test_zero_learning_rate_keeps_parameters(self):
        base = new_model(MICRO_CONFIG, seed=1)
        out, _ = run_cpt(base, micro_pairs(), StageConfig(learning_rate=0.0, batch_size=4, seed=2))
        assert out.stage == "cpt"
        for name in base.params:
            assert np.array_equal(out.params[name].values, base.params[name].values)

    def test_deterministic_under_seed(self):
        base = new_model(MICRO_CONFIG, seed=1)
        cfg = StageConfig(learning_rate=1e-3, batch_size=4, seed=7)
        a, log_a = run_cpt(base, micro_pairs(), cfg)
        b, log_b = run_cpt(base, micro_pairs(), cfg)
        assert log_a == log_b
        for name in a.params:
            assert np.array_equal(a.params[name].values, b.params[name].values)

    def test_training_reduces_loss(self):
        base = new_model(MICRO_CONFIG, seed=1)
        _, records = run_cpt(base, micro_pairs(20), StageConfig(learning_rate=3e-3, batch_size=4, seed=3, epochs=3))
        assert records[-1]["loss"] < records[0]["loss"]

    def test_stage_and_input_validation(self):
        base = new_model(MICRO_CONFIG, seed=1)
        cpt, _ = run_cpt(base, micro_pairs(), StageConfig(seed=0, batch_size=4))
        with pytest.raises(StageError):
            run_cpt(cpt, micro_pairs(), StageConfig(seed=0))
        with pytest.raises(EmptyDatasetError):
            run_cpt(base, [], StageConfig(seed=0))

    def test_input_model_not_mutated(self):
        base = new_model(MICRO_CONFIG, seed=1)
        snapshot = {k: p.values.copy() for k, p in base.params.items()}
        run_cpt(base, micro_pairs(), StageConfig(learning_rate=1e-2, batch_size=4, seed=2))
        for name, values in snapshot.items():
            assert np.array_equal(base.params[name].values, values)


class TestRunSft:
    def make_cpt(self):
        base = new_model(MICRO_CONFIG, seed=1)
        cpt, _ = run_cpt(base, micro_pairs(), StageConfig(learning_rate=1e-3, batch_size=4, seed=2))
        return cpt

    def test_frozen_parameters_bit_identical(self):
        cpt = self.make_cpt()
        out, _ = run_sft(cpt, micro_examples(), sft_config())
        assert out.stage == "sft"
        frozen = [n for n in cpt.params if n.startswith("layers.0.") or n.startswith("embed.")]
        assert frozen
        for name in frozen:
            assert np.array_equal(out.params[name].values, cpt.params[name].values)
        assert any(
            not np.array_equal(out.params[n].values, cpt.params[n].values)
            for n in cpt.params
            if n.startswith("layers.1.") or n.startswith("head.")
        )

    def test_alpha_one_equals_disabled_auxiliaries_step_by_step(self):
        cpt = self.make_cpt()
        hp1 = SftHyperparams(tau=0.5, alpha=1.0, num_negatives=2)
        _, log_alpha1 = run_sft(cpt, micro_examples(), sft_config(hyperparams=hp1))
        hp2 = SftHyperparams(tau=0.5, alpha=0.6, num_negatives=2)
        _, log_noaux = run_sft(cpt, micro_examples(), sft_config(hyperparams=hp2, ntp_aux=False, dp_aux=False))
        assert len(log_alpha1) == len(log_noaux)
        for a, b in zip(log_alpha1, log_noaux):
            assert abs(a["loss"] - b["loss"]) <= 1e-12
            assert abs(a["loss_rank"] - b["loss_rank"]) <= 1e-12

    def test_from_base_allowed_with_warning(self, caplog):
        base = new_model(MICRO_CONFIG, seed=1)
        with caplog.at_level("WARNING"):
            out, _ = run_sft(base, micro_examples(), sft_config())
        assert out.stage == "sft"
        assert any("base" in rec.message for rec in caplog.records)

    def test_sft_checkpoint_rejected_as_input(self):
        cpt = self.make_cpt()
        sft, _ = run_sft(cpt, micro_examples(), sft_config())
        with pytest.raises(StageError):
            run_sft(sft, micro_examples(), sft_config())

    def test_m_mismatch_rejected(self):
        cpt = self.make_cpt()
        cfg = sft_config(hyperparams=SftHyperparams(tau=0.5, alpha=0.6, num_negatives=3))
        with pytest.raises(ValueError):
            run_sft(cpt, micro_examples(m=2), cfg)

    def test_deterministic_under_seed(self):
        cpt = self.make_cpt()
        a, log_a = run_sft(cpt, micro_examples(), sft_config())
        b, log_b = run_sft(cpt, micro_examples(), sft_config())
        assert log_a == log_b
        for name in a.params:
            assert np.array_equal(a.params[name].values, b.params[name].values)

    def test_loss_components_logged(self):
        cpt = self.make_cpt()
        _, records = run_sft(cpt, micro_examples(), sft_config())
        assert all({"loss", "loss_rank", "loss_ntp", "loss_dp"} <= set(r) for r in records)


class TestAblationSuite:
    def run_suite(self):
        params = SynthParams(
            vocab_words=30, corpus_size=24, num_weak_pairs=16, num_train_queries=6, num_eval_queries=4
        )
        ds = synth_corpus(params, seed=3)
        examples = []
        doc_ids = list(ds.corpus)
        for i, (query_id, text) in enumerate(ds.train_queries.items()):
            positive_id = next(d for (q, d) in ds.train_qrels if q == query_id)
            negatives = [d for d in doc_ids if d != positive_id][i : i + 2]
            examples.append(
                RankExample(
                    query_id=query_id, query=text,
                    positive_id=positive_id, positive=ds.corpus[positive_id],
                    negative_ids=tuple(negatives), negatives=tuple(ds.corpus[d] for d in negatives),
                )
            )
        base = new_model(MICRO_CONFIG, seed=11)
        runs = ablation_suite(
            base,
            ds.weak_pairs,
            examples,
            ds.corpus,
            ds.eval_queries,
            ds.eval_qrels,
            cpt_cfg=StageConfig(learning_rate=1e-3, batch_size=4, seed=1),
            sft_cfg=sft_config(),
            k=10,
            num_candidates=6,
        )
        return base, runs

    def test_emits_all_seven_configurations(self):
        _, runs = self.run_suite()
        assert set(runs) == set(ABLATION_CONFIGS)
        assert len(ABLATION_CONFIGS) == 7

    def test_no_training_row_is_untouched_base(self):
        base, runs = self.run_suite()
        row = runs["-cpt_sft"]
        for name in base.params:
            assert np.array_equal(row.model.params[name].values, base.params[name].values)
        assert row.model.stage == "base"

    def test_no_aux_row_matches_alpha_one_per_step(self):
        _, runs = self.run_suite()
        log_noaux = runs["-ntp_dp"].sft_log
        assert log_noaux, "ablation must actually fine-tune"
        assert all("loss_ntp" not in r and "loss_dp" not in r for r in log_noaux)
