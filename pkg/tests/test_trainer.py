import numpy as np
import pytest
import torch

from examrec import SyntheticConfig, build_hetero_graph, generate_synthetic, leave_one_out_split
from examrec.config import RunConfig
from examrec.diffusion import DenoiserNet, GateState, elbo_loss, gate
from examrec.errors import ConfigError
from examrec.evaluation import evaluate
from examrec.trainer import (
    Checkpoint,
    LossLog,
    evaluate_checkpoint,
    make_instances,
    schedule_for,
    train,
    train_stage1,
    train_stage2,
    validation_split,
)

TINY = RunConfig(embed_dim=8, epochs=3, rounds=2, diff_steps=5, k=8, kan_blocks=1, batch_size=32,
                 dropout=0.0, eval_negatives=20)


@pytest.fixture(scope="module")
def toy():
    return generate_synthetic(SyntheticConfig(n_patients=50, seed=2))


@pytest.fixture(scope="module")
def toy_graph(toy):
    return build_hetero_graph(leave_one_out_split(toy).train)


class TestStage1:
    def test_unit_gate_matches_plain_elbo_training(self, toy_graph):
        cfg = TINY.replace(denoiser_epochs=3, batch_size=16)
        torch.manual_seed(0)
        den_a = DenoiserNet(toy_graph.adjacency.shape[1], cfg.step_dim)
        den_b = DenoiserNet(toy_graph.adjacency.shape[1], cfg.step_dim)
        den_b.load_state_dict(den_a.state_dict())

        state = GateState(cfg.gate_window, 1.0)
        for loss in [5.0, 4.0, 6.0, 3.0, 7.0, 2.0, 9.0]:
            assert gate(state, loss) == 1.0
        _, _, losses_a = train_stage1(toy_graph, cfg, state, den_a, generator=torch.Generator().manual_seed(4))

        gen = torch.Generator().manual_seed(4)
        opt = torch.optim.Adam(den_b.parameters(), lr=cfg.denoiser_lr)
        X = torch.as_tensor(toy_graph.adjacency, dtype=torch.float32)
        losses_b = []
        for _ in range(3):
            perm = torch.randperm(X.shape[0], generator=gen)
            total = 0.0
            for lo in range(0, X.shape[0], 16):
                batch = X[perm[lo:lo + 16]]
                loss = elbo_loss(batch, den_b, schedule_for(cfg), gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * batch.shape[0]
            losses_b.append(total / X.shape[0])
        assert losses_a == losses_b
        for pa, pb in zip(den_a.parameters(), den_b.parameters()):
            assert torch.equal(pa, pb)

    def test_zero_epochs_still_rebuilds(self, toy_graph):
        cfg = TINY.replace(denoiser_epochs=0)
        _, sub, losses = train_stage1(toy_graph, cfg, GateState())
        assert losses == []
        assert sub.adjacency.shape == toy_graph.adjacency.shape
        assert np.all(sub.adjacency.sum(1) >= cfg.k)

    @pytest.mark.parametrize("seed", range(3))
    def test_elbo_descends(self, seed):
        ds = generate_synthetic(SyntheticConfig(n_patients=50, seed=seed))
        graph = build_hetero_graph(ds)
        cfg = TINY.replace(denoiser_epochs=20, seed=seed, batch_size=16)
        _, _, losses = train_stage1(graph, cfg, GateState(), generator=torch.Generator().manual_seed(seed))
        assert losses[-1] < losses[0]

    def test_gate_multiplier_logged(self, toy_graph):
        state = GateState(2, 0.3)
        for loss in [1.0, 2.0, 3.0, 10.0]:
            gate(state, loss)
        log = LossLog()
        train_stage1(toy_graph, TINY.replace(denoiser_epochs=2), state, log=log, round_=4)
        assert [r[4] for r in log.rows] == [state.last] * 2
        assert [r[:3] for r in log.rows] == [(4, 1, 1), (4, 1, 2)]


def stage2_inputs(ds, cfg):
    split = leave_one_out_split(ds)
    graph = build_hetero_graph(split.train)
    _, sub, _ = train_stage1(graph, cfg, GateState())
    return split.train, graph, sub


class TestStage2:
    def test_instances_and_negatives(self, toy):
        split = leave_one_out_split(toy)
        graph = build_hetero_graph(split.train)
        inst = make_instances(split.train, graph, graph.adjacency, TINY, np.random.default_rng(0))
        vocab = toy.vocab
        expected = sum(1 for p in split.train.patients for j, e in enumerate(p.sequence) if j and vocab.is_exam(e))
        assert len(inst) == expected
        assert torch.all(inst.labels[:, 0] == 1) and torch.all(inst.labels[:, 1:] == 0)
        for row, cands in zip(inst.rows.tolist(), inst.candidates.tolist()):
            seen = set(split.train.patients[row].sequence)
            assert cands[0] in seen
            assert all(vocab.is_exam(c) and c not in seen for c in cands[1:])

    def test_zero_learning_rate_is_frozen(self, toy):
        cfg = TINY.replace(lr=0.0, epochs=4)
        train_set, graph, sub = stage2_inputs(toy, cfg)
        torch.manual_seed(0)
        from examrec.model import ExamRecommender
        model = ExamRecommender(toy.vocab.size, len(graph.patient_ids), cfg)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        model, losses = train_stage2(sub, train_set, cfg, graph, model)
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k
        np.testing.assert_allclose(losses, losses[0], rtol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_loss_descends(self, seed):
        ds = generate_synthetic(SyntheticConfig(n_patients=60, seed=seed))
        cfg = TINY.replace(epochs=30, seed=seed, embed_dim=16)
        train_set, graph, sub = stage2_inputs(ds, cfg)
        torch.manual_seed(seed)
        _, losses = train_stage2(sub, train_set, cfg, graph, generator=torch.Generator().manual_seed(seed))
        drops = np.mean(np.diff(losses) < 0)
        assert drops >= 0.8, losses


@pytest.fixture(scope="module")
def run(toy):
    return train(toy, TINY)


class TestTrain:
    def test_invalid_config_rejected_first(self, toy):
        with pytest.raises(ConfigError):
            train(toy, TINY.replace(k=0))

    def test_single_round(self, toy):
        _, report = train(toy, TINY.replace(rounds=1))
        assert report.best_round == 1 and len(report.validation) == 1
        assert {r[0] for r in report.losses.rows} == {1}

    def test_deterministic(self, toy, run):
        ckpt_b, report_b = train(toy, TINY)
        ckpt_a, report_a = run
        assert report_a.losses.rows == report_b.losses.rows
        assert report_a.test.ranks == report_b.test.ranks
        for k in ckpt_a.state:
            assert np.array_equal(ckpt_a.state[k], ckpt_b.state[k])

    def test_checkpoint_fidelity(self, toy, run, tmp_path):
        ckpt, report = run
        ckpt.save(tmp_path / "c.npz")
        loaded = Checkpoint.load(tmp_path / "c.npz")
        assert loaded.config == ckpt.config and loaded.round == ckpt.round
        rec, _ = evaluate_checkpoint(loaded, toy)
        assert rec.ranks == report.test.ranks
        assert rec.hr == report.test.hr and rec.ndcg == report.test.ndcg

    def test_checkpoint_rejects_tampered_config(self, run, tmp_path):
        import json
        ckpt, _ = run
        ckpt.save(tmp_path / "c.npz")
        with np.load(tmp_path / "c.npz") as z:
            arrays = dict(z)
        meta = json.loads(arrays["meta"].tobytes())
        meta["config_hash"] = "000000000000"
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(tmp_path / "t.npz", **arrays)
        with pytest.raises(ValueError):
            Checkpoint.load(tmp_path / "t.npz")

    def test_gate_feedback_replays(self, run):
        _, report = run
        cfg = TINY
        state = GateState(cfg.gate_window, cfg.gate_eps)
        expected = []
        for r in range(1, cfg.rounds + 1):
            expected.append(state.last)
            stage1 = [row for row in report.losses.rows if row[:2] == (r, 1)]
            assert all(row[4] == state.last for row in stage1)
            for row in (row for row in report.losses.rows if row[:2] == (r, 2)):
                assert gate(state, row[3]) == row[4]
        assert report.gates == expected

    def test_validation_holds_out_second_to_last_exam(self, toy):
        split = leave_one_out_split(toy)
        val = validation_split(split.train)
        full = leave_one_out_split(toy)
        for pid, target in val.test:
            original = toy.by_id[pid].sequence
            exams = [e for e in original if toy.vocab.is_exam(e)]
            assert target == exams[-2] and dict(full.test)[pid] == exams[-1]

    @pytest.mark.parametrize("changes", [
        dict(use_diffusion=False), dict(use_rgat=False), dict(use_kansformer=False), dict(task_adaptive=False),
        dict(fusion="pooled"), dict(fusion="temporal_query"), dict(fusion="linear"),
        dict(use_diffusion=False, use_rgat=False, use_kansformer=False),
    ])
    def test_ablation_reachability(self, toy, changes):
        ckpt, report = train(toy, TINY.replace(rounds=1, epochs=1, **changes))
        assert 0.0 <= report.test.hr[10] <= 1.0
        assert len(report.test.ranks) == len(leave_one_out_split(toy).test)

    def test_no_diffusion_keeps_raw_graph(self, toy):
        ckpt, report = train(toy, TINY.replace(rounds=1, use_diffusion=False))
        assert np.array_equal(ckpt.graph_adj, ckpt.subgraph_adj)
        assert report.gates == [] and all(r[1] == 2 for r in report.losses.rows)

    def test_scorer_matches_evaluate(self, toy, run):
        ckpt, report = run
        split = leave_one_out_split(toy)
        rec = evaluate(ckpt.scorer(split.train), split, TINY.eval_negatives, TINY.seed)
        assert rec.ranks == report.test.ranks
