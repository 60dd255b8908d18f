import json
import shutil

import numpy as np
import pytest
import torch

from conftest import TINY_TRAIN
from semipaired.checkpoint import read_container, write_container
from semipaired.core import ConfigError, DataError, NumericError
from semipaired.sampling import class_pixel_stats, make_plan
from semipaired.synthdata import load_split, split_dataset, write_dataset, write_split
from semipaired.trainer import (
    LOSS_KEYS,
    Ablation,
    TrainConfig,
    TrainData,
    format_config,
    init_state,
    load_generator,
    load_state,
    parse_config_text,
    run_training,
    save_state,
    train_step,
)


def cfg_(**kw):
    return TrainConfig(**{**TINY_TRAIN, "total_iterations": 10, **kw})


def setup_state(split_dir, **kw):
    cfg = cfg_(**kw)
    split, spec, _ = load_split(split_dir)
    state = init_state(cfg, spec.num_classes, spec.image_size)
    plan = make_plan(
        class_pixel_stats(split.paired),
        cfg.total_iterations,
        rare_phase_first=cfg.ablation is not Ablation.RARE_SAMPLING_PHASE2,
        rare_sampling=cfg.ablation is not Ablation.NO_RARE_SAMPLING,
    )
    return state, TrainData.from_split(split), plan


def param_bytes(net):
    return b"".join(p.detach().numpy().tobytes() for p in net.parameters())


class Snapshots:
    """Probe that records parameter bytes of each network at every stage."""

    def __init__(self):
        self.stages = []
        self.calls = {}

    def __call__(self, stage, state):
        self.calls[stage] = self.calls.get(stage, 0) + 1
        snap = {name: param_bytes(net) for name, net in state.networks().items()}
        if state.D.enc[0].weight.grad is not None:
            snap["D_grad"] = b"".join(p.grad.numpy().tobytes() for p in state.D.parameters() if p.grad is not None)
        self.stages.append((stage, snap))

    def changed(self, net, a, b):
        d = dict(self.stages)
        return d[a][net] != d[b][net]


def test_step_order_default(tiny_split):
    state, data, plan = setup_state(tiny_split)
    probe = Snapshots()
    train_step(state, data, plan, probe)
    order = [s for s, _ in probe.stages]
    assert order == ["start", "after_D_step", "after_G_sup_step", "before_G_unpaired_step", "after_G_unpaired_step", "after_D_u_step"]
    ch = probe.changed
    assert ch("D", "start", "after_D_step") and not ch("G", "start", "after_D_step") and not ch("D_u", "start", "after_D_step")
    assert ch("G", "after_D_step", "after_G_sup_step") and not ch("D", "after_D_step", "after_G_sup_step")
    assert not ch("D_u", "after_D_step", "after_G_sup_step")
    assert ch("G", "before_G_unpaired_step", "after_G_unpaired_step")
    assert not ch("D", "before_G_unpaired_step", "after_G_unpaired_step")
    assert not ch("D_u", "before_G_unpaired_step", "after_G_unpaired_step")
    assert ch("D_u", "after_G_unpaired_step", "after_D_u_step")
    assert not ch("G", "after_G_unpaired_step", "after_D_u_step") and not ch("D", "after_G_unpaired_step", "after_D_u_step")
    assert state.iteration == 1


def test_record_contents(tiny_split):
    state, data, plan = setup_state(tiny_split)
    rec = train_step(state, data, plan)
    assert rec["iteration"] == 0
    assert all(isinstance(rec[k], float) and np.isfinite(rec[k]) for k in LOSS_KEYS)
    assert all(rec[k] >= 0 for k in LOSS_KEYS)


def test_unfrozen_shared_d_updates_d_in_unpaired_step(tiny_split):
    state, data, plan = setup_state(tiny_split, ablation="UNFROZEN_SHARED_D")
    probe = Snapshots()
    train_step(state, data, plan, probe)
    assert probe.changed("D", "before_G_unpaired_step", "after_G_unpaired_step")


def test_separate_reverse_net(tiny_split):
    state, data, plan = setup_state(tiny_split, ablation="SEPARATE_REVERSE_NET")
    probe = Snapshots()
    rec = train_step(state, data, plan, probe)
    assert "L_R" in rec and state.R is not None
    # D neither changes nor accumulates any gradient from unpaired data
    assert not probe.changed("D", "after_G_sup_step", "after_D_u_step")
    assert not probe.changed("D_grad", "after_G_sup_step", "after_D_u_step")
    assert probe.changed("R", "after_G_unpaired_step", "after_D_u_step")
    assert not probe.changed("R", "before_G_unpaired_step", "after_G_unpaired_step")


def test_default_d_gets_no_unpaired_gradient(tiny_split):
    state, data, plan = setup_state(tiny_split)
    probe = Snapshots()
    train_step(state, data, plan, probe)
    assert not probe.changed("D_grad", "before_G_unpaired_step", "after_G_unpaired_step")


def test_du_on_paired_hook(tiny_split):
    state, data, plan = setup_state(tiny_split)
    off = Snapshots()
    rec_off = train_step(state, data, plan, off)
    assert off.calls.get("D_u_on_paired", 0) == 0
    state, data, plan = setup_state(tiny_split, du_on_paired=True)
    on = Snapshots()
    rec_on = train_step(state, data, plan, on)
    assert on.calls["D_u_on_paired"] > 0
    assert rec_on["L_D"] == rec_off["L_D"]


def test_paired_only(tiny_split):
    state, data, plan = setup_state(tiny_split, ablation="PAIRED_ONLY")
    probe = Snapshots()
    rec = train_step(state, data, plan, probe)
    assert rec["L_G_cycle"] is None and rec["L_G_uadv"] is None and rec["L_D_u"] is None
    assert not probe.changed("D_u", "start", "after_G_sup_step")
    assert all(p.requires_grad for p in state.D.parameters())


@pytest.mark.parametrize("ablation", ["NO_FM", "NO_VGG"])
def test_term_ablations_still_report(tiny_split, ablation):
    state, data, plan = setup_state(tiny_split, ablation=ablation)
    rec = train_step(state, data, plan)
    assert all(np.isfinite(rec[k]) for k in LOSS_KEYS)


def test_term_ablation_changes_update(tiny_split):
    a, data, plan = setup_state(tiny_split)
    b, _, _ = setup_state(tiny_split, ablation="NO_FM")
    train_step(a, data, plan)
    train_step(b, data, plan)
    assert param_bytes(a.G) != param_bytes(b.G)
    assert param_bytes(a.D) == param_bytes(b.D)


@pytest.mark.parametrize(
    "ablation,expected",
    [
        ("NONE", ["rare_weighted"] * 5 + ["uniform"] * 5),
        ("NO_RARE_SAMPLING", ["uniform"] * 10),
        ("RARE_SAMPLING_PHASE2", ["uniform"] * 5 + ["rare_weighted"] * 5),
    ],
)
def test_phase_schedule(tiny_split, ablation, expected):
    state, data, plan = setup_state(tiny_split, ablation=ablation, ema_decay=0.0)
    assert [plan.phase(i).value for i in range(10)] == expected
    rec = train_step(state, data, plan)
    assert rec["phase"] == expected[0]


def test_optimizer_isolation(tiny_split):
    state, _, _ = setup_state(tiny_split, ablation="SEPARATE_REVERSE_NET")
    seen = set()
    for name, opt in state.optimizers().items():
        ids = {id(p) for g in opt.param_groups for p in g["params"]}
        assert ids == {id(p) for p in state.networks()[name].parameters()}
        assert not ids & seen
        seen |= ids


def test_adam_hyperparameters(tiny_split):
    state, _, _ = setup_state(tiny_split)
    for opt in state.optimizers().values():
        g = opt.param_groups[0]
        assert g["lr"] == 1e-4 and tuple(g["betas"]) == (0.0, 0.999)


def test_ema_option(tiny_split, tmp_path):
    state, data, plan = setup_state(tiny_split, ema_decay=0.5)
    train_step(state, data, plan)
    assert param_bytes(state.G_ema) != param_bytes(state.G)
    save_state(state, tmp_path / "s.ckpt")
    G, _ = load_generator(tmp_path / "s.ckpt")
    assert param_bytes(G) == param_bytes(state.G_ema)
    G, _ = load_generator(tmp_path / "s.ckpt", use_ema=False)
    assert param_bytes(G) == param_bytes(state.G)


def test_non_finite_loss_aborts(tiny_split):
    state, data, plan = setup_state(tiny_split)

    def poison(stage, st):
        if stage == "after_D_step":
            with torch.no_grad():
                st.G.to_rgb.bias.fill_(float("nan"))

    with pytest.raises(NumericError):
        train_step(state, data, plan, poison)


def test_empty_unpaired_pool_needs_paired_only(tmp_path, small_corpus, small_spec):
    write_dataset(small_corpus, small_spec, 3, tmp_path / "data")
    write_split(split_dataset(small_corpus, 1.0, 0), tmp_path / "data", 0, tmp_path / "split")
    with pytest.raises(DataError):
        run_training(cfg_(total_iterations=1), tmp_path / "split", tmp_path / "run")
    run_training(cfg_(total_iterations=1, ablation="PAIRED_ONLY"), tmp_path / "split", tmp_path / "run2")


# -- checkpoints and driver --------------------------------------------------


def test_checkpoint_bitwise_idempotent(tiny_split, tmp_path):
    state, data, plan = setup_state(tiny_split, ablation="SEPARATE_REVERSE_NET", ema_decay=0.9)
    train_step(state, data, plan)
    save_state(state, tmp_path / "a.ckpt", {"note": "x"})
    loaded, meta = load_state(tmp_path / "a.ckpt")
    save_state(loaded, tmp_path / "b.ckpt", meta["extra"])
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_restores_trajectory(tiny_split, tmp_path):
    state, data, plan = setup_state(tiny_split)
    train_step(state, data, plan)
    save_state(state, tmp_path / "a.ckpt")
    ref = [train_step(state, data, plan) for _ in range(2)]
    loaded, _ = load_state(tmp_path / "a.ckpt")
    assert [train_step(loaded, data, plan) for _ in range(2)] == ref


def test_container_roundtrip_dtypes(tmp_path):
    tensors = {
        "f": torch.randn(3, 2),
        "d": torch.randn(2, dtype=torch.float64),
        "i": torch.arange(5),
        "u": torch.tensor([1, 255], dtype=torch.uint8),
        "b": torch.tensor([True, False]),
        "s": torch.tensor(3.5),
    }
    write_container(tmp_path / "c", tensors, {"k": [1, 2]})
    back, meta = read_container(tmp_path / "c")
    assert meta == {"k": [1, 2]}
    assert all(torch.equal(tensors[k], back[k]) and tensors[k].dtype == back[k].dtype for k in tensors)


@pytest.mark.parametrize("damage", ["magic", "truncate", "header", "missing"])
def test_corrupt_checkpoint(tiny_split, tmp_path, damage):
    state, _, _ = setup_state(tiny_split)
    p = tmp_path / "a.ckpt"
    save_state(state, p)
    raw = p.read_bytes()
    if damage == "magic":
        p.write_bytes(b"X" + raw[1:])
    elif damage == "truncate":
        p.write_bytes(raw[: len(raw) - 100])
    elif damage == "header":
        p.write_bytes(raw[:40] + b"\xff\xfe" + raw[42:])
    else:
        p.unlink()
    with pytest.raises(DataError):
        load_state(p)


def test_smoke_run(tiny_split, tmp_path):
    split, _, _ = load_split(tiny_split)
    assert len(split.paired) == 4 and len(split.unpaired_images) == 8
    final = run_training(cfg_(total_iterations=4), tiny_split, tmp_path / "run")
    assert final.exists()
    lines = (tmp_path / "run" / "losses.jsonl").read_text().splitlines()
    assert [json.loads(l)["iteration"] for l in lines] == [0, 1, 2, 3]
    assert parse_config_text((tmp_path / "run" / "config.resolved.txt").read_text()) == cfg_(total_iterations=4)
    state, meta = load_state(final)
    assert state.iteration == 4 and meta["extra"]["split_sha256"]


def test_identical_runs_identical_logs(tiny_split, tmp_path):
    cfg = cfg_(total_iterations=5, checkpoint_interval=2)
    run_training(cfg, tiny_split, tmp_path / "a")
    run_training(cfg, tiny_split, tmp_path / "b")
    assert (tmp_path / "a" / "losses.jsonl").read_bytes() == (tmp_path / "b" / "losses.jsonl").read_bytes()
    assert (tmp_path / "a/checkpoints/final.ckpt").read_bytes() == (tmp_path / "b/checkpoints/final.ckpt").read_bytes()


def test_different_seed_different_log(tiny_split, tmp_path):
    run_training(cfg_(total_iterations=2), tiny_split, tmp_path / "a")
    run_training(cfg_(total_iterations=2, seed=1), tiny_split, tmp_path / "b")
    assert (tmp_path / "a" / "losses.jsonl").read_bytes() != (tmp_path / "b" / "losses.jsonl").read_bytes()


class Interrupt(Exception):
    pass


def test_resume_after_interruption(tiny_split, tmp_path):
    cfg = cfg_(total_iterations=6, checkpoint_interval=2)
    run_training(cfg, tiny_split, tmp_path / "full")

    def stop(stage, state):
        if stage == "after_D_step" and state.iteration == 4:
            raise Interrupt

    with pytest.raises(Interrupt):
        run_training(cfg, tiny_split, tmp_path / "cut", probe=stop)
    assert not (tmp_path / "cut" / "checkpoints" / "final.ckpt").exists()
    ckpt = tmp_path / "cut" / "checkpoints" / "ckpt_0000004.ckpt"
    run_training(None, tiny_split, tmp_path / "cut", resume=ckpt)
    assert (tmp_path / "full" / "losses.jsonl").read_bytes() == (tmp_path / "cut" / "losses.jsonl").read_bytes()


def test_resume_into_fresh_dir_gives_suffix(tiny_split, tmp_path):
    cfg = cfg_(total_iterations=6, checkpoint_interval=3)
    run_training(cfg, tiny_split, tmp_path / "full")
    shutil.copy(tmp_path / "full/checkpoints/ckpt_0000003.ckpt", tmp_path / "k.ckpt")
    run_training(cfg, tiny_split, tmp_path / "resumed", resume=tmp_path / "k.ckpt")
    full = (tmp_path / "full" / "losses.jsonl").read_text().splitlines()
    assert (tmp_path / "resumed" / "losses.jsonl").read_text().splitlines() == full[3:]


def test_resume_rejects_different_config(tiny_split, tmp_path):
    run_training(cfg_(total_iterations=2, checkpoint_interval=1), tiny_split, tmp_path / "a")
    with pytest.raises(ConfigError):
        run_training(cfg_(total_iterations=2, seed=9), tiny_split, tmp_path / "a", resume=tmp_path / "a/checkpoints/ckpt_0000001.ckpt")


# -- config ------------------------------------------------------------------


def test_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.adam_beta1, c.adam_beta2) == (8, 1e-4, 0.0, 0.999)
    assert c.ablation is Ablation.NONE and c.du_on_paired is False


def test_config_roundtrip():
    c = TrainConfig(seed=4, ablation="NO_VGG", du_on_paired=True, w_fm=0.5)
    assert parse_config_text(format_config(c)) == c


def test_config_parsing_comments_and_types():
    c = parse_config_text("# comment\ntotal_iterations = 12  # trailing\n\nablation = UNFROZEN_SHARED_D\ndu_on_paired = yes\n")
    assert c.total_iterations == 12 and c.ablation is Ablation.UNFROZEN_SHARED_D and c.du_on_paired is True


@pytest.mark.parametrize(
    "text",
    [
        "unknown_key = 1",
        "seed = 1\nseed = 2",
        "batch_size = eight",
        "batch_size = 0",
        "w_fm = -1",
        "ablation = ROW_Z",
        "du_on_paired = maybe",
        "no equals sign",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)
