mod common;

use common::{copy_batch, toy_config};
use tiermoe_core::autodiff::Graph;
use tiermoe_core::checkpoint::{read_checkpoint, write_checkpoint};
use tiermoe_core::grouping::{GroupingKind, GroupingStrategy};
use tiermoe_core::model::{forward_tiers, plain_forward, ForwardCtx, ModelConfig, ModelVars};
use tiermoe_core::train::{sft_step, train_draw, train_step, StepReport, TrainState};

fn single_tier() -> ModelConfig {
    ModelConfig {
        grouping: GroupingStrategy {
            groups: 1,
            ..Default::default()
        },
        ..toy_config()
    }
}

fn run(cfg: &ModelConfig, steps: u64, plain: bool) -> (Vec<StepReport>, TrainState) {
    let mut st = TrainState::new(cfg).unwrap();
    let mut out = Vec::new();
    for s in 0..steps {
        let b = copy_batch(cfg.vocab_size, 3, 4, 1000 + s);
        let r = if plain {
            sft_step(&mut st, cfg, &b)
        } else {
            train_step(&mut st, cfg, &b)
        };
        out.push(r.unwrap());
    }
    (out, st)
}

#[test]
fn single_tier_and_zero_rank_weight_match_plain_training() {
    let steps = 40;
    let base = ModelConfig {
        optim: tiermoe_core::optim::OptimConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..toy_config()
    };
    let c1 = ModelConfig {
        grouping: single_tier().grouping,
        rewards: None,
        ..base.clone()
    };
    let zero = ModelConfig {
        lambda_erl: 0.0,
        ..base.clone()
    };
    let (plain, plain_state) = run(&c1, steps, true);
    let (one, one_state) = run(&c1, steps, false);
    let (z, z_state) = run(&zero, steps, false);
    for ((p, a), b) in plain.iter().zip(&one).zip(&z) {
        assert_eq!(
            p.loss.ntp.to_bits(),
            a.loss.ntp.to_bits(),
            "step {}",
            p.step
        );
        assert_eq!(
            p.loss.ntp.to_bits(),
            b.loss.ntp.to_bits(),
            "step {}",
            p.step
        );
        assert_eq!(p.loss.balance.to_bits(), a.loss.balance.to_bits());
        assert_eq!(p.loss.total.to_bits(), a.loss.total.to_bits());
        assert_eq!(p.grad_norm.to_bits(), a.grad_norm.to_bits());
        assert_eq!(a.loss.erl, 0.0);
    }
    assert_eq!(plain_state.params, one_state.params);
    assert_eq!(plain_state.params, z_state.params);
    assert!(plain.last().unwrap().loss.ntp < plain[0].loss.ntp);
}

#[test]
fn tier_one_equals_plain_forward_during_training() {
    let cfg = toy_config();
    let plan = cfg.plan().unwrap();
    let mut st = TrainState::new(&cfg).unwrap();
    for s in 0..15 {
        let b = copy_batch(cfg.vocab_size, 3, 4, 50 + s);
        let mut g = Graph::<f64>::new();
        let vars = ModelVars::bind(&mut g, &st.params, &cfg, false).unwrap();
        let mut ctx = ForwardCtx::live(train_draw(cfg.seed, s));
        let tiers = forward_tiers(
            &mut g, &vars, &cfg, &plan, &b.inputs, b.batch, b.seq, 3, &mut ctx,
        )
        .unwrap();
        let plain = plain_forward(&mut g, &vars, &cfg, &b.inputs, b.batch, b.seq).unwrap();
        assert_eq!(
            g.value(tiers.tier_logits[0]),
            g.value(plain.tier_logits[0]),
            "step {s}"
        );
        train_step(&mut st, &cfg, &b).unwrap();
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    for kind in [GroupingKind::Uniform, GroupingKind::Random] {
        let mut cfg = toy_config();
        cfg.grouping.kind = kind;
        let (a, sa) = run(&cfg, 10, false);
        let (b, sb) = run(&cfg, 10, false);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
    let other = ModelConfig {
        seed: 1,
        ..toy_config()
    };
    assert_ne!(run(&other, 1, false).0, run(&toy_config(), 1, false).0);
}

#[test]
fn checkpoint_resume_continues_exactly() {
    let cfg = toy_config();
    let (_, mut full) = run(&cfg, 6, false);
    let mut st = TrainState::new(&cfg).unwrap();
    for s in 0..3 {
        train_step(&mut st, &cfg, &copy_batch(cfg.vocab_size, 3, 4, 1000 + s)).unwrap();
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &st, &cfg).unwrap();
    let mut resumed = read_checkpoint(buf.as_slice(), &cfg).unwrap();
    let mut reference = st.clone();
    for s in 3..6 {
        let b = copy_batch(cfg.vocab_size, 3, 4, 1000 + s);
        let r1 = train_step(&mut resumed, &cfg, &b).unwrap();
        let r2 = train_step(&mut reference, &cfg, &b).unwrap();
        assert_eq!(r1, r2);
    }
    assert_eq!(resumed, reference);
    full.step = reference.step;
    assert_eq!(full, reference);
}
