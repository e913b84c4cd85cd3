use super::*;

fn base(method: &str, extra: &str) -> TrainConfig {
    let text = format!(
        r#"
method = "{method}"
seed = 11
epochs = 3
batch_size = 8
dropout_step = 3

[task]
kind = "majority"
n_train = 40
n_dev = 24
n_test = 8
length = 6
vocab = 5

[model]
d_model = 8
d_ff = 16
num_heads = 2
num_layers = 2

[optimizer]
kind = "adam"
lr = 0.01
{extra}
"#
    );
    let mut cfg = TrainConfig::from_toml(&text).unwrap();
    cfg.resolve_schedule(None).unwrap();
    cfg.validate().unwrap();
    cfg
}

const ATTENDOUT: &str = "[attendout]\ng_lr = 5.0\n";

#[test]
fn batch_iter_covers_each_example_once_per_epoch() {
    let it = BatchIter::new(10, 4, 2, 1);
    assert_eq!(it.total_steps(), 6);
    let batches: Vec<_> = it.collect();
    assert_eq!(batches.len(), 6);
    for epoch in 0..2 {
        let mut seen: Vec<usize> = batches
            .iter()
            .filter(|(e, _)| *e == epoch)
            .flat_map(|(_, b)| b.clone())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let mut cfg = base("none", "");
    cfg.epochs = 0;
    let art = train(&cfg).unwrap();
    assert!(art.metrics.is_empty());
    let init = TaskModelParams::init(&cfg.task_config().unwrap(), cfg.seed).unwrap();
    assert!(art.model.bitwise_eq(&init));
}

#[test]
fn plain_training_learns_a_separable_task() {
    // two content tokens, never tied: the label is the token itself
    let mut cfg = base("none", "");
    cfg.task.length = 2;
    cfg.task.vocab = 3;
    cfg.task.n_train = 64;
    cfg.optimizer.lr = 0.03;
    let art = train(&cfg).unwrap();
    assert!(art.summary.train_acc >= 0.95, "{:?}", art.summary);
}

#[test]
fn evaluate_matches_recount() {
    let cfg = base("none", "");
    let (train_set, dev, _) = cfg.datasets().unwrap();
    let model = TaskModelParams::init(&cfg.task_config().unwrap(), 5).unwrap();
    let refs: Vec<&Example> = dev.examples.iter().collect();
    let acc = evaluate(&model, &refs, Execution::default()).unwrap();
    let mut hits = 0;
    for e in &dev.examples {
        hits += usize::from(predict(&model, &e.tokens).unwrap() == e.label);
    }
    assert_eq!(acc, hits as f64 / dev.len() as f64);
    assert!(evaluate(&model, &[], Execution::default()).is_err());

    // constant predictor on a balanced set
    let mut constant = model.clone();
    constant.head_w.fill(0.0);
    constant.head_b.set(0, 1, 1.0);
    let balanced: Vec<&Example> = train_set.examples.iter().collect();
    let ones = balanced.iter().filter(|e| e.label == 1).count();
    let acc = evaluate(&constant, &balanced, Execution::default()).unwrap();
    assert_eq!(acc, ones as f64 / balanced.len() as f64);
}

#[test]
fn sync_probabilities() {
    let cfg = base("none", "");
    let d = TaskModelParams::init(&cfg.task_config().unwrap(), 1).unwrap();
    let a = TaskModelParams::init(&cfg.task_config().unwrap(), 2).unwrap();
    let mut rng = RngState::new(4, 9);
    let n = 10_000;
    for (ed, ea, p) in [(0.5, 0.5, 0.5), (0.0, 1.0, sigmoid(1.0))] {
        let mut wins = 0usize;
        for _ in 0..n {
            let (d2, a2, who) = sync_models(&d, &a, ed, ea, &mut rng).unwrap();
            assert!(d2.bitwise_eq(&a2));
            let expect = if who == Winner::Attacker { &a } else { &d };
            assert!(d2.bitwise_eq(expect));
            wins += usize::from(who == Winner::Attacker);
        }
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((wins as f64 / n as f64 - p).abs() <= 3.0 * sigma, "{wins} vs {p}");
    }
    let mut other = cfg.task_config().unwrap();
    other.d_ff = 4;
    let b = TaskModelParams::init(&other, 1).unwrap();
    assert!(sync_models(&d, &b, 0.0, 0.0, &mut rng).is_err());
}

#[test]
fn attendout_structure() {
    let cfg = base("attendout", ATTENDOUT);
    let art = train(&cfg).unwrap();
    let total = art.summary.total_steps;
    assert_eq!(total, 15);
    assert_eq!(art.metrics.len() as u64, total);
    let t = cfg.dropout_step as u64;
    assert_eq!(art.summary.generator_updates, total / t);
    for b in &art.boundaries {
        assert!(b.synced_at_start, "{b:?}");
        assert!(b.batches_match);
        assert_eq!(b.cache_len_after_release, 0);
    }
    for (i, m) in art.metrics.iter().enumerate() {
        let boundary = (i as u64 + 1) % t == 0;
        assert_eq!(m.eval_d.is_some(), boundary);
        assert_eq!(m.eval_a.is_some(), boundary);
        assert_eq!(m.reward_mean.is_some(), boundary);
        assert!(m.loss_a.is_some());
        assert_eq!(m.drop_prob.as_ref().unwrap().len(), 2);
    }
    assert_eq!(art.mask_trace.len() as u64, 2 * (total / t));
    assert!(art
        .mask_trace
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.mean_drop_prob)));
}

#[test]
fn attendout_is_deterministic_across_runs_and_execution() {
    let cfg = base("attendout", ATTENDOUT);
    let a = train_with(&cfg, Execution::Sequential).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(metrics_jsonl(&a.metrics).unwrap(), metrics_jsonl(&b.metrics).unwrap());
    assert!(a.model.bitwise_eq(&b.model));
    assert!(a
        .generator
        .as_ref()
        .unwrap()
        .bitwise_eq(b.generator.as_ref().unwrap()));
}

#[test]
fn never_drop_policy_is_inert() {
    let cfg = base("attendout", "[attendout]\ng_lr = 5.0\nlogit_offset = -1e6\n");
    let art = train(&cfg).unwrap();
    for m in &art.metrics {
        assert_eq!(m.loss_d.to_bits(), m.loss_a.unwrap().to_bits());
        if let (Some(d), Some(a)) = (m.eval_d, m.eval_a) {
            assert_eq!(d, a);
            assert_eq!(m.reward_mean, Some(0.0));
        }
    }
    let g0 = GeneratorParams::init(
        &cfg.generator_config().unwrap(),
        RngState::new(cfg.seed, STREAM_GENERATOR_INIT).next_raw(),
    )
    .unwrap();
    assert!(art.generator.unwrap().bitwise_eq(&g0));
    let plain = train(&TrainConfig {
        method: Method::None,
        attendout: None,
        ..cfg.clone()
    })
    .unwrap();
    assert!(plain.model.bitwise_eq(&art.model));
}

#[test]
fn unit_dropout_step_on_single_batch() {
    let mut cfg = base("attendout", ATTENDOUT);
    cfg.dropout_step = 1;
    cfg.batch_size = 64;
    let art = train(&cfg).unwrap();
    assert_eq!(art.summary.total_steps, 3);
    assert_eq!(art.summary.generator_updates, 3);
    assert_eq!(art.boundaries.len(), 3);
    assert!(art.boundaries.iter().all(|b| b.inner_steps == 1));
    assert!(art.metrics.iter().all(|m| m.eval_d.is_some()));
}

#[test]
fn partial_final_dropout_step_skips_generator_update() {
    let mut cfg = base("attendout", ATTENDOUT);
    cfg.dropout_step = 4;
    let art = train(&cfg).unwrap();
    assert_eq!(art.summary.generator_updates, 15 / 4);
    let last = art.boundaries.last().unwrap();
    assert_eq!((last.inner_steps, last.generator_updated), (3, false));
    assert_eq!(last.cache_len_after_release, 0);
}

#[test]
fn zero_schedule_matches_plain_training_bitwise() {
    let none = train(&base("none", "")).unwrap();
    let sched = train(&base("scheduled", "[scheduled]\np0 = 0.0\n")).unwrap();
    assert_eq!(none.metrics.len(), sched.metrics.len());
    for (a, b) in none.metrics.iter().zip(&sched.metrics) {
        assert_eq!(a.loss_d.to_bits(), b.loss_d.to_bits());
    }
    assert!(none.model.bitwise_eq(&sched.model));
    assert!(sched
        .schedule_trace
        .iter()
        .all(|r| r.scheduled_prob == 0.0 && r.realized_drop_fraction == 0.0));
}

#[test]
fn baseline_methods_train_finite() {
    for (method, extra) in [
        ("vanilla", "[vanilla]\np = 0.2\n"),
        ("vanilla", "[vanilla]\np = 0.1\ndrop_mode = \"weights\"\nrescale = true\n"),
        ("layerdrop", "[layerdrop]\np = 0.2\n"),
        ("attn_layerdrop", "[attn_layerdrop]\np = 0.2\n"),
        ("scheduled", "[scheduled]\np0 = 0.6\nslopes = [-0.01, -0.02]\n"),
    ] {
        let art = train(&base(method, extra)).unwrap();
        assert!(art.metrics.iter().all(|m| m.loss_d.is_finite()), "{method}");
        assert!(art.summary.dev_acc.unwrap().is_finite());
        assert_eq!(art.metrics[0].drop_prob.as_ref().unwrap().len(), 2);
    }
}

#[test]
fn schedule_trace_follows_schedule() {
    let art = train(&base("scheduled", "[scheduled]\np0 = 0.6\nslopes = [-0.05, 0.02]\n")).unwrap();
    for r in &art.schedule_trace {
        let expect = [0.6 - 0.05 * r.step as f64, 0.6 + 0.02 * r.step as f64][r.layer];
        assert_eq!(r.scheduled_prob, expect.clamp(0.0, 1.0));
    }
}

#[test]
fn holdout_pool_is_carved_from_train() {
    let mut cfg = base("attendout", ATTENDOUT);
    cfg.eval_pool = EvalPool::TrainHoldout;
    cfg.holdout_size = 8;
    cfg.validate().unwrap();
    let art = train(&cfg).unwrap();
    // 32 training examples, 4 batches per epoch
    assert_eq!(art.summary.total_steps, 12);
}

#[test]
fn csv_and_jsonl_outputs() {
    let art = train(&base("attendout", ATTENDOUT)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_csv(&art.mask_trace, &path, &["dropout_step", "layer", "mean_drop_prob"]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("dropout_step,layer,mean_drop_prob\n0,0,"));
    let back = crate::regularizers::Schedule::from_mask_trace(&path, 3).unwrap();
    assert_eq!(back.num_layers(), 2);

    let jsonl = metrics_jsonl(&art.metrics).unwrap();
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert!(first.get("loss_D").is_some() && first.get("loss_A").is_some());
    assert!(first.get("eval_D").is_none());
    let third: serde_json::Value = serde_json::from_str(jsonl.lines().nth(2).unwrap()).unwrap();
    assert!(third.get("eval_A").is_some() && third.get("baseline").is_some());
    let none = train(&base("none", "")).unwrap();
    let line: serde_json::Value =
        serde_json::from_str(metrics_jsonl(&none.metrics).unwrap().lines().next().unwrap()).unwrap();
    assert!(line.get("loss_A").is_none() && line.get("drop_prob").is_none());
    assert_eq!(line["method"], "none");
}
