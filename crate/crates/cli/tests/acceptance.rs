//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the report is always printed; exits nonzero when a
//! gated criterion fails.

use std::f64::consts::{E, LN_2};
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use co2_cli::commands::{self, GRID_HEADER};
use co2_cli::ExperimentConfig;
use co2_core::data::{generate_synthetic, two_views, Sample, SyntheticSpec, ViewKey};
use co2_core::encoder::{init_params, EncoderConfig, EncoderParams, Head};
use co2_core::eval::{probe_dataset, summarize_run, ProbeConfig};
use co2_core::losses::{
    evaluate, info_nce, label_smoothing_infonce, loss_gradient_wrt_query, similarity_distribution,
    consistency_loss, total_loss, ContrastItem, LossHyperParams,
};
use co2_core::memory::{init_queue, MomentumState};
use co2_core::numeric::{kl_divergence, l2_normalize, softmax_temp, symmetric_kl, ProbVector};
use co2_core::trainer::{run_training, JsonlSink, MetricsRecord, MetricsSink, TrainConfig, TrainState};
use co2_core::{Co2Error, Embeddings};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Collects failed checks instead of stopping at the first one.
#[derive(Default)]
struct Checks {
    total: usize,
    failures: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.total += 1;
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.check((got - want).abs() <= tol, format!("{name}: got {got}, want {want} (tol {tol:e})"));
    }

    fn into_outcome(self, extra: &str) -> Outcome {
        let pass = self.failures.is_empty();
        let detail = if pass {
            format!("{} checks{extra}", self.total)
        } else {
            format!("{}/{} checks failed: {}", self.failures.len(), self.total, self.failures.join("; "))
        };
        outcome(pass, detail)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    l2_normalize(v).unwrap()
}

fn emb(rows: &[Vec<f64>]) -> Embeddings {
    Embeddings::from_rows(rows).unwrap()
}

/// Unit query whose dot products with the first two basis vectors are `a`, `b`.
fn with_dots(a: f64, b: f64) -> Vec<f64> {
    vec![a, b, (1.0 - a * a - b * b).sqrt()]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();

    let v = l2_normalize(&[3.0, 4.0]).unwrap();
    c.close("normalize [3,4] x", v[0], 0.6, 1e-9);
    c.close("normalize [3,4] y", v[1], 0.8, 1e-9);
    c.check(l2_normalize(&[1.0, 0.0, 0.0]).unwrap() == vec![1.0, 0.0, 0.0], "normalize e1");
    c.check(
        matches!(l2_normalize(&[0.0, 0.0]), Err(Co2Error::ZeroVector { .. })),
        "normalize zero vector errors",
    );

    for (cst, tau) in [(-3.0, 0.5), (0.0, 1.0), (250.0, 0.04)] {
        for p in softmax_temp(&[cst; 3], tau).unwrap().as_slice() {
            c.close("softmax constant logits", *p, 1.0 / 3.0, 1e-9);
        }
    }
    let s = softmax_temp(&[LN_2, 0.0], 1.0).unwrap();
    c.close("softmax [ln2,0] first", s.as_slice()[0], 2.0 / 3.0, 1e-9);
    c.close("softmax [ln2,0] second", s.as_slice()[1], 1.0 / 3.0, 1e-9);
    let s = softmax_temp(&[1000.0, 999.0], 1.0).unwrap();
    c.close("softmax [1000,999] first", s.as_slice()[0], E / (E + 1.0), 1e-9);
    c.close("softmax [1000,999] second", s.as_slice()[1], 1.0 / (E + 1.0), 1e-9);

    let pv = |v: Vec<f64>| ProbVector::new(v).unwrap();
    let p = pv(vec![0.2, 0.5, 0.3]);
    c.close("KL(P||P)", kl_divergence(&p, &p).unwrap(), 0.0, 1e-9);
    c.close("KL([1,0]||[.5,.5])", kl_divergence(&pv(vec![1.0, 0.0]), &pv(vec![0.5, 0.5])).unwrap(), LN_2, 1e-9);
    let (a, b) = (pv(vec![0.75, 0.25]), pv(vec![0.25, 0.75]));
    let half_ln3 = 0.5 * 3f64.ln();
    c.close("KL([.75,.25]||[.25,.75])", kl_divergence(&a, &b).unwrap(), half_ln3, 1e-9);
    c.close("symKL(P,P)", symmetric_kl(&p, &p).unwrap(), 0.0, 1e-9);
    c.close("symKL([.75,.25],[.25,.75])", symmetric_kl(&a, &b).unwrap(), half_ln3, 1e-9);
    let q = pv(vec![0.6, 0.1, 0.3]);
    c.close("symKL symmetry", symmetric_kl(&p, &q).unwrap(), symmetric_kl(&q, &p).unwrap(), 1e-12);

    // uniform logits: -log 1/(K+1)
    for k in [1usize, 9, 255] {
        let q = vec![1.0, 0.0, 0.0];
        let p = unit(&[0.0, 1.0, 1.0]);
        let negs = emb(&vec![unit(&[0.0, 1.0, -1.0]); k]);
        for tau in [0.07, 1.0] {
            let item = ContrastItem::new(&q, &p, &negs).unwrap();
            let (loss, logits) = info_nce(&item, tau).unwrap();
            c.check(logits.len() == k + 1, format!("logit count for K={k}"));
            c.close(&format!("uniform InfoNCE K={k} tau={tau}"), loss, ((k + 1) as f64).ln(), 1e-9);
        }
    }

    let e = |i: usize| -> Vec<f64> {
        let mut v = vec![0.0; 3];
        v[i] = 1.0;
        v
    };
    let negs = emb(&[e(1), e(2)]);
    let e0 = e(0);
    let item = ContrastItem::new(&e0, &e0, &negs).unwrap();
    c.close("InfoNCE ln(1+2/e)", info_nce(&item, 1.0).unwrap().0, (1.0 + 2.0 / E).ln(), 1e-9);
    let sharp = info_nce(&item, 0.07).unwrap().0;
    c.check(sharp < 1e-5, format!("InfoNCE at tau 0.07 = {sharp:e} < 1e-5"));

    let sim = similarity_distribution(&e(0), &emb(&[e(1), e(2)]), 0.3).unwrap();
    for p in sim.as_slice() {
        c.close("orthogonal anchor uniform", *p, 0.5, 1e-9);
    }
    let sim = similarity_distribution(&e(0), &emb(&[e(0), e(1)]), 1.0).unwrap();
    c.close("similarity e/(e+1)", sim.as_slice()[0], E / (E + 1.0), 1e-9);
    c.close("similarity 1/(e+1)", sim.as_slice()[1], 1.0 / (E + 1.0), 1e-9);
    let sim = similarity_distribution(&e(0), &emb(&[e(0), e(1)]), 0.04).unwrap();
    c.check(sim.as_slice()[0] > 1.0 - 1e-10, "similarity at tau 0.04 saturates");

    // P = [.75, .25], Q = [.25, .75]: a dot-product gap of ln 3 / 2 at tau_con = 0.5
    let gap = 0.5 * 3f64.ln();
    let qv = with_dots(0.1, 0.1 + gap);
    let pv_ = with_dots(0.1 + gap, 0.1);
    let negs = emb(&[e(0), e(1)]);
    let item = ContrastItem::new(&qv, &pv_, &negs).unwrap();
    c.close("L_con via logits", consistency_loss(&item, 0.5).unwrap(), half_ln3, 1e-9);
    c.close("L_con p=q", consistency_loss(&ContrastItem::new(&qv, &qv, &negs).unwrap(), 0.04).unwrap(), 0.0, 1e-9);
    let swapped = emb(&[e(1), e(0)]);
    c.close(
        "L_con queue order",
        consistency_loss(&ContrastItem::new(&qv, &pv_, &swapped).unwrap(), 0.5).unwrap(),
        half_ln3,
        1e-9,
    );

    let hp = LossHyperParams::default();
    c.check(hp.alpha == 10.0 && hp.tau_con == 0.04 && hp.tau_ins == 0.07, "loss defaults");
    let b = total_loss(&item, &hp).unwrap();
    c.check(b.params == hp, "breakdown records its hyperparameters");
    c.close("total = l_ins + alpha l_con", b.total, b.l_ins + 10.0 * b.l_con, 1e-9);
    let moco = total_loss(&item, &LossHyperParams { alpha: 0.0, ..hp }).unwrap();
    c.check(moco.total == moco.l_ins, "alpha = 0 gives total = l_ins exactly");

    let item = ContrastItem::new(&qv, &pv_, &negs).unwrap();
    for tau in [0.07, 0.5, 1.0] {
        c.close(
            "smoothing eps=0",
            label_smoothing_infonce(&item, tau, 0.0).unwrap(),
            info_nce(&item, tau).unwrap().0,
            1e-12,
        );
    }
    let q = vec![1.0, 0.0, 0.0];
    let uni = emb(&vec![unit(&[0.0, 1.0, -1.0]); 9]);
    let p_uni = unit(&[0.0, 1.0, 1.0]);
    let uniform = ContrastItem::new(&q, &p_uni, &uni).unwrap();
    c.close("smoothing uniform K=9", label_smoothing_infonce(&uniform, 0.2, 0.1).unwrap(), 10f64.ln(), 1e-9);
    let one = emb(&[e(1)]);
    let two = ContrastItem::new(&qv, &pv_, &one).unwrap();
    let dot: f64 = qv.iter().zip(&pv_).map(|(a, b)| a * b).sum();
    let (lp, ln_) = (dot / 0.3, qv[1] / 0.3);
    let s_pos = lp.exp() / (lp.exp() + ln_.exp());
    let brute = -0.5 * s_pos.ln() - 0.5 * (1.0 - s_pos).ln();
    c.close("smoothing eps=0.5 K=1", label_smoothing_infonce(&two, 0.3, 0.5).unwrap(), brute, 1e-9);

    let elapsed = start.elapsed();
    c.check(elapsed < Duration::from_secs(1), format!("runtime {elapsed:?} < 1 s"));
    c.into_outcome(&format!(", {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

const H: f64 = 1e-6;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&diff) / n(a).max(n(b)).max(1e-12)
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

fn loss_at(q: &[f64], p: &[f64], negs: &Embeddings, hp: &LossHyperParams) -> f64 {
    let item = ContrastItem {
        query: q,
        positive: p,
        negatives: negs,
    };
    evaluate(&item, hp, false).unwrap().0.total
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC02);
    let (mut worst_q, mut worst_theta) = (0.0f64, 0.0f64);
    let instances = 120;
    for i in 0..instances {
        let embed_dim = rng.random_range(2..=4);
        let input_dim = rng.random_range(embed_dim..=8);
        let k = rng.random_range(1..=16);
        // a small ReLU net can be dead for every input; draw another one then
        let (params, x) = loop {
            let cfg = EncoderConfig {
                input_dim,
                hidden_dims: vec![rng.random_range(2..=8); rng.random_range(1..=2)],
                embed_dim,
                head: if i % 2 == 0 { Head::Mlp } else { Head::Linear },
                init_seed: rng.random(),
                ..Default::default()
            };
            let params = init_params(&cfg).unwrap();
            let live = (0..100)
                .map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>())
                .find(|x| params.forward(x).is_ok());
            if let Some(x) = live {
                break (params, x);
            }
        };
        let p = random_unit(&mut rng, embed_dim);
        let negs: Vec<Vec<f64>> = (0..k).map(|_| random_unit(&mut rng, embed_dim)).collect();
        let negs = emb(&negs);
        let hp = LossHyperParams {
            tau_ins: [0.07, 0.2, 1.0][i % 3],
            tau_con: [0.04, 0.1, 0.5][(i / 3) % 3],
            alpha: [0.0, 1.0, 10.0, 20.0][i % 4],
            smoothing_eps: 0.0,
        };

        let q = params.forward(&x).unwrap();
        let item = ContrastItem::new(&q, &p, &negs).unwrap();
        let g_q = loss_gradient_wrt_query(&item, &hp).unwrap();
        let fd_q: Vec<f64> = (0..q.len())
            .map(|j| {
                let (mut a, mut b) = (q.clone(), q.clone());
                a[j] += H;
                b[j] -= H;
                (loss_at(&a, &p, &negs, &hp) - loss_at(&b, &p, &negs, &hp)) / (2.0 * H)
            })
            .collect();
        worst_q = worst_q.max(rel_err(&g_q, &fd_q));

        let g_theta = params.backward(&x, &g_q).unwrap();
        let through = |params: &EncoderParams| loss_at(&params.forward(&x).unwrap(), &p, &negs, &hp);
        let fd_theta: Vec<f64> = (0..params.len())
            .map(|j| {
                let (mut a, mut b) = (params.clone(), params.clone());
                a.values_mut()[j] += H;
                b.values_mut()[j] -= H;
                (through(&a) - through(&b)) / (2.0 * H)
            })
            .collect();
        worst_theta = worst_theta.max(rel_err(&g_theta, &fd_theta));
    }
    let elapsed = start.elapsed();
    outcome(
        worst_q < 1e-5 && worst_theta < 1e-5 && elapsed < Duration::from_secs(30),
        format!(
            "{instances} instances, worst relative error dL/dq {worst_q:.2e}, dL/dtheta {worst_theta:.2e} (< 1e-5), {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 8,
        base_lr: 0.05,
        queue_k: 32,
        encoder: EncoderConfig {
            input_dim: 8,
            hidden_dims: vec![12],
            embed_dim: 4,
            ..Default::default()
        },
        ..Default::default()
    }
    .with_seed(seed)
}

fn small_data() -> Vec<Sample> {
    generate_synthetic(&SyntheticSpec {
        num_classes: 3,
        samples_per_class: 16,
        input_dim: 8,
        ..Default::default()
    })
    .unwrap()
}

fn criterion_3() -> Outcome {
    let data = small_data();
    let cfg = small_train_config(21);
    let mut state = TrainState::new(&cfg, data.len()).unwrap();
    let mut ema = state.key_params().values().to_vec();
    let m = cfg.ema_m;
    let mut c = Checks::default();
    for step in 0..50u64 {
        let batch: Vec<(usize, &Sample)> = (0..cfg.batch_size)
            .map(|j| {
                let i = (step as usize * cfg.batch_size + j * 5) % data.len();
                (i, &data[i])
            })
            .collect();
        let key_before = state.key_params().clone();
        let queue_before = state.queue.snapshot().to_rows();
        state.train_step(&batch, step).unwrap();

        for (k, q) in ema.iter_mut().zip(state.query.values()) {
            *k = m * *k + (1.0 - m) * q;
        }
        c.check(state.key_params().values() == ema.as_slice(), format!("theta_k at step {step}"));

        // the queue gains exactly the key encoder's outputs and nothing else moves
        let expected_keys: Vec<Vec<f64>> = batch
            .iter()
            .map(|&(i, s)| {
                let (_, xp) = two_views(
                    &s.features,
                    &cfg.augment,
                    ViewKey {
                        seed: cfg.seed,
                        epoch: step,
                        sample: i as u64,
                    },
                );
                key_before.forward(&xp).unwrap()
            })
            .collect();
        let after = state.queue.snapshot().to_rows();
        let kept = cfg.queue_k - cfg.batch_size;
        c.check(after[..kept] == queue_before[cfg.batch_size..], format!("queue survivors at step {step}"));
        c.check(after[kept..] == expected_keys[..], format!("enqueued keys at step {step}"));
    }
    c.into_outcome(": theta_k equals the EMA recurrence bitwise; queue holds unmodified key outputs")
}

fn criterion_4() -> Outcome {
    let mut c = Checks::default();

    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (0u32..6, 0u32..6, 0usize..10, any::<u64>());
    let fifo = runner.run(&strategy, |(cap_pow, batch_pow, rounds, seed)| {
        let capacity = 1usize << cap_pow;
        let batch = 1usize << batch_pow.min(cap_pow);
        let mut queue = init_queue(capacity, 2, seed).unwrap();
        let mut reference: std::collections::VecDeque<Vec<f64>> = queue.snapshot().to_rows().into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..rounds {
            let keys: Vec<Vec<f64>> = (0..batch).map(|_| random_unit(&mut rng, 2)).collect();
            queue.enqueue_batch(&keys).unwrap();
            for k in keys {
                reference.pop_front();
                reference.push_back(k);
            }
        }
        let expected: Vec<Vec<f64>> = reference.into_iter().collect();
        prop_assert_eq!(queue.snapshot().to_rows(), expected);
        Ok(())
    });
    c.check(fifo.is_ok(), format!("queue FIFO property: {fifo:?}"));

    let cfg = small_train_config(0).encoder;
    let k = init_params(&cfg).unwrap();
    let q = init_params(&EncoderConfig { init_seed: 77, ..cfg }).unwrap();
    for m in [0.0, 0.5, 0.99, 0.999, 1.0] {
        let mut st = MomentumState::new(k.clone(), m).unwrap();
        st.momentum_update(&q).unwrap();
        let closed: Vec<f64> = k.values().iter().zip(q.values()).map(|(a, b)| m * a + (1.0 - m) * b).collect();
        c.check(st.key_params.values() == closed.as_slice(), format!("momentum_update m={m} bitwise"));
    }

    let data = small_data();
    let cfg = small_train_config(9);
    let jsonl = |records: &[MetricsRecord]| {
        let mut s = JsonlSink::new(Vec::new());
        for r in records {
            s.record(r).unwrap();
        }
        s.into_inner()
    };
    let mut full = Vec::new();
    run_training(&cfg, &data, &mut full).unwrap();
    for cut in [1u64, 37, 79] {
        let mut resumed = Vec::new();
        let mut st = TrainState::new(&cfg, data.len()).unwrap();
        st.run(&data, &mut resumed, Some(cut), &mut |_| Ok(())).unwrap();
        let mut bytes = Vec::new();
        st.write_to(&mut bytes).unwrap();
        let mut st = TrainState::read_from(&mut bytes.as_slice()).unwrap();
        st.run(&data, &mut resumed, None, &mut |_| Ok(())).unwrap();
        c.check(jsonl(&full) == jsonl(&resumed), format!("resume at step {cut} reproduces metrics bytes"));
    }
    c.into_outcome(": 1000 FIFO cases, EMA closed form, resume byte-identical")
}

struct BenchRun {
    l_con: f64,
    inst_acc: f64,
    probe: f64,
}

fn bench_run(seed: u64, alpha: f64, data: &[Sample]) -> BenchRun {
    let cfg = TrainConfig {
        alpha,
        ..TrainConfig::default()
    }
    .with_seed(seed);
    let mut metrics = Vec::new();
    let state = run_training(&cfg, data, &mut metrics).unwrap();
    assert_eq!(metrics.len(), 2000);
    let summary = summarize_run(&metrics).unwrap();
    let probe = probe_dataset(Some(&state.query), data, &ProbeConfig::default(), seed).unwrap();
    BenchRun {
        l_con: summary.final_l_con,
        inst_acc: summary.final_inst_acc,
        probe: probe.accuracy,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Bench {
    moco: Vec<BenchRun>,
    co2: Vec<BenchRun>,
    raw_probe: f64,
    elapsed: Duration,
}

fn benchmark() -> Bench {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let defaults = TrainConfig::default();
    assert_eq!(
        (spec.num_classes, spec.input_dim, spec.samples_per_class),
        (4, 32, 64),
        "benchmark data shape"
    );
    assert_eq!(
        (defaults.encoder.embed_dim, defaults.queue_k, defaults.ema_m, defaults.batch_size),
        (16, 256, 0.99, 32),
        "benchmark training shape"
    );
    assert_eq!((defaults.alpha, defaults.tau_con), (10.0, 0.04));
    let data = generate_synthetic(&spec).unwrap();
    let moco = (0..SEEDS).map(|s| bench_run(s, 0.0, &data)).collect();
    let co2 = (0..SEEDS).map(|s| bench_run(s, 10.0, &data)).collect();
    let raw_probe = mean((0..SEEDS).map(|s| probe_dataset(None, &data, &ProbeConfig::default(), s).unwrap().accuracy));
    Bench {
        moco,
        co2,
        raw_probe,
        elapsed: start.elapsed(),
    }
}

fn criterion_5(b: &Bench) -> Outcome {
    let l_moco = mean(b.moco.iter().map(|r| r.l_con));
    let l_co2 = mean(b.co2.iter().map(|r| r.l_con));
    let a_moco = mean(b.moco.iter().map(|r| r.inst_acc));
    let a_co2 = mean(b.co2.iter().map(|r| r.inst_acc));
    let in_time = b.elapsed < Duration::from_secs(600);
    outcome(
        l_co2 < l_moco && a_co2 <= a_moco && in_time,
        format!(
            "mean final L_con CO2 {l_co2:.4} vs MoCo {l_moco:.4}; mean final inst acc CO2 {a_co2:.4} vs MoCo {a_moco:.4}; {} runs in {:.1} s",
            2 * SEEDS,
            b.elapsed.as_secs_f64()
        ),
    )
}

fn raw_reference(b: &Bench) -> Outcome {
    let p_co2 = mean(b.co2.iter().map(|r| r.probe));
    outcome(
        p_co2 >= b.raw_probe,
        format!("mean probe accuracy CO2 features {:.2}% vs raw inputs {:.2}%", 100.0 * p_co2, 100.0 * b.raw_probe),
    )
}

fn criterion_6(b: &Bench) -> Outcome {
    let p_moco = mean(b.moco.iter().map(|r| r.probe));
    let p_co2 = mean(b.co2.iter().map(|r| r.probe));
    let expected = if p_co2 >= p_moco { "holds" } else { "does not hold" };
    outcome(
        p_co2 >= p_moco - 0.005,
        format!(
            "mean probe accuracy CO2 {:.2}% vs MoCo {:.2}% (margin 0.5 points); CO2 >= MoCo {expected}",
            100.0 * p_co2,
            100.0 * p_moco
        ),
    )
}

fn criterion_7() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.alpha = vec![0.0, 1.0, 10.0, 20.0];
    cfg.sweep.tau_con = vec![0.04, 0.05];
    let dir = tempfile::tempdir().unwrap();
    let cells = commands::sweep(&cfg, None, dir.path(), Some(1)).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let complete = lines.first() == Some(&GRID_HEADER)
        && lines.len() == 1 + 8
        && lines[1..].iter().all(|l| l.ends_with(',') && l.split(',').count() == 6);
    let acc = |alpha: f64, tau: f64| {
        cells
            .iter()
            .find(|c| c.alpha == alpha && c.tau_con == tau)
            .and_then(|c| c.result.as_ref().ok())
            .map(|r| r.probe_acc)
    };
    let gated = outcome(
        complete,
        format!("{} grid rows with no failed cells, {:.1} s", lines.len().saturating_sub(1), start.elapsed().as_secs_f64()),
    );
    let direction = match (acc(10.0, 0.04), acc(20.0, 0.04)) {
        (Some(a10), Some(a20)) => {
            let word = if a20 < a10 { "degrades" } else { "does not degrade" };
            outcome(
                a20 < a10,
                format!("probe accuracy alpha=20 {:.2}% vs alpha=10 {:.2}% at tau_con=0.04: alpha=20 {word}", 100.0 * a20, 100.0 * a10),
            )
        }
        _ => outcome(false, "missing cells"),
    };
    (gated, direction)
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_co2"))
            .args(["pretrain", "--seed", "0", "--out"])
            .arg(&out)
            .env("CO2_THREADS", "1")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out.join("metrics.jsonl")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    outcome(
        a == b && lines == 2000,
        format!("two `co2 pretrain` runs: {lines} metric lines each, byte-identical: {}", a == b),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn report(id: &str, name: &str, gated: bool, o: &Outcome) {
    let verdict = match (gated, o.pass) {
        (true, true) => "PASS",
        (true, false) => "FAIL",
        (false, true) => "INFO (as expected)",
        (false, false) => "INFO (not reproduced)",
    };
    println!("acceptance {id} {verdict}: {name}: {}", o.detail);
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // keeps `cargo test -- --list` working without the harness
        return ExitCode::SUCCESS;
    }
    // failures are reported on their own line; the default hook would add a backtrace
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut gate = |id: &str, name: &str, o: Outcome| {
        report(id, name, true, &o);
        if !o.pass {
            failed += 1;
        }
    };
    gate("1", "loss exactness", guarded(criterion_1));
    gate("2", "gradient oracle", guarded(criterion_2));
    gate("3", "stop-gradient contract", guarded(criterion_3));
    gate("4", "machinery invariants", guarded(criterion_4));

    match panic::catch_unwind(benchmark) {
        Ok(b) => {
            gate("5", "training-curve direction at toy scale", criterion_5(&b));
            gate("6", "probe direction at toy scale", criterion_6(&b));
            report("6", "CO2 features vs raw inputs (reported, not gated)", false, &raw_reference(&b));
        }
        Err(_) => {
            gate("5", "training-curve direction at toy scale", outcome(false, "benchmark panicked"));
            gate("6", "probe direction at toy scale", outcome(false, "benchmark panicked"));
        }
    }

    let (sweep, direction) = match panic::catch_unwind(criterion_7) {
        Ok(pair) => pair,
        Err(_) => (outcome(false, "sweep panicked"), outcome(false, "sweep panicked")),
    };
    gate("7", "sweep harness", sweep);
    report("7", "alpha=20 vs alpha=10 direction (reported, not gated)", false, &direction);
    gate("8", "CLI determinism", guarded(criterion_8));

    println!("acceptance summary: {} of 8 criteria failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
