//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use privseq::accountant::{calibrate_sigma, default_orders, epsilon_for, rdp_single_step, SIGMA_BRACKET};
use privseq::corpus::{Encoded, BOS, EOS};
use privseq::evaluation::corpus_bleu;
use privseq::harness::metrics::read_records;
use privseq::harness::run::{METRICS_FILE, TRANSLATIONS_FILE};
use privseq::harness::{resume, synth, train, Checkpoint, ExperimentConfig, Record, ResumeOptions, RunOutcome, SynthOptions};
use privseq::model::*;
use privseq::optimizer::*;
use privseq::rng::{stream, Stream};
use privseq::sampling::*;
use privseq::tensor::Tensor;
use rand::Rng;
use serde::Deserialize;
use tempfile::TempDir;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(id: usize, title: &str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let result = match (result, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1} s, budget {} s", elapsed.as_secs_f64(), b.as_secs())),
        (r, _) => r,
    };
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    println!("criterion {id:>2} {tag}  {title}: {detail} [{:.1} s]", elapsed.as_secs_f64());
    result.is_ok()
}

fn small_config(vocab_size: usize, d_model: usize, d_ff: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model,
        n_layers: 1,
        n_heads: 2,
        d_ff,
        max_seq_len: 8,
    }
}

fn random_examples(rng: &mut impl Rng, content: std::ops::Range<usize>, b: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..b)
        .map(|_| {
            let len = rng.random_range(1..=4);
            let toks: Vec<usize> = (0..len).map(|_| rng.random_range(content.clone())).collect();
            let tgt_len = rng.random_range(1..=4);
            let tgt: Vec<usize> = (0..tgt_len).map(|_| rng.random_range(content.clone())).collect();
            ([&[BOS][..], &toks, &[EOS]].concat(), [&[BOS][..], &tgt, &[EOS]].concat())
        })
        .collect()
}

fn batch(cfg: &ModelConfig, ex: &[(Vec<usize>, Vec<usize>)]) -> Batch {
    let refs: Vec<(&[usize], &[usize])> = ex.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    Batch::new(cfg, &refs).unwrap()
}

fn criterion_1() -> Check {
    // Four reserved ids plus two content tokens.
    let cfg = small_config(6, 4, 8);
    let mut rng = common::rng(1);
    let params = random_params(&cfg, &mut rng, 0.5).unwrap();
    let ex = random_examples(&mut rng, 4..6, 3);
    let b = batch(&cfg, &ex);
    let analytic = loss_graph(&params, &b).unwrap().sum_gradient().unwrap();
    let total = |ts: &[Tensor]| {
        let p = ModelParams::from_tensors(cfg, ts.to_vec()).unwrap();
        batch_loss(&p, &b).unwrap().data().iter().sum::<f64>()
    };
    let numeric = common::finite_differences(params.tensors(), 1e-5, &total);
    let mut worst = (0.0f64, String::new());
    for ((name, a), n) in params.names().iter().zip(analytic.tensors()).zip(&numeric) {
        let err = common::relative_error(a, n);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    ensure(worst.0 < 1e-4, || format!("{} relative error {:.3e}", worst.1, worst.0))?;
    Ok(format!(
        "{} tensors, worst relative error {:.2e} ({}) < 1e-4",
        params.tensors().len(),
        worst.0,
        worst.1
    ))
}

fn criterion_2() -> Check {
    let cfg = small_config(11, 8, 8);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let mut rng = common::rng(1000 + trial);
        let params = random_params(&cfg, &mut rng, 0.5).unwrap();
        let b = rng.random_range(1..=8);
        let ex = random_examples(&mut rng, 3..11, b);
        let mut graph = loss_graph(&params, &batch(&cfg, &ex)).unwrap();
        let per = graph.per_example_gradients().unwrap();
        let ids = graph.tape.params().to_vec();
        for (i, per_i) in per.iter().enumerate() {
            // Oracle: an ordinary backward pass from example i's loss alone.
            let li = graph.tape.slice(graph.losses, 0, i, i + 1).unwrap();
            let scalar = graph.tape.sum(li).unwrap();
            let grads = graph.tape.backward(scalar).unwrap();
            for (id, t) in ids.iter().zip(per_i.tensors()) {
                for (u, v) in t.data().iter().zip(grads[id].data()) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max elementwise difference {worst:.3e}"))?;
    Ok(format!("100 trials, B <= 8, max elementwise difference {worst:.2e} <= 1e-12"))
}

fn reversal_data(rng: &mut impl Rng, n: usize) -> Vec<Encoded> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=4);
            let toks: Vec<usize> = (0..len).map(|_| rng.random_range(3..10)).collect();
            let rev: Vec<usize> = toks.iter().rev().copied().collect();
            Encoded {
                source: [&[BOS][..], &toks, &[EOS]].concat(),
                target: [&[BOS][..], &rev, &[EOS]].concat(),
            }
        })
        .collect()
}

fn max_relative(a: &ModelParams, b: &ModelParams) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            worst = worst.max((u - v).abs() / u.abs().max(v.abs()).max(1e-300));
        }
    }
    worst
}

fn criterion_3() -> Check {
    let cfg = small_config(10, 8, 8);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut rng = common::rng(300 + trial);
        let n = rng.random_range(2..=20);
        let data = reversal_data(&mut rng, n);
        let params = random_params(&cfg, &mut rng, 0.5).unwrap();
        let lr = rng.random_range(0.01..1.0);
        let pb = rng.random_range(1..=n);
        let lot: Vec<usize> = (0..n).collect();
        let dp = DpConfig {
            private: true,
            clip: 1e9,
            sigma: 0.0,
            lot_size: n,
            learning_rate: lr,
            divisor: DivisorMode::Expected,
        };
        let mut ours = params.clone();
        let mut noise = stream(trial, Stream::Noise);
        train_step(&mut ours, &lot, &data, &dp, pb, Some(&mut noise)).unwrap();

        // Independent step: full-batch mean gradient straight from the loss graph.
        let ex: Vec<(Vec<usize>, Vec<usize>)> = data.iter().map(|e| (e.source.clone(), e.target.clone())).collect();
        let g = loss_graph(&params, &batch(&cfg, &ex)).unwrap().sum_gradient().unwrap();
        let tensors = params
            .tensors()
            .iter()
            .zip(g.tensors())
            .map(|(p, g)| {
                let d = p.data().iter().zip(g.data()).map(|(w, d)| w - lr * (d / n as f64)).collect();
                Tensor::new(p.shape().to_vec(), d).unwrap()
            })
            .collect();
        let oracle = ModelParams::from_tensors(cfg, tensors).unwrap();
        worst = worst.max(max_relative(&ours, &oracle));
    }
    ensure(worst <= 1e-12, || format!("max relative difference {worst:.3e}"))?;
    Ok(format!("20 instances, max relative difference {worst:.2e} <= 1e-12"))
}

fn criterion_4() -> Check {
    let mut rng = common::rng(4);
    let (mut clipped, mut untouched) = (0, 0);
    for case in 0..1000 {
        let k = rng.random_range(1..5);
        let names: Arc<[String]> = (0..k).map(|i| format!("p{i}")).collect();
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let tensors = (0..k)
            .map(|_| {
                let n = rng.random_range(1..40);
                Tensor::from_vec((0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
            })
            .collect();
        let g = GradMap::new(names, tensors);
        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        let once = clip_gradient(&g, c).unwrap();
        ensure(once.norm() <= c, || format!("case {case}: norm {} > C = {c}", once.norm()))?;
        if g.norm() <= c {
            ensure(once == g, || format!("case {case}: in-bound gradient changed"))?;
            untouched += 1;
        } else {
            clipped += 1;
        }
        ensure(clip_gradient(&once, c).unwrap() == once, || format!("case {case}: clip is not idempotent"))?;
    }
    Ok(format!("1000 maps ({clipped} clipped, {untouched} within bound): norm <= C, in-bound unchanged, idempotent"))
}

fn criterion_5() -> Check {
    let cfg = small_config(10, 8, 8);
    let mut worst: f64 = 0.0;
    for trial in 0..5 {
        let mut rng = common::rng(500 + trial);
        let data = reversal_data(&mut rng, 30);
        let params = random_params(&cfg, &mut rng, 0.5).unwrap();
        let lot: Vec<usize> = (0..30).filter(|_| rng.random_bool(0.4)).collect();
        let dp = DpConfig {
            private: true,
            clip: 0.7,
            sigma: 1.3,
            lot_size: 12,
            learning_rate: 0.3,
            divisor: DivisorMode::Expected,
        };
        let step = |pb: usize| {
            let mut p = params.clone();
            let mut noise = stream(77 + trial, Stream::Noise);
            train_step(&mut p, &lot, &data, &dp, pb, Some(&mut noise)).unwrap();
            p
        };
        let reference = step(lot.len().max(1));
        for pb in [1, 2, 5] {
            worst = worst.max(max_relative(&step(pb), &reference));
        }
    }
    ensure(worst <= 1e-12, || format!("max relative difference {worst:.3e}"))?;
    Ok(format!("physical batch 1, 2, 5, L agree to {worst:.2e} <= 1e-12"))
}

fn criterion_6() -> Check {
    let (n, q, draws) = (100usize, 0.1, 10_000usize);
    let mut s = Sampler::new(SamplerConfig {
        method: Method::Poisson,
        n,
        lot_size: 10,
        physical_batch: 16,
        seed: 6,
    })
    .unwrap();
    let mut total = 0;
    let mut per_index = vec![0usize; n];
    for _ in 0..draws {
        for i in s.next_lot().indices {
            per_index[i] += 1;
            total += 1;
        }
    }
    let mean = total as f64 / draws as f64;
    let bound = 3.0 * (n as f64 * q * (1.0 - q) / draws as f64).sqrt();
    ensure((mean - 10.0).abs() <= bound, || format!("mean lot size {mean} outside 10 ± {bound:.4}"))?;
    let se = (q * (1.0 - q) / draws as f64).sqrt();
    let worst = per_index
        .iter()
        .map(|&c| ((c as f64 / draws as f64) - q).abs() / se)
        .fold(0.0f64, f64::max);
    ensure(worst <= 3.0, || format!("an inclusion rate is {worst:.2} standard errors from q"))?;

    for (n, l) in [(100, 10), (1065, 256), (37, 5)] {
        let mut s = Sampler::new(SamplerConfig {
            method: Method::Shuffle,
            n,
            lot_size: l,
            physical_batch: 16,
            seed: 9,
        })
        .unwrap();
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..lots_per_epoch(n, l)).flat_map(|_| s.next_lot().indices).collect();
            seen.sort_unstable();
            ensure(seen == (0..n).collect::<Vec<_>>(), || format!("shuffle N={n} L={l} epoch {epoch} is not a partition"))?;
        }
    }
    Ok(format!(
        "mean lot size {mean:.4} (10 ± {bound:.4}), worst inclusion rate {worst:.2} SE; shuffle epochs partition"
    ))
}

#[derive(Deserialize)]
struct OracleRow {
    q: f64,
    sigma: f64,
    order: u32,
    rdp: String,
}

fn criterion_7() -> Check {
    let orders = default_orders();
    let mut worst_full: f64 = 0.0;
    for sigma in [0.5, 1.0, 4.0, 10.0] {
        let c = rdp_single_step(1.0, sigma, &orders).unwrap();
        for (&a, &v) in orders.iter().zip(&c.values) {
            let want = a as f64 / (2.0 * sigma * sigma);
            worst_full = worst_full.max(((v - want) / want).abs());
        }
    }
    ensure(worst_full <= 1e-12, || format!("q=1 relative error {worst_full:.3e}"))?;

    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/oracles/rdp_values.json");
    let rows: Vec<OracleRow> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let mut grid: Vec<(f64, f64)> = rows.iter().map(|r| (r.q, r.sigma)).collect();
    grid.dedup();
    let mut want_grid = Vec::new();
    for q in [0.001, 0.01, 0.1] {
        for s in [1.0, 4.0, 10.0] {
            want_grid.push((q, s));
        }
    }
    ensure(grid == want_grid, || format!("oracle grid {grid:?}"))?;
    let mut worst_oracle: f64 = 0.0;
    for r in &rows {
        let got = rdp_single_step(r.q, r.sigma, &[r.order]).unwrap().values[0];
        let want: f64 = r.rdp.parse().unwrap();
        worst_oracle = worst_oracle.max(((got - want) / want).abs());
    }
    ensure(worst_oracle < 1e-6, || format!("oracle relative error {worst_oracle:.3e}"))?;

    let mut rng = common::rng(7);
    let eps = |q: f64, s: f64, t: u64, d: f64| epsilon_for(q, s, t, d, &orders).unwrap();
    for i in 0..100 {
        let q = 10f64.powf(rng.random_range(-3.5..0.0));
        let s = rng.random_range(0.4..8.0);
        let t = rng.random_range(1..5000u64);
        let d = 10f64.powf(rng.random_range(-10.0..-3.0));
        let base = eps(q, s, t, d);
        ensure(eps(q, s, t + 1 + t / 2, d) >= base, || format!("point {i}: not monotone in T"))?;
        ensure(eps((q * 1.5).min(1.0), s, t, d) >= base, || format!("point {i}: not monotone in q"))?;
        ensure(eps(q, s * 1.25, t, d) <= base, || format!("point {i}: not monotone in 1/sigma"))?;
        ensure(eps(q, s, t, d * 10.0) <= base, || format!("point {i}: not monotone in 1/delta"))?;
    }
    Ok(format!(
        "q=1 error {worst_full:.1e}, oracle error {worst_oracle:.1e} over {} values, monotone at 100 points",
        rows.len()
    ))
}

fn criterion_8() -> Check {
    let orders = default_orders();
    // Representative (q, T) where each budget binds inside the σ bracket,
    // including the end-to-end experiment's own (0.128, 320).
    let cases = [
        (1.0, 0.01, 1000u64),
        (1.0, 0.128, 320),
        (5.0, 0.05, 500),
        (5.0, 0.128, 320),
        (1000.0, 1.0, 150),
        (1000.0, 0.5, 2000),
    ];
    let mut parts = Vec::new();
    for (target, q, t) in cases {
        let sigma = calibrate_sigma(target, 1e-8, q, t, &orders).map_err(|e| e.to_string())?;
        let eps = epsilon_for(q, sigma, t, 1e-8, &orders).unwrap();
        ensure(sigma > SIGMA_BRACKET.0, || format!("target {target} at q={q}, T={t} does not bind"))?;
        ensure(eps <= target && eps >= 0.99 * target, || {
            format!("target {target} at q={q}, T={t}: epsilon {eps} at sigma {sigma}")
        })?;
        parts.push(format!("ε*={target}: σ={sigma:.3} ε={eps:.4}"));
    }
    Ok(parts.join("; "))
}

fn criterion_9() -> Check {
    let mut rng = common::rng(9);
    for trial in 0..100 {
        let (cands, refs) = common::bleu::random_corpus(&mut rng);
        let got = corpus_bleu(&cands, &refs).unwrap();
        let want = common::bleu::oracle(&cands, &refs);
        ensure(got.matches == want.matches && got.totals == want.totals, || format!("trial {trial}: counts differ"))?;
        let expected = common::bleu::oracle_bleu(&want);
        ensure((got.bleu - expected).abs() <= 1e-12 * expected.max(1.0), || {
            format!("trial {trial}: BLEU {} vs {expected}", got.bleu)
        })?;
    }
    let refs = ["a b c d e", "f g h i j k"];
    let same = corpus_bleu(&refs, &refs).unwrap().bleu;
    ensure(same == 100.0, || format!("identical corpus scored {same}"))?;
    let empty = corpus_bleu(&["", ""], &refs).unwrap().bleu;
    ensure(empty == 0.0, || format!("empty candidates scored {empty}"))?;
    Ok("100 random corpora match the brute-force oracle; identical = 100.0; empty = 0.0".into())
}

fn end_to_end_config(root: &Path, name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.out = root.join(name);
    c.data.dataset = Some(root.join("data"));
    c.data.max_seq_len = 10;
    c.model.d_model = 32;
    c.model.n_layers = 1;
    c.model.n_heads = 4;
    c.model.d_ff = 64;
    c.sampler.physical_batch = 16;
    c
}

fn carries_label(out: &RunOutcome, dir: &Path, method: Method) -> std::result::Result<(), String> {
    let label = method.guarantee_label();
    let p = out.provenance.as_ref().ok_or("private run without provenance")?;
    ensure(p.guarantee == label && p.method == method, || format!("run outcome label {:?}", p.guarantee))?;
    for file in [METRICS_FILE, TRANSLATIONS_FILE] {
        let text = std::fs::read_to_string(dir.join(file)).map_err(|e| e.to_string())?;
        ensure(text.contains(label), || format!("{file} lacks the guarantee label"))?;
    }
    let ck = Checkpoint::load(&out.checkpoint).map_err(|e| e.to_string())?;
    ensure(ck.provenance.as_ref().map(|p| p.guarantee.as_str()) == Some(label), || {
        "checkpoint lacks the guarantee label".into()
    })
}

fn criterion_10() -> Check {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    synth(
        &root.join("data"),
        &SynthOptions {
            train_pairs: 2000,
            test_pairs: 200,
            vocab_tokens: 50,
            lengths: (3, 8),
            seed: 1,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;

    // (a) ε = ∞.
    let mut plain = end_to_end_config(root, "plain");
    plain.privacy.private = false;
    plain.sampler.lot_size = 32;
    plain.train.lr = 0.5;
    plain.train.epochs = 60;
    let started = Instant::now();
    let out = train(&plain, None).map_err(|e| e.to_string())?;
    let plain_time = started.elapsed();
    let plain_bleu = out.bleu.ok_or("no test BLEU")?.bleu;
    println!("    non-private: BLEU {plain_bleu:.2} in {:.1} s", plain_time.as_secs_f64());
    ensure(plain_bleu >= 90.0, || format!("non-private BLEU {plain_bleu:.2} < 90"))?;
    ensure(plain_time <= Duration::from_secs(15 * 60), || "non-private run exceeded 15 minutes".into())?;

    // (b, c) three budgets, both iteration methods, three seeds.
    let budgets = [1000.0, 5.0, 1.0];
    let mut summary = vec![format!("ε=∞ BLEU {plain_bleu:.1} ({:.0} s)", plain_time.as_secs_f64())];
    for method in [Method::Poisson, Method::Shuffle] {
        let mut means = Vec::new();
        for target in budgets {
            let mut scores = Vec::new();
            for seed in [1u64, 2, 3] {
                let name = format!("{method}-{target}-{seed}");
                let mut c = end_to_end_config(root, &name);
                c.seed = seed;
                c.sampler.method = method;
                c.sampler.lot_size = 256;
                c.privacy.epsilon = Some(target);
                c.privacy.delta = 1e-8;
                c.privacy.clip = 1.0;
                c.train.lr = 4.0;
                c.train.epochs = 40;
                let out = train(&c, None).map_err(|e| format!("{name}: {e}"))?;
                let spent = out.provenance.as_ref().map(|p| p.epsilon).unwrap_or(f64::INFINITY);
                ensure(spent <= target, || format!("{name}: reported epsilon {spent} > {target}"))?;
                let running_ok = read_records(&c.out.join(METRICS_FILE))
                    .map_err(|e| e.to_string())?
                    .iter()
                    .all(|r| !matches!(r, Record::Lot(l) if l.epsilon.is_none_or(|e| e > target)));
                ensure(running_ok, || format!("{name}: running epsilon exceeded {target}"))?;
                carries_label(&out, &c.out, method).map_err(|e| format!("{name}: {e}"))?;
                let bleu = out.bleu.ok_or("no test BLEU")?.bleu;
                println!(
                    "    {method:<7} ε*={target:<6} seed {seed}: σ={:.3} ε={spent:.3} T={} BLEU {bleu:.2}",
                    out.plan.sigma, out.step
                );
                scores.push(bleu);
            }
            means.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
        ensure(means.windows(2).all(|w| w[0] >= w[1]), || {
            format!("{method} mean BLEU not non-increasing as ε tightens: {means:.2?}")
        })?;
        summary.push(format!(
            "{method} mean BLEU ε=1000/5/1: {:.1}/{:.1}/{:.1}",
            means[0], means[1], means[2]
        ));
    }
    Ok(summary.join("; "))
}

fn criterion_11() -> Check {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    synth(
        &root.join("data"),
        &SynthOptions {
            train_pairs: 120,
            test_pairs: 20,
            vocab_tokens: 12,
            lengths: (2, 5),
            seed: 11,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    for method in [Method::Poisson, Method::Shuffle] {
        let mut c = end_to_end_config(root, &format!("straight-{method}"));
        c.model.d_model = 16;
        c.model.d_ff = 32;
        c.sampler.method = method;
        c.sampler.lot_size = 24;
        c.privacy.sigma = Some(1.1);
        c.privacy.delta = 1e-5;
        c.train.steps = Some(20);
        c.train.lr = 0.5;
        let mut split = c.clone();
        split.out = root.join(format!("split-{method}"));
        let a = train(&c, None).map_err(|e| e.to_string())?;
        let half = train(&split, Some(10)).map_err(|e| e.to_string())?;
        let b = resume(&half.checkpoint, &ResumeOptions::default()).map_err(|e| e.to_string())?;
        let (ba, bb) = (std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
        ensure(ba == bb, || format!("{method}: checkpoints differ"))?;
    }
    Ok("train 10 + resume 10 gives a byte-identical checkpoint to train 20 (poisson and shuffle)".into())
}

fn criterion_12() -> Check {
    let per_epoch = lots_per_epoch(1065, 256);
    ensure(per_epoch == 5, || format!("lots_per_epoch(1065, 256) = {per_epoch}"))?;
    let mut c = ExperimentConfig::default();
    c.privacy.epsilon = Some(5.0);
    c.sampler.lot_size = 256;
    c.train.epochs = 25;
    let plan = c.plan(1065).map_err(|e| e.to_string())?;
    ensure(plan.steps == 125, || format!("T = {}", plan.steps))?;
    Ok(format!("lots_per_epoch(1065, 256) = {per_epoch}, T = {} at 25 epochs", plan.steps))
}

fn main() {
    // The end-to-end budget is stated for a single core.
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let minute = Some(Duration::from_secs(60));
    let results = [
        run(1, "gradient correctness", minute, criterion_1),
        run(2, "per-example semantics", minute, criterion_2),
        run(3, "DP-SGD degenerates to SGD", None, criterion_3),
        run(4, "clipping", None, criterion_4),
        run(5, "chunking invariance", None, criterion_5),
        run(6, "sampler statistics", minute, criterion_6),
        run(7, "accountant exactness", None, criterion_7),
        run(8, "calibration round-trip", None, criterion_8),
        run(9, "BLEU oracle equivalence", None, criterion_9),
        run(10, "end-to-end experiment", None, criterion_10),
        run(11, "resume determinism", None, criterion_11),
        run(12, "epoch accounting", None, criterion_12),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
