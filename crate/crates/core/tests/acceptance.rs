//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Set `SDSR_ACCEPTANCE=1,5,6` to run a subset.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use sdsr::adaptor::{Adaptor, AdaptorPreset};
use sdsr::model::{ModelBundle, ModelConfig};
use sdsr::numerics::{check_param_set, GradCheckOptions, Graph, ParamSet, Tensor};
use sdsr::pipeline::{offline_decode, run_streaming, PipelineConfig, StageCosts, SENTENCE_LEVEL};
use sdsr::quantizer::{fit_codebook, QuantizerConfig};
use sdsr::training::{
    evaluate, gen_corpus, stage1_train, stage2_finetune, Corpus, CorpusSpec, EvalReport, Split, TrainConfig, Variant,
};
use sdsr::transducer::greedy_decode;
use sdsr::waitk::{WaitKConfig, WaitKModel};

use common::*;

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-9;
const RTF_TOL: f64 = 1e-12;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ----- 1: transducer loss against path enumeration ----------------------------------

fn transducer_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut r = rng(1);
    for frames in 1..=4 {
        for labels in 0..=3 {
            for vocab in 2..=5 {
                for _ in 0..5 {
                    let lp = random_lattice(&mut r, frames, labels, vocab);
                    let targets: Vec<usize> = (0..labels).map(|_| r.random_range(1..vocab)).collect();
                    let mut g = Graph::new();
                    let v = g.constant(lp.clone());
                    let loss = g.transducer_loss(v, frames, &targets).unwrap();
                    let got = g.value(loss).item();
                    worst = worst.max((got - brute_force_nll(&lp, frames, &targets)).abs());
                    cases += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < ORACLE_TOL && secs < 10.0,
        format!("{cases} lattices, max |diff| {worst:.2e} (< {ORACLE_TOL:.0e}), {secs:.2} s (< 10 s)"),
    )
}

// ----- 2: finite differences -----------------------------------------------------------

fn fd_opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        coords_per_tensor: 2,
        ..Default::default()
    }
}

fn grad_transducer(seed: u64) -> f64 {
    let b = toy_bundle(seed);
    let mut r = rng(seed);
    let frames = r.random_range(2..6);
    let labels: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(1..VOCAB)).collect();
    let x = input(seed, frames);
    check_param_set(
        &b.set,
        |n| n.starts_with("tr."),
        |g, p| {
            let xv = g.constant(x.clone());
            let h = b.transducer.encode(g, p, xv)?;
            let lat = b.transducer.lattice(g, p, h, &labels)?;
            b.transducer.loss(g, &lat, &labels)
        },
        fd_opts(seed),
    )
    .unwrap()
}

fn grad_fusion(seed: u64) -> f64 {
    let b = toy_bundle(seed);
    let frames = 2 + (seed as usize % 4);
    let x = input(seed, frames);
    let hyp = greedy_decode(&b.transducer, &b.set, &b.transducer.encode_offline(&b.set, &x).unwrap());
    let weights = Tensor::randn(&[frames, b.adaptor.dim], 1.0, &mut rng(seed ^ 7));
    check_param_set(
        &b.set,
        |n| n.starts_with("apt.") || n.starts_with("tr.enc"),
        |g, p| {
            let xv = g.constant(x.clone());
            let h = b.transducer.encode(g, p, xv)?;
            let lat = b.transducer.lattice(g, p, h, &hyp.tokens)?;
            let out = b.adaptor.forward(g, p, &lat, &hyp.path)?;
            let w = g.constant(weights.clone());
            let m = g.mul(out, w)?;
            Ok(g.sum(m))
        },
        fd_opts(seed),
    )
    .unwrap()
}

fn small_waitk(seed: u64) -> (ParamSet, WaitKModel, Tensor, Vec<usize>) {
    let cfg = WaitKConfig {
        ks: vec![1, 2, 4],
        teacher_offset: 2,
        alpha: 0.2,
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        max_rel: 3,
    };
    let mut r = rng(seed);
    let mut set = ParamSet::new();
    let model = WaitKModel::init(&mut set, &cfg, 5, 4, &mut r).unwrap();
    for &id in model.rel_bias.iter().chain([&model.reach]) {
        let shape = set.get(id).shape().to_vec();
        *set.get_mut(id) = Tensor::randn(&shape, 0.5, &mut r);
    }
    let frames = r.random_range(3..8);
    let h = Tensor::randn(&[frames, 5], 1.0, &mut r);
    let codes = (0..frames).map(|_| r.random_range(0..4)).collect();
    (set, model, h, codes)
}

/// The total objective with every teacher row frozen at `teachers`, built
/// from plain rows rather than the loss code.
fn frozen_objective(model: &WaitKModel, set: &ParamSet, h: &Tensor, codes: &[usize], teachers: &[(usize, Tensor)]) -> f64 {
    let cfg = &model.cfg;
    let n = codes.len() as f64;
    let mut ce = 0.0;
    for &k in &cfg.ks {
        let lp = model.log_probs(set, h, codes, k).unwrap();
        ce -= codes.iter().enumerate().map(|(j, &c)| lp.row(j)[c]).sum::<f64>() / n;
    }
    let mut kd = 0.0;
    for (s, teacher) in teachers {
        let ls = model.log_probs(set, h, codes, *s).unwrap();
        for j in 0..codes.len() {
            for (a, b) in ls.row(j).iter().zip(teacher.row(j)) {
                kd += a.exp() * (a - b);
            }
        }
    }
    (1.0 - cfg.alpha) * ce + cfg.alpha * kd
}

fn grad_loss_total(seed: u64) -> f64 {
    let (set, model, h, codes) = small_waitk(seed);
    let teachers: Vec<(usize, Tensor)> = model
        .cfg
        .kd_students()
        .into_iter()
        .map(|s| (s, model.log_probs(&set, &h, &codes, s + model.cfg.teacher_offset).unwrap()))
        .collect();

    let mut g = Graph::new();
    let p = set.bind(&mut g, |_| true);
    let hv = g.constant(h.clone());
    let loss = model.loss_total(&mut g, &p, hv, &codes).unwrap();
    g.backward(loss.total).unwrap();
    let grads = p.grads(&g);

    let step = 1e-5;
    let mut r = rng(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = set.ids().collect();
    for (id, grad) in ids.into_iter().zip(grads) {
        let grad = grad.unwrap_or_else(|| Tensor::zeros(set.get(id).shape()));
        for _ in 0..2 {
            let c = r.random_range(0..grad.len());
            let mut work = set.clone();
            let orig = work.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + step;
            let plus = frozen_objective(&model, &work, &h, &codes, &teachers);
            work.get_mut(id).data_mut()[c] = orig - step;
            let minus = frozen_objective(&model, &work, &h, &codes, &teachers);
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(sdsr::numerics::relative_error(grad.data()[c], numeric));
        }
    }
    worst
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let seeds = 0..50u64;
    let a = seeds.clone().map(grad_transducer).fold(0.0, f64::max);
    let b = seeds.clone().map(grad_fusion).fold(0.0, f64::max);
    let c = seeds.map(grad_loss_total).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        a.max(b).max(c) < GRAD_TOL && secs < 60.0,
        format!("50 seeds each, max rel err transducer {a:.1e}, fusion {b:.1e}, total {c:.1e} (< {GRAD_TOL:.0e}), {secs:.1} s (< 60 s)"),
    )
}

// ----- 3: wait-k causality -------------------------------------------------------------

fn default_waitk(seed: u64) -> (ParamSet, WaitKModel) {
    let mut r = rng(seed);
    let mut set = ParamSet::new();
    let model = WaitKModel::init(&mut set, &WaitKConfig::default(), 8, 16, &mut r).unwrap();
    for &id in model.rel_bias.iter().chain([&model.reach]) {
        let shape = set.get(id).shape().to_vec();
        *set.get_mut(id) = Tensor::randn(&shape, 0.5, &mut r);
    }
    (set, model)
}

fn causality() -> Verdict {
    let (set, model) = default_waitk(3);
    let mut r = rng(30);
    let mut violations = 0;
    let mut checked_rows = 0;
    for k in [1, 10, 20] {
        for _ in 0..100 {
            let frames = r.random_range(2..45);
            let h = Tensor::randn(&[frames, 8], 1.0, &mut r);
            let codes: Vec<usize> = (0..frames).map(|_| r.random_range(0..16)).collect();
            let base = model.log_probs(&set, &h, &codes, k).unwrap();

            // frames from `cut` on change: rows with j + k <= cut must not
            let cut = r.random_range(0..frames);
            let mut h2 = h.clone();
            for s in cut..frames {
                for v in h2.row_mut(s) {
                    *v += r.random_range(-2.0..2.0);
                }
            }
            // codes from `ccut` on change: rows j <= ccut must not
            let ccut = r.random_range(0..frames);
            let mut codes2 = codes.clone();
            for c in &mut codes2[ccut..] {
                *c = r.random_range(0..16);
            }
            let moved_frames = model.log_probs(&set, &h2, &codes, k).unwrap();
            let moved_codes = model.log_probs(&set, &h, &codes2, k).unwrap();
            for j in 0..frames {
                if j + k <= cut {
                    checked_rows += 1;
                    violations += usize::from(moved_frames.row(j) != base.row(j));
                }
                if j <= ccut {
                    checked_rows += 1;
                    violations += usize::from(moved_codes.row(j) != base.row(j));
                }
            }
        }
    }
    verdict(
        violations == 0,
        format!("300 trials, {checked_rows} protected rows compared bit-exactly, {violations} violations"),
    )
}

// ----- 4: distillation contract --------------------------------------------------------

fn kd_contract() -> Verdict {
    let (set, model) = default_waitk(4);
    let mut r = rng(40);
    let mut negative = 0;
    let mut min_kd = f64::INFINITY;
    for _ in 0..100 {
        let frames = r.random_range(1..40);
        let h = Tensor::randn(&[frames, 8], 1.0, &mut r);
        let codes: Vec<usize> = (0..frames).map(|_| r.random_range(0..16)).collect();
        let mut g = Graph::new();
        let p = set.bind(&mut g, |_| false);
        let hv = g.constant(h);
        let loss = model.loss_total(&mut g, &p, hv, &codes).unwrap();
        let kd = g.value(loss.kd).item();
        min_kd = min_kd.min(kd);
        negative += usize::from(kd < 0.0);
    }

    // student 10 and teacher 20 both see everything once T <= 9
    let mut nonzero = 0;
    for frames in 1..=9 {
        let h = Tensor::randn(&[frames, 8], 1.0, &mut r);
        let codes: Vec<usize> = (0..frames).map(|_| r.random_range(0..16)).collect();
        let mut g = Graph::new();
        let p = set.bind(&mut g, |_| false);
        let hv = g.constant(h);
        let views = model.forward_views(&mut g, &p, hv, &codes, &[10, 20]).unwrap();
        let kd = model.loss_kd(&mut g, &views, &[10], 10).unwrap();
        nonzero += usize::from(g.value(kd).item() != 0.0);
    }

    // the loss gradient equals that of the student against a constant teacher
    let frames = 25;
    let h = Tensor::randn(&[frames, 8], 1.0, &mut r);
    let codes: Vec<usize> = (0..frames).map(|_| r.random_range(0..16)).collect();
    let grads = |frozen: bool| {
        let mut g = Graph::new();
        let p = set.bind(&mut g, |_| true);
        let hv = g.constant(h.clone());
        let loss = if frozen {
            let student = model.forward(&mut g, &p, hv, &codes, 1).unwrap();
            let teacher = model.log_probs(&set, &h, &codes, 11).unwrap();
            let t = g.constant(teacher);
            g.kl_divergence(student, t, false).unwrap()
        } else {
            let views = model.forward_views(&mut g, &p, hv, &codes, &[1, 11]).unwrap();
            model.loss_kd(&mut g, &views, &[1], 10).unwrap()
        };
        g.backward(loss).unwrap();
        p.grads(&g)
    };
    let mut detach_err: f64 = 0.0;
    let mut mismatched = 0;
    for (a, b) in grads(false).iter().zip(grads(true)) {
        match (a, b) {
            (Some(a), Some(b)) => detach_err = detach_err.max(a.max_abs_diff(&b)),
            (a, b) => mismatched += usize::from(a.is_some() != b.is_some()),
        }
    }
    verdict(
        negative == 0 && nonzero == 0 && detach_err < 1e-12 && mismatched == 0,
        format!(
            "min KD over 100 toys {min_kd:.3e} ({negative} negative); saturated KD nonzero in {nonzero}/9; \
             detached-teacher gradient max diff {detach_err:.1e}"
        ),
    )
}

// ----- 5: streaming equals offline -----------------------------------------------------

fn streaming_equivalence() -> Verdict {
    let mut r = rng(50);
    let mut mismatches = 0;
    for trial in 0..50u64 {
        let b = toy_bundle(trial);
        let frames = r.random_range(1..40);
        let k = if r.random_bool(0.15) { SENTENCE_LEVEL } else { r.random_range(1..25) };
        let chunk_size = r.random_range(1..9);
        let x = input(trial, frames);
        let cfg = PipelineConfig {
            chunk_size,
            ..PipelineConfig::default()
        };
        let streamed = run_streaming(&b, &x, k, &cfg).unwrap();
        let (codes, chunks) = offline_decode(&b, &x, k, chunk_size).unwrap();
        mismatches += usize::from(streamed.codes != codes || streamed.chunks != chunks);
    }
    verdict(mismatches == 0, format!("50 (input, k, chunk_size) triples, {mismatches} mismatches"))
}

// ----- 6: latency ordering -------------------------------------------------------------

fn default_bundle(seed: u64) -> ModelBundle {
    let spec = CorpusSpec::default();
    let points = Tensor::randn(&[200, spec.target_dim], 1.0, &mut rng(seed));
    let codebook = fit_codebook(&points, &QuantizerConfig::default(), DUR, seed).unwrap();
    ModelBundle::init(&ModelConfig::default(), spec.feature_dim, spec.vocab, codebook, seed).unwrap()
}

fn latency_trend() -> Verdict {
    let b = default_bundle(6);
    let cfg = PipelineConfig {
        costs: StageCosts::default(),
        ..PipelineConfig::default()
    };
    let mut r = rng(60);
    let mut ordered = 0;
    let mut rtf_spread: f64 = 0.0;
    let inputs = 20;
    let mut means = [0.0; 4];
    for i in 0..inputs {
        // long enough that the first chunk under k = 20 does not need the end
        let frames = r.random_range(25..61);
        let x = Tensor::randn(&[frames, b.feature_dim], 1.0, &mut rng(600 + i));
        let reports: Vec<_> = [1, 10, 20, SENTENCE_LEVEL]
            .iter()
            .map(|&k| run_streaming(&b, &x, k, &cfg).unwrap().report)
            .collect();
        let fr: Vec<f64> = reports.iter().map(|r| r.first_response_s).collect();
        ordered += usize::from(fr.windows(2).all(|w| w[0] < w[1]));
        let (lo, hi) = reports
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.rtf), hi.max(r.rtf)));
        rtf_spread = rtf_spread.max(hi - lo);
        for (m, v) in means.iter_mut().zip(&fr) {
            *m += v / inputs as f64;
        }
    }
    verdict(
        ordered == inputs as usize && rtf_spread <= RTF_TOL,
        format!(
            "ordered on {ordered}/{inputs} inputs, mean first response k=1 {:.3} s, k=10 {:.3} s, k=20 {:.3} s, \
             sentence {:.3} s; RTF spread {rtf_spread:.1e}",
            means[0], means[1], means[2], means[3]
        ),
    )
}

// ----- 7-9: trained runs ---------------------------------------------------------------

struct SeedRun {
    seed: u64,
    stage1_normal: EvalReport,
    stage1_dys: EvalReport,
    stage2_normal: EvalReport,
    stage2_dys: EvalReport,
    ablation_normal: EvalReport,
    train_time: Duration,
    max_frames: usize,
}

fn eval(b: &ModelBundle, corpus: &Corpus, v: Variant) -> EvalReport {
    evaluate(b, corpus.iter(v, Split::Test), &[1, 10, 20]).unwrap()
}

fn train_seed(seed: u64) -> SeedRun {
    let spec = CorpusSpec::default();
    let cfg = TrainConfig::default();
    let corpus = gen_corpus(&spec, &QuantizerConfig::default(), DUR, seed).unwrap();
    let init = |mc: &ModelConfig| {
        ModelBundle::init(mc, spec.feature_dim, spec.vocab, corpus.codebook.clone(), seed).unwrap()
    };

    let start = Instant::now();
    let mut b = init(&ModelConfig::default());
    stage1_train(&mut b, &corpus, &cfg, seed).unwrap();
    let stage1_time = start.elapsed();
    let stage1_normal = eval(&b, &corpus, Variant::Normal);
    let stage1_dys = eval(&b, &corpus, Variant::Dys);
    let start = Instant::now();
    stage2_finetune(&mut b, &corpus, &cfg, seed).unwrap();
    let train_time = stage1_time + start.elapsed();
    let stage2_normal = eval(&b, &corpus, Variant::Normal);
    let stage2_dys = eval(&b, &corpus, Variant::Dys);

    let mut ablation = ModelConfig::default();
    ablation.waitk.alpha = 0.0;
    let mut b0 = init(&ablation);
    stage1_train(&mut b0, &corpus, &cfg, seed).unwrap();
    let ablation_normal = eval(&b0, &corpus, Variant::Normal);

    let run = SeedRun {
        seed,
        stage1_normal,
        stage1_dys,
        stage2_normal,
        stage2_dys,
        ablation_normal,
        train_time,
        max_frames: corpus.utterances.iter().map(|u| u.frames()).max().unwrap_or(0),
    };
    let ce = |r: &EvalReport, k| r.code_score(k).unwrap().ce;
    eprintln!(
        "  seed {seed}: CE k1 {:.4} k10 {:.4} k20 {:.4}, alpha=0 k1 {:.4}; dys TER {:.4} -> {:.4}; \
         normal TER {:.4} -> {:.4}; trained in {:.0} s",
        ce(&run.stage1_normal, 1),
        ce(&run.stage1_normal, 10),
        ce(&run.stage1_normal, 20),
        ce(&run.ablation_normal, 1),
        run.stage1_dys.token_error_rate,
        run.stage2_dys.token_error_rate,
        run.stage1_normal.token_error_rate,
        run.stage2_normal.token_error_rate,
        run.train_time.as_secs_f64()
    );
    run
}

/// One-sided sign-test p-value for `wins` successes out of `n` at even odds.
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|w| choose(n, w)).sum::<f64>() / 2f64.powi(n as i32)
}

fn receptive_field(runs: &[SeedRun]) -> Verdict {
    let ce = |r: &EvalReport, k| r.code_score(k).unwrap().ce;
    let n = runs.len();
    let w1_10 = runs.iter().filter(|r| ce(&r.stage1_normal, 10) <= ce(&r.stage1_normal, 1)).count();
    let w10_20 = runs.iter().filter(|r| ce(&r.stage1_normal, 20) <= ce(&r.stage1_normal, 10)).count();
    let (p1, p2) = (sign_test_p(w1_10, n), sign_test_p(w10_20, n));
    let kd_wins = runs
        .iter()
        .filter(|r| ce(&r.stage1_normal, 1) < ce(&r.ablation_normal, 1))
        .count();
    let trend = p1 <= 0.05 && p2 <= 0.05;
    let kd = kd_wins * 5 >= 4 * n;
    verdict(
        trend && kd,
        format!(
            "CE(10) <= CE(1) in {w1_10}/{n} seeds (p {p1:.3}), CE(20) <= CE(10) in {w10_20}/{n} (p {p2:.3}); \
             k=1 CE with KD below alpha=0 in {kd_wins}/{n} seeds (need 4/5)"
        ),
    )
}

fn two_stage(runs: &[SeedRun]) -> Verdict {
    let n = runs.len();
    let improved = runs
        .iter()
        .filter(|r| r.stage2_dys.token_error_rate < r.stage1_dys.token_error_rate)
        .count();
    let worst_drop = runs
        .iter()
        .map(|r| {
            let before = 1.0 - r.stage1_normal.token_error_rate;
            let after = 1.0 - r.stage2_normal.token_error_rate;
            (before - after) / before
        })
        .fold(f64::NEG_INFINITY, f64::max);
    verdict(
        improved * 5 >= 4 * n && worst_drop < 0.05,
        format!(
            "dys TER lower after stage 2 in {improved}/{n} seeds (need 4/5); worst relative drop in normal token accuracy {:.2}% (< 5%)",
            100.0 * worst_drop
        ),
    )
}

fn smoke(run: &SeedRun) -> Verdict {
    let acc = run.stage2_dys.code_score(10).unwrap().accuracy;
    let ter = run.stage2_dys.token_error_rate;
    let secs = run.train_time.as_secs_f64();
    verdict(
        secs < 600.0 && acc >= 0.90 && ter <= 0.15 && run.max_frames <= 40,
        format!(
            "seed {}: both stages in {secs:.0} s (< 600 s), held-out dys next-code accuracy at k=10 {:.2}% (>= 90%), \
             TER {ter:.3} (<= 0.15), longest utterance {} frames (<= 40)",
            run.seed,
            100.0 * acc,
            run.max_frames
        ),
    )
}

// ----- 10: adaptor presets -------------------------------------------------------------

fn adaptor_out(b: &ModelBundle, set: &ParamSet, apt: &Adaptor, x: &Tensor) -> Tensor {
    let hyp = greedy_decode(&b.transducer, set, &b.transducer.encode_offline(set, x).unwrap());
    let mut g = Graph::new();
    let p = set.bind(&mut g, |_| false);
    let xv = g.constant(x.clone());
    let h = b.transducer.encode(&mut g, &p, xv).unwrap();
    let lat = b.transducer.lattice(&mut g, &p, h, &hyp.tokens).unwrap();
    let out = apt.forward(&mut g, &p, &lat, &hyp.path).unwrap();
    g.value(out).clone()
}

fn ablation_presets() -> Verdict {
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let b = toy_bundle(100 + seed);
        let x = input(seed, 6);
        let gated = b.adaptor.clone();
        let with = |preset| Adaptor { preset, ..gated.clone() };
        let lam_id = gated.lambda_logit;

        // explicit only: lambda saturated at 1
        let mut s = b.set.clone();
        s.get_mut(lam_id).data_mut()[0] = 800.0;
        if adaptor_out(&b, &s, &gated, &x) != adaptor_out(&b, &s, &with(AdaptorPreset::Explicit), &x) {
            failures.push("explicit");
        }
        // implicit only: lambda saturated at 0, no gate
        s.get_mut(lam_id).data_mut()[0] = -800.0;
        if adaptor_out(&b, &s, &with(AdaptorPreset::Fused), &x) != adaptor_out(&b, &s, &with(AdaptorPreset::Implicit), &x) {
            failures.push("implicit");
        }
        // fusion without gate: gate fully open, value branch the identity
        let mut s = b.set.clone();
        s.get_mut(gated.gate.w).data_mut().fill(0.0);
        s.get_mut(gated.gate.b.unwrap()).data_mut().fill(40.0);
        *s.get_mut(gated.value.w) = Tensor::identity(gated.dim);
        s.get_mut(gated.value.b.unwrap()).data_mut().fill(0.0);
        if adaptor_out(&b, &s, &gated, &x) != adaptor_out(&b, &s, &with(AdaptorPreset::Fused), &x) {
            failures.push("fused");
        }
        // fusion with gate, zero value branch: lambda times the explicit path
        let mut s = b.set.clone();
        s.get_mut(gated.value.w).data_mut().fill(0.0);
        s.get_mut(gated.value.b.unwrap()).data_mut().fill(0.0);
        let lam = gated.lambda(&s);
        let explicit: Vec<f64> = adaptor_out(&b, &s, &with(AdaptorPreset::Explicit), &x)
            .data()
            .iter()
            .map(|v| lam * v)
            .collect();
        if adaptor_out(&b, &s, &gated, &x).data() != explicit.as_slice() {
            failures.push("gated");
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "explicit, implicit, fused and gated presets reduce exactly on 10 toys".to_string()
        } else {
            format!("reductions failed: {failures:?}")
        },
    )
}

// ---------------------------------------------------------------------------------------

fn selected() -> Vec<usize> {
    match std::env::var("SDSR_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=10).collect(),
    }
}

fn report(n: usize, name: &str, v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {tag}  {name}: {}", v.detail);
}

fn main() -> ExitCode {
    // the libtest harness passes flags like --list or filters; ignore them
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let want = selected();
    let mut all_pass = true;
    let mut record = |n: usize, name: &str, v: Verdict| {
        report(n, name, &v);
        all_pass &= v.pass;
    };
    let quick: [(usize, &str, fn() -> Verdict); 6] = [
        (1, "transducer loss oracle", transducer_oracle),
        (2, "gradient suite", gradients),
        (3, "wait-k causality", causality),
        (4, "distillation contract", kd_contract),
        (5, "streaming equivalence", streaming_equivalence),
        (6, "latency trend", latency_trend),
    ];
    for (n, name, f) in quick {
        if want.contains(&n) {
            record(n, name, f());
        }
    }
    if want.iter().any(|n| (7..=9).contains(n)) {
        let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| train_seed(s)).collect();
        if want.contains(&7) {
            record(7, "receptive-field trend", receptive_field(&runs));
        }
        if want.contains(&8) {
            record(8, "two-stage trend", two_stage(&runs));
        }
        if want.contains(&9) {
            record(9, "end-to-end smoke", smoke(&runs[0]));
        }
    }
    if want.contains(&10) {
        record(10, "adaptor ablation presets", ablation_presets());
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
