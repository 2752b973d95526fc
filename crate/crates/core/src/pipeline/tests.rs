use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adaptor::{AdaptorConfig, AdaptorPreset};
use crate::layers::Linear;
use crate::model::ModelConfig;
use crate::numerics::ParamSet;
use crate::quantizer::{fit_codebook, QuantizerConfig};
use crate::transducer::{EncoderConfig, TransducerConfig};
use crate::waitk::WaitKConfig;

const FEATURES: usize = 5;
const DUR: f64 = 0.04;

fn toy_config() -> ModelConfig {
    ModelConfig {
        transducer: TransducerConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                model_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
                left_context: 64,
                right_context: 0,
            },
            pred_dim: 8,
            joint_dim: 8,
        },
        adaptor: AdaptorConfig {
            dim: 8,
            preset: AdaptorPreset::FusedGated,
            lambda_init: 0.5,
        },
        waitk: WaitKConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            ..WaitKConfig::default()
        },
    }
}

fn toy_bundle(seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = Tensor::randn(&[40, 3], 1.0, &mut rng);
    let cfg = QuantizerConfig {
        codes: 4,
        ..QuantizerConfig::default()
    };
    let codebook = fit_codebook(&points, &cfg, DUR, seed).unwrap();
    ModelBundle::init(&toy_config(), FEATURES, 6, codebook, seed).unwrap()
}

fn input(seed: u64, frames: usize) -> Tensor {
    Tensor::randn(&[frames, FEATURES], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xf00d))
}

fn logical(chunk_size: usize, costs: StageCosts) -> PipelineConfig {
    PipelineConfig {
        frame_duration: DUR,
        chunk_size,
        clock: ClockMode::Logical,
        costs,
    }
}

fn emits(events: &[Event]) -> Vec<(usize, usize, f64)> {
    events
        .iter()
        .filter_map(|e| match *e {
            Event::Emit {
                first_code, codes, at, ..
            } => Some((first_code, codes, at)),
            _ => None,
        })
        .collect()
}

#[test]
fn k1_first_chunk_follows_the_second_frame() {
    let b = toy_bundle(0);
    let out = run_streaming(&b, &input(0, 6), 1, &logical(1, StageCosts::zero())).unwrap();
    let first_emit = out.events.iter().position(|e| matches!(e, Event::Emit { .. })).unwrap();
    let arrivals = out.events[..first_emit]
        .iter()
        .filter(|e| matches!(e, Event::Arrival { .. }))
        .count();
    assert_eq!(arrivals, 2);
    assert_eq!(out.report.first_response_s, DUR);
    assert_eq!(out.report.rtf, 0.0);
}

#[test]
fn zero_cost_response_is_the_policy_wait() {
    let b = toy_bundle(1);
    for t in [1, 2, 5, 9] {
        let x = input(t as u64, t);
        for k in [1, 2, 4, t, t + 3, SENTENCE_LEVEL] {
            for chunk in [1, 3] {
                let out = run_streaming(&b, &x, k, &logical(chunk, StageCosts::zero())).unwrap();
                // the first chunk closes with code chunk - 1, or with the last code
                let last = (chunk - 1).min(t - 1);
                let expected = arrival(last.saturating_add(k).min(t - 1), DUR);
                assert_eq!(out.report.first_response_s, expected, "t {t} k {k} chunk {chunk}");
                let k_wait = k.min(t).saturating_sub(1) as f64 * DUR;
                assert!(out.report.first_response_s >= k_wait.min((t - 1) as f64 * DUR));
            }
        }
    }
}

#[test]
fn streaming_matches_offline_decoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..12u64 {
        let b = toy_bundle(trial % 3);
        let t = rng.random_range(1..30);
        let k = [1, 2, 3, 10, 20, SENTENCE_LEVEL][rng.random_range(0..6)];
        let chunk = rng.random_range(1..6);
        let x = input(trial, t);
        let out = run_streaming(&b, &x, k, &logical(chunk, StageCosts::default())).unwrap();
        let (codes, chunks) = offline_decode(&b, &x, k, chunk).unwrap();
        assert_eq!(out.codes, codes, "trial {trial}");
        assert_eq!(out.chunks, chunks, "trial {trial}");
        assert_eq!(out.tokens, b.front_end(&x).unwrap().hypothesis.tokens);
    }
}

#[test]
fn emissions_never_precede_the_policy() {
    let b = toy_bundle(2);
    let x = input(2, 17);
    for k in [1, 3, 8, 16, 17, SENTENCE_LEVEL] {
        for chunk in [1, 2, 5] {
            let out = run_streaming(&b, &x, k, &logical(chunk, StageCosts::default())).unwrap();
            let mut next = 0;
            for (first, n, at) in emits(&out.events) {
                assert_eq!(first, next);
                next += n;
                assert!(at >= arrival(policy_frame(first + n - 1, k, 17), DUR));
            }
            assert_eq!(next, 17);
        }
    }
}

#[test]
fn response_grows_with_k_and_rtf_does_not() {
    let b = toy_bundle(3);
    let x = input(3, 200);
    let cfg = logical(1, StageCosts::default());
    let reports: Vec<LatencyReport> = [1, 10, 20, SENTENCE_LEVEL]
        .iter()
        .map(|&k| run_streaming(&b, &x, k, &cfg).unwrap().report)
        .collect();
    for w in reports.windows(2) {
        assert!(w[0].first_response_s < w[1].first_response_s);
        assert!((w[0].rtf - w[1].rtf).abs() < 1e-12);
    }
    // 0.012 + 0.004 + 0.002 + 0.008 + 0.002 seconds per 0.04 s frame
    assert!((reports[0].rtf - 0.7).abs() < 1e-12);
    // k = 10 waits for frame 10, then runs every stage once
    assert!((reports[1].first_response_s - (10.0 * DUR + 0.028)).abs() < 1e-12);
}

#[test]
fn rtf_follows_the_charged_costs() {
    let b = toy_bundle(4);
    let x = input(4, 12);
    let half = StageCosts {
        encoder: 0.5 * DUR,
        ..StageCosts::zero()
    };
    let out = run_streaming(&b, &x, 3, &logical(2, half)).unwrap();
    assert!((out.report.rtf - 0.5).abs() < 1e-15);

    let base = run_streaming(&b, &x, 3, &logical(2, StageCosts::default())).unwrap().report;
    let doubled = run_streaming(&b, &x, 3, &logical(2, StageCosts::default().scaled(2.0)))
        .unwrap()
        .report;
    assert_eq!(doubled.rtf, 2.0 * base.rtf);
    for (s, d) in base.per_stage.iter().zip(&doubled.per_stage) {
        assert_eq!(d.total_s, 2.0 * s.total_s);
    }
    let total: f64 = base.per_stage.iter().map(|s| s.total_s).sum();
    assert!((total / (12.0 * DUR) - base.rtf).abs() < 1e-12);
    for s in &base.per_stage {
        assert_eq!(s.per_frame_s, s.total_s / 12.0);
    }
}

#[test]
fn wall_clock_runs_the_same_computation() {
    let b = toy_bundle(5);
    let x = input(5, 10);
    let wall = PipelineConfig {
        clock: ClockMode::Wall,
        ..logical(2, StageCosts::default())
    };
    let a = run_streaming(&b, &x, 2, &wall).unwrap();
    let l = run_streaming(&b, &x, 2, &logical(2, StageCosts::default())).unwrap();
    assert_eq!(a.codes, l.codes);
    assert!(a.report.rtf > 0.0);
    assert!(a.report.first_response_s >= 2.0 * DUR);
}

#[test]
fn logical_runs_are_reproducible() {
    let b = toy_bundle(6);
    let x = input(6, 15);
    let cfg = logical(3, StageCosts::default());
    let a = run_streaming(&b, &x, 4, &cfg).unwrap();
    let c = run_streaming(&b, &x, 4, &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&c.report).unwrap()
    );
    assert_eq!(a.events, c.events);
}

#[test]
fn session_misuse_is_rejected() {
    let b = toy_bundle(0);
    let cfg = logical(2, StageCosts::zero());
    let mut s = StreamSession::new(&b, 2, &cfg).unwrap();
    assert!(matches!(s.finish(), Err(Error::Contract(_))));
    assert!(matches!(s.report(), Err(Error::Contract(_))));
    assert!(matches!(s.push_frame(&[0.0; 3]), Err(Error::Dimension { .. })));
    s.push_frame(&[0.0; FEATURES]).unwrap();
    s.finish().unwrap();
    assert!(matches!(s.push_frame(&[0.0; FEATURES]), Err(Error::Contract(_))));
    assert!(matches!(s.finish(), Err(Error::Contract(_))));
    assert!(matches!(StreamSession::new(&b, 0, &cfg), Err(Error::Contract(_))));
    assert!(matches!(StreamSession::new(&b, 1, &logical(0, StageCosts::zero())), Err(Error::Config(_))));
}

#[test]
fn latency_from_a_hand_written_log() {
    let counts = Counts {
        params: 3,
        flops_per_frame: 8,
    };
    assert!(matches!(measure_latency(&[], DUR, counts), Err(Error::Contract(_))));
    let mut log = vec![
        Event::Arrival { frame: 0, at: 0.0 },
        Event::Work {
            stage: Stage::Encoder,
            units: 1,
            start: 0.0,
            cost: 0.01,
        },
        Event::Arrival { frame: 1, at: 0.04 },
        Event::Work {
            stage: Stage::Waitk,
            units: 2,
            start: 0.04,
            cost: 0.03,
        },
    ];
    assert!(matches!(measure_latency(&log, DUR, counts), Err(Error::Contract(_))));
    log.push(Event::Emit {
        chunk: 0,
        first_code: 0,
        codes: 2,
        at: 0.07,
    });
    let r = measure_latency(&log, DUR, counts).unwrap();
    assert_eq!(r.first_response_s, 0.07);
    assert!((r.rtf - 0.5).abs() < 1e-15);
    assert_eq!((r.params, r.flops_per_frame), (3, 8));
    assert_eq!(r.per_stage.len(), 5);
    assert_eq!(r.per_stage[Stage::Waitk as usize].per_frame_s, 0.015);
}

#[test]
fn report_json_field_names() {
    let b = toy_bundle(0);
    let out = run_streaming(&b, &input(0, 4), 1, &logical(2, StageCosts::default())).unwrap();
    let v = serde_json::to_value(&out.report).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["first_response_s", "flops_per_frame", "params", "per_stage", "rtf"]);
    assert_eq!(v["per_stage"][0]["stage"], "encoder");
    let stage = v["per_stage"][3].as_object().unwrap();
    assert!(stage.contains_key("total_s") && stage.contains_key("per_frame_s"));
    let back: LatencyReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, out.report);
}

#[test]
fn single_linear_layer_counts() {
    let mut set = ParamSet::new();
    let d = 7;
    let lin = Linear::init(&mut set, "x", d, d, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(set.scalar_count(), d * d);
    assert_eq!(2 * lin.macs(), 2 * d * d);
}

#[test]
fn toy_counts_by_hand() {
    let b = toy_bundle(0);
    // encoder, D = 8, ffn 16, each layer looking back 32 frames
    let input = 5 * 8;
    let dense = 4 * 8 * 8 + 2 * 8 * 16;
    let encoder = input + 2 * (dense + 2 * 33 * 8);
    // joint: two projections to 8 and an output over 6 labels; LSTM step
    let joint = 8 * 8 + 8 * 8 + 8 * 6;
    let predictor = 2 * 8 * 32;
    // adaptor from the 6-wide joint row and the encoder row, then the gate
    let adaptor = 6 * 8 + 8 * 8 + 2 * 8 * 8;
    // decoder: frame and code tokens through one block over 65 frames
    let decoder = 8 * 8 + 16 * 8 + 8 * 4 + 2 * dense + 2 * 8 * 65 + 2 * 8 * 130;
    let counts = count_params_flops(&b);
    assert_eq!(counts.flops_per_frame, 2 * (encoder + joint + predictor + adaptor + decoder));

    let per_module = b.param_counts();
    assert_eq!(counts.params, per_module.total());
    // everything but the codebook's two scalar settings
    assert_eq!(counts.params, b.set.scalar_count() - 2);
    assert_eq!(per_module.codebook, 4 * 3);
}

#[test]
fn clock_names_parse() {
    assert_eq!("wall".parse::<ClockMode>().unwrap(), ClockMode::Wall);
    assert_eq!("logical".parse::<ClockMode>().unwrap(), ClockMode::Logical);
    assert!(matches!("fast".parse::<ClockMode>(), Err(Error::Config(_))));
}
