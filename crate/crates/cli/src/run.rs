//! The `stream` subcommand and the run directory it writes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sdsr::model::ModelBundle;
use sdsr::numerics::{ParamSet, Tensor};
use sdsr::pipeline::{run_streaming, ClockMode, LatencyReport, PipelineConfig, SENTENCE_LEVEL};
use sdsr::training::{token_error_rate, Corpus};
use sdsr::RunConfig;

pub const RUN_JSON: &str = "run.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CODES_TXT: &str = "codes.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Sentence,
}

/// A wait-k lag or the sentence-level preset. Lags sort before the preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KChoice {
    Wait(usize),
    Preset(Preset),
}

impl KChoice {
    pub fn lag(self) -> usize {
        match self {
            KChoice::Wait(k) => k,
            KChoice::Preset(Preset::Sentence) => SENTENCE_LEVEL,
        }
    }
}

impl FromStr for KChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "sentence" {
            return Ok(KChoice::Preset(Preset::Sentence));
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(KChoice::Wait(k)),
            _ => Err(format!("expected a lag >= 1 or `sentence`, got {s:?}")),
        }
    }
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Wait(k) => write!(f, "{k}"),
            KChoice::Preset(Preset::Sentence) => f.write_str("sentence"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum RunInput {
    Corpus { dir: PathBuf, id: String },
    File(PathBuf),
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub k: KChoice,
    pub seed: u64,
    pub chunk_size: usize,
    pub clock: ClockMode,
    pub input: String,
    pub frames: usize,
    /// Recognised tokens.
    pub tokens: Vec<usize>,
    /// Fraction of emitted codes equal to the reference; absent without one.
    pub accuracy: Option<f64>,
    pub token_error_rate: Option<f64>,
}

struct Loaded {
    name: String,
    x: Tensor,
    reference: Option<(Vec<usize>, Vec<usize>)>,
}

fn load_input(input: &RunInput) -> Result<Loaded> {
    match input {
        RunInput::Corpus { dir, id } => {
            let corpus = Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
            let utt = corpus
                .get(id)
                .ok_or_else(|| sdsr::Error::Config(format!("no utterance {id:?} in {}", dir.display())))?;
            Ok(Loaded {
                name: id.clone(),
                x: utt.x.clone(),
                reference: Some((utt.tokens.clone(), utt.codes.clone())),
            })
        }
        RunInput::File(path) => {
            let set = ParamSet::load(path).with_context(|| format!("loading {}", path.display()))?;
            let x = set.by_name("x").cloned().ok_or_else(|| sdsr::Error::Format {
                path: path.clone(),
                detail: "missing tensor x".into(),
            })?;
            Ok(Loaded {
                name: path.display().to_string(),
                x,
                reference: None,
            })
        }
    }
}

pub fn stream_cmd(
    cfg: &RunConfig,
    pipe: &PipelineConfig,
    checkpoint: &Path,
    input: &RunInput,
    k: KChoice,
    out: &Path,
) -> Result<()> {
    let bundle = ModelBundle::load(&cfg.model, checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let loaded = load_input(input)?;
    let outcome = run_streaming(&bundle, &loaded.x, k.lag(), pipe)?;
    let (accuracy, ter) = match &loaded.reference {
        Some((tokens, codes)) => {
            let hits = outcome.codes.iter().zip(codes).filter(|(a, b)| a == b).count();
            (
                Some(hits as f64 / codes.len().max(1) as f64),
                Some(token_error_rate(&outcome.tokens, tokens)),
            )
        }
        None => (None, None),
    };
    let record = RunRecord {
        k,
        seed: cfg.seed,
        chunk_size: pipe.chunk_size,
        clock: pipe.clock,
        input: loaded.name,
        frames: loaded.x.rows(),
        tokens: outcome.tokens.clone(),
        accuracy,
        token_error_rate: ter,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(RUN_JSON), &record)?;
    write_json(&out.join(REPORT_JSON), &outcome.report)?;
    write_report_csv(&out.join(REPORT_CSV), &outcome.report)?;
    let codes: String = outcome.codes.iter().map(|c| format!("{c}\n")).collect();
    fs::write(out.join(CODES_TXT), codes)?;
    println!(
        "k={k}: {} codes in {} chunks, first response {:.3} s, rtf {:.3}",
        outcome.codes.len(),
        outcome.chunks.len(),
        outcome.report.first_response_s,
        outcome.report.rtf
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// One header row and one data row; per-stage timings become
/// `<stage>_total_s` and `<stage>_per_frame_s` columns.
pub fn write_report_csv(path: &Path, report: &LatencyReport) -> Result<()> {
    let mut header = vec![
        "first_response_s".to_string(),
        "rtf".into(),
        "params".into(),
        "flops_per_frame".into(),
    ];
    let mut row = vec![
        report.first_response_s.to_string(),
        report.rtf.to_string(),
        report.params.to_string(),
        report.flops_per_frame.to_string(),
    ];
    for t in &report.per_stage {
        let name = serde_json::to_value(t.stage)?;
        let name = name.as_str().unwrap_or_default();
        header.push(format!("{name}_total_s"));
        header.push(format!("{name}_per_frame_s"));
        row.push(t.total_s.to_string());
        row.push(t.per_frame_s.to_string());
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(&header)?;
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

pub fn read_run(dir: &Path) -> Result<(RunRecord, LatencyReport)> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        fs::read(&path).with_context(|| format!("reading {}", path.display()))
    };
    let record = serde_json::from_slice(&read(RUN_JSON)?).with_context(|| format!("parsing {RUN_JSON} in {}", dir.display()))?;
    let report =
        serde_json::from_slice(&read(REPORT_JSON)?).with_context(|| format!("parsing {REPORT_JSON} in {}", dir.display()))?;
    Ok((record, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_choice_parses_and_orders_lags_before_sentence() {
        let parse = |s: &str| s.parse::<KChoice>();
        assert_eq!(parse("10"), Ok(KChoice::Wait(10)));
        assert_eq!(parse("sentence"), Ok(KChoice::Preset(Preset::Sentence)));
        assert!(parse("0").is_err());
        assert!(parse("ten").is_err());
        let mut ks = [parse("sentence").unwrap(), KChoice::Wait(20), KChoice::Wait(1)];
        ks.sort();
        assert_eq!(ks.iter().map(ToString::to_string).collect::<Vec<_>>(), ["1", "20", "sentence"]);
        assert_eq!(ks[2].lag(), SENTENCE_LEVEL);
    }

    #[test]
    fn k_choice_json_is_a_number_or_the_preset_name() {
        assert_eq!(serde_json::to_string(&KChoice::Wait(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&KChoice::Preset(Preset::Sentence)).unwrap(), "\"sentence\"");
        let back: KChoice = serde_json::from_str("\"sentence\"").unwrap();
        assert_eq!(back, KChoice::Preset(Preset::Sentence));
    }
}
