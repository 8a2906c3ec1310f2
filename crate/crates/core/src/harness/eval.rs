use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::decoder::{decode_next_frame, sample_frame, DecodeConfig};
use crate::error::{ItcError, Result};
use crate::frame::{FrameTokens, PredictionGrid};
use crate::gridworld::Symbol;
use crate::harness::predictor::FramePredictor;

/// How a prediction grid becomes a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    /// Independent per-position sampling.
    BaselineSample,
    /// Transport-based correspondence decoding.
    Itc,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 2] = [DecoderVariant::BaselineSample, DecoderVariant::Itc];

    pub fn label(self) -> &'static str {
        match self {
            DecoderVariant::BaselineSample => "baseline-sample",
            DecoderVariant::Itc => "itc",
        }
    }

    /// Decodes with `cfg.sampling` and `cfg.rng_seed`.
    pub fn decode(self, pred: &PredictionGrid, prev: &FrameTokens, cfg: &DecodeConfig) -> Result<FrameTokens> {
        match self {
            DecoderVariant::BaselineSample => sample_frame(pred, cfg.sampling, cfg.rng_seed),
            DecoderVariant::Itc => decode_next_frame(pred, prev, cfg),
        }
    }
}

impl std::fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for DecoderVariant {
    type Err = ItcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-sample" | "baseline" => Ok(DecoderVariant::BaselineSample),
            "itc" => Ok(DecoderVariant::Itc),
            other => Err(ItcError::Config(format!("unknown decoder variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: DecoderVariant,
    pub transitions: usize,
    pub creature_transitions: usize,
    pub overall_accuracy: f64,
    pub accuracy_with_creatures: f64,
    pub accuracy_without_creatures: f64,
    pub token_error_rate: f64,
    pub duplication: usize,
    pub disappearance: usize,
    /// Frames imagined per rollout; zero for one-step evaluation.
    pub rollout_length: usize,
}

/// Scored decode of one held-out transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionOutcome {
    pub episode: usize,
    pub t: usize,
    pub has_creature: bool,
    pub exact: bool,
    pub token_errors: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outcomes: Vec<TransitionOutcome>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    n: usize,
    exact: usize,
    n_creature: usize,
    exact_creature: usize,
    token_errors: usize,
    tokens: usize,
}

impl Tally {
    fn add(&mut self, o: &TransitionOutcome) {
        self.n += 1;
        self.exact += o.exact as usize;
        if o.has_creature {
            self.n_creature += 1;
            self.exact_creature += o.exact as usize;
        }
        self.token_errors += o.token_errors;
        self.tokens += o.tokens;
    }

    fn report(&self, variant: DecoderVariant) -> EvalReport {
        EvalReport {
            variant,
            transitions: self.n,
            creature_transitions: self.n_creature,
            overall_accuracy: ratio(self.exact, self.n),
            accuracy_with_creatures: ratio(self.exact_creature, self.n_creature),
            accuracy_without_creatures: ratio(self.exact - self.exact_creature, self.n - self.n_creature),
            token_error_rate: ratio(self.token_errors, self.tokens),
            duplication: 0,
            disappearance: 0,
            rollout_length: 0,
        }
    }
}

impl EvalReport {
    /// Recomputes a one-step report from stored outcomes.
    pub fn recount(variant: DecoderVariant, outcomes: &[TransitionOutcome]) -> Self {
        let n = outcomes.len();
        let exact = outcomes.iter().filter(|o| o.exact).count();
        let with: Vec<_> = outcomes.iter().filter(|o| o.has_creature).collect();
        let exact_with = with.iter().filter(|o| o.exact).count();
        let without = n - with.len();
        let errors: usize = outcomes.iter().map(|o| o.token_errors).sum();
        let tokens: usize = outcomes.iter().map(|o| o.tokens).sum();
        EvalReport {
            variant,
            transitions: n,
            creature_transitions: with.len(),
            overall_accuracy: ratio(exact, n),
            accuracy_with_creatures: ratio(exact_with, with.len()),
            accuracy_without_creatures: ratio(exact - exact_with, without),
            token_error_rate: ratio(errors, tokens),
            duplication: 0,
            disappearance: 0,
            rollout_length: 0,
        }
    }

    /// Mean of reports for one variant over several evaluation seeds.
    pub fn average(reports: &[EvalReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| ItcError::Config("no reports to average".into()))?;
        if reports.iter().any(|r| r.variant != first.variant) {
            return Err(ItcError::Config("cannot average reports of different variants".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            overall_accuracy: mean(|r| r.overall_accuracy),
            accuracy_with_creatures: mean(|r| r.accuracy_with_creatures),
            accuracy_without_creatures: mean(|r| r.accuracy_without_creatures),
            token_error_rate: mean(|r| r.token_error_rate),
            duplication: reports.iter().map(|r| r.duplication).sum(),
            disappearance: reports.iter().map(|r| r.disappearance).sum(),
            ..first.clone()
        })
    }
}

/// Decode seed of transition `t` in episode `episode`.
pub fn transition_seed(seed: u64, episode: usize, t: usize) -> u64 {
    let mut z = seed ^ (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (t as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn count_symbol(frame: &FrameTokens, symbols: &[Symbol], target: Symbol) -> usize {
    frame
        .tokens()
        .iter()
        .filter(|&&t| symbols.get(t as usize) == Some(&target))
        .count()
}

fn check_codebook(predictor: &dyn FramePredictor, dataset: &Dataset) -> Result<()> {
    if let Some(h) = predictor.codebook_hash() {
        if h != dataset.header.codebook_hash {
            return Err(ItcError::CodebookMismatch {
                model: h.to_string(),
                dataset: dataset.header.codebook_hash.clone(),
            });
        }
    }
    if predictor.vocab() != dataset.header.codebook_size || predictor.shape() != dataset.shape() {
        return Err(ItcError::Geometry(format!(
            "predictor has {} tokens on {:?}, dataset {} on {:?}",
            predictor.vocab(),
            predictor.shape(),
            dataset.header.codebook_size,
            dataset.shape()
        )));
    }
    Ok(())
}

/// Scores every variant on the held-out split using one shared set of
/// predictions and the same per-transition decode seeds.
pub fn eval_variants(
    predictor: &dyn FramePredictor,
    variants: &[DecoderVariant],
    dataset: &Dataset,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Evaluation>> {
    check_codebook(predictor, dataset)?;
    let mut tallies = vec![Tally::default(); variants.len()];
    let mut outcomes = vec![Vec::new(); variants.len()];
    for ep in dataset.holdout_episodes() {
        let preds = predictor.predict_episode(ep)?;
        if preds.len() != ep.len() {
            return Err(ItcError::Shape {
                expected: format!("{} predictions", ep.len()),
                got: preds.len().to_string(),
            });
        }
        for (t, pred) in preds.iter().enumerate() {
            let cfg = DecodeConfig {
                rng_seed: transition_seed(seed, ep.index, t),
                ..decode.clone()
            };
            let truth = &ep.frames[t + 1];
            for (v, &variant) in variants.iter().enumerate() {
                let out = variant.decode(pred, &ep.frames[t], &cfg)?;
                let token_errors = out.tokens().iter().zip(truth.tokens()).filter(|(a, b)| a != b).count();
                let o = TransitionOutcome {
                    episode: ep.index,
                    t,
                    has_creature: ep.has_creature[t],
                    exact: token_errors == 0,
                    token_errors,
                    tokens: truth.len(),
                };
                tallies[v].add(&o);
                outcomes[v].push(o);
            }
        }
    }
    Ok(variants
        .iter()
        .zip(tallies)
        .zip(outcomes)
        .map(|((&variant, tally), outcomes)| Evaluation {
            report: tally.report(variant),
            outcomes,
        })
        .collect())
}

/// One-step accuracy on the held-out split.
pub fn eval_accuracy(
    predictor: &dyn FramePredictor,
    variant: DecoderVariant,
    dataset: &Dataset,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<Evaluation> {
    let mut all = eval_variants(predictor, &[variant], dataset, decode, seed)?;
    Ok(all.pop().expect("one variant"))
}
