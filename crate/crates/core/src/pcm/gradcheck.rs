//! Central-difference verification of the analytic mapping gradients.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mapping::{Activation, MappingParams};
use super::objective::{loss_only, total_loss_and_grads, ObjectiveConfig};
use crate::encoders::{Connective, Encoders, TextEncoderConfig, ToyTextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::rand_distr_lite::standard_normal;
use crate::ptc::{Provenance, PseudoTriplet};
use crate::rng::{stream_rng, Stream};
use crate::store::Embedding;

/// Relative error is `|a − n| / max(|a|, |n|, floor)` with
/// `floor = FLOOR_RATIO · max|a|`. Coordinates four orders of magnitude below the
/// largest gradient entry are then judged against the scale of the gradient,
/// since their central differences are dominated by round-off (`ε·|L|/h`).
pub const FLOOR_RATIO: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Check a random subset of this many coordinates (at least 200) instead of
    /// all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub floor: f64,
    pub h: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` at `params`.
pub fn compare_gradients<F>(
    params: &MappingParams,
    analytic: &[f64],
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&MappingParams) -> Result<f64>,
{
    let n = params.num_params();
    if analytic.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: analytic.len(),
            context: "analytic gradient",
        });
    }
    let coords: Vec<usize> = match cfg.max_coords {
        Some(k) if k.max(200) < n => {
            let mut rng = stream_rng(cfg.seed, Stream::Eval, 0x4744);
            let mut idx = sample(&mut rng, n, k.max(200)).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let floor = FLOOR_RATIO * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs())) + f64::MIN_POSITIVE;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        coords_checked: coords.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        floor,
        h: cfg.h,
        tolerance: cfg.tolerance,
        passed: false,
    };
    for &i in &coords {
        work.perturb(i, cfg.h);
        let plus = loss(&work)?;
        work.perturb(i, -2.0 * cfg.h);
        let minus = loss(&work)?;
        work.perturb(i, cfg.h);
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let rel = relative_error(analytic[i], numeric, floor);
        report.max_abs_err = report.max_abs_err.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

/// Checks the gradient of the configured objective (active terms only).
pub fn finite_diff_check(
    params: &MappingParams,
    triplets: &[PseudoTriplet],
    encoders: &Encoders,
    objective: &ObjectiveConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = total_loss_and_grads(params, triplets, encoders, objective)?;
    compare_gradients(
        params,
        &grads.flat(),
        |p| loss_only(p, triplets, encoders, objective).map(|l| l.l_total),
        cfg,
    )
}

/// Random but reproducible gradient-check instance.
#[derive(Clone, Debug)]
pub struct GradCheckProblem {
    pub params: MappingParams,
    pub encoders: Encoders,
    pub triplets: Vec<PseudoTriplet>,
}

impl GradCheckProblem {
    pub fn random(d: usize, token_dim: usize, m: usize, seed: u64) -> Result<Self> {
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let word_refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let vocab = Vocabulary::seeded(&word_refs, token_dim, seed)?;
        let text = ToyTextEncoder::seeded(TextEncoderConfig::new(token_dim, d, seed ^ 0x7465))?;
        let encoders = Encoders::new(vocab, text, Connective::Comma)?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let params = MappingParams::init(d, d, token_dim, Activation::Gelu, &mut rng)?;
        let word_ids: Vec<u32> = word_refs.iter().map(|w| encoders.vocab.id(w)).collect::<Result<_>>()?;
        let mut rng = stream_rng(seed, Stream::World, 0);
        let gaussian = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Embedding> {
            Embedding::new((0..d).map(|_| standard_normal(rng)).collect())
        };
        let triplets = (0..m)
            .map(|i| {
                let n_tokens = rng.gen_range(1..=4);
                let caption_tokens = (0..n_tokens)
                    .map(|_| word_ids[rng.gen_range(0..word_ids.len())])
                    .collect();
                Ok(PseudoTriplet {
                    reference: gaussian(&mut rng)?,
                    reference_id: format!("ref{i}"),
                    provenance: Provenance::SelfCrop,
                    caption_tokens,
                    caption_embedding: gaussian(&mut rng)?,
                    target: gaussian(&mut rng)?,
                    target_id: format!("img{i}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            encoders,
            triplets,
        })
    }

    pub fn check(&self, objective: &ObjectiveConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        finite_diff_check(&self.params, &self.triplets, &self.encoders, objective, cfg)
    }
}
