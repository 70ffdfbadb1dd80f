//! Compose and alignment objectives and their exact gradients.
//!
//! Both objectives map a reference embedding to a pseudo token, place it in a
//! prompt, encode the prompt with the frozen text encoder and score it against
//! image embeddings with symmetric InfoNCE:
//!
//! * compose: `a photo of [*] , <caption>` against the target image;
//! * align:   `a photo of [*]` against the reference image.
//!
//! Gradients run back through L2 normalization, the text encoder's slot VJP and
//! the mapping network. Nothing upstream of the pseudo token is trainable.

use serde::{Deserialize, Serialize};

use super::contrastive::contrastive_pair_loss;
use super::mapping::{map_backward, map_forward_batch, MapCache, MappingGrads, MappingParams};
use crate::encoders::{Encoders, PromptSequence, Template, TextForward};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::ptc::PseudoTriplet;
use crate::store::{normalize_slice, Embedding};

/// Which loss terms are active; switching one off gives the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub compose: bool,
    pub align: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossTerms {
    pub const FULL: Self = Self {
        compose: true,
        align: true,
    };
    pub const WITHOUT_COMPOSE: Self = Self {
        compose: false,
        align: true,
    };
    pub const WITHOUT_ALIGN: Self = Self {
        compose: true,
        align: false,
    };
}

/// Image side paired with the caption-free prompt in the alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignTarget {
    #[default]
    Reference,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub terms: LossTerms,
    pub align_target: AlignTarget,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: 100.0,
            terms: LossTerms::FULL,
            align_target: AlignTarget::Reference,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_compose: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub compose_t2i: f64,
    pub compose_i2t: f64,
    pub align_t2i: f64,
    pub align_i2t: f64,
}

/// One prompt path (compose or align) after the forward pass.
#[derive(Clone, Debug)]
pub struct PathCache {
    prompts: Vec<PromptSequence>,
    text: Vec<TextForward>,
    /// Normalized sentence embeddings, `m × d`.
    pub text_hat: Matrix,
    text_norms: Vec<f64>,
    /// Normalized image embeddings, `m × d`.
    pub image_hat: Matrix,
    /// ∂L/∂(normalized sentence embeddings).
    d_text_hat: Matrix,
    pub t2i: f64,
    pub i2t: f64,
}

impl PathCache {
    pub fn loss(&self) -> f64 {
        self.t2i + self.i2t
    }

    /// ∂L/∂(pseudo tokens), one row per batch element.
    pub fn token_grads(&self, encoders: &Encoders) -> Result<Matrix> {
        let m = self.prompts.len();
        let mut out = Matrix::zeros(m, encoders.token_dim());
        for i in 0..m {
            let t_hat = self.text_hat.row(i);
            let g = self.d_text_hat.row(i);
            let proj = dot(t_hat, g);
            let inv = 1.0 / self.text_norms[i];
            let d_text: Vec<f64> = g.iter().zip(t_hat).map(|(gk, tk)| (gk - tk * proj) * inv).collect();
            let d_slot = encoders.text.slot_vjp(&self.text[i], &self.prompts[i], &d_text)?;
            out.row_mut(i).copy_from_slice(&d_slot);
        }
        Ok(out)
    }
}

/// Everything the backward pass needs; tied to the parameter generation that
/// produced it.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub map: MapCache,
    pub compose: Option<PathCache>,
    pub align: Option<PathCache>,
}

fn normalized_matrix(rows: impl Iterator<Item = Vec<f64>>, what: &'static str) -> Result<(Matrix, Vec<f64>)> {
    let mut data = Vec::new();
    let mut norms = Vec::new();
    for r in rows {
        let n = norm(&r);
        let u = normalize_slice(&r).map_err(|_| Error::ZeroNorm(what))?;
        norms.push(n);
        data.push(u);
    }
    Ok((Matrix::from_rows(&data)?, norms))
}

fn run_path(
    tokens: &Matrix,
    templates: &[Template],
    images: &[&Embedding],
    encoders: &Encoders,
    tau: f64,
) -> Result<PathCache> {
    let m = tokens.rows();
    let mut prompts = Vec::with_capacity(m);
    let mut text = Vec::with_capacity(m);
    for (i, template) in templates.iter().enumerate() {
        let p = encoders.prompt(template, Some(tokens.row(i)))?;
        text.push(encoders.text.forward_detailed(&p)?);
        prompts.push(p);
    }
    let (text_hat, text_norms) = normalized_matrix(text.iter().map(|f| f.output.clone()), "prompt sentence embedding")?;
    let (image_hat, _) = normalized_matrix(images.iter().map(|e| e.values().to_vec()), "image embedding")?;
    if image_hat.cols() != text_hat.cols() {
        return Err(Error::DimensionMismatch {
            expected: text_hat.cols(),
            got: image_hat.cols(),
            context: "image vs sentence embedding",
        });
    }
    let t2i = contrastive_pair_loss(&text_hat, &image_hat, tau)?;
    let i2t = contrastive_pair_loss(&image_hat, &text_hat, tau)?;
    let mut d_text_hat = t2i.grad_a;
    for (a, b) in d_text_hat.as_mut_slice().iter_mut().zip(i2t.grad_b.as_slice()) {
        *a += b;
    }
    Ok(PathCache {
        prompts,
        text,
        text_hat,
        text_norms,
        image_hat,
        d_text_hat,
        t2i: t2i.loss,
        i2t: i2t.loss,
    })
}

fn check_batch(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: m });
    }
    Ok(())
}

fn stack(rows: impl Iterator<Item = Vec<f64>>) -> Result<Matrix> {
    Matrix::from_rows(&rows.collect::<Vec<_>>())
}

/// Forward pass over a triplet batch for the active terms.
pub fn forward(
    params: &MappingParams,
    triplets: &[PseudoTriplet],
    encoders: &Encoders,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, ForwardCache)> {
    check_batch(triplets.len())?;
    let refs = stack(triplets.iter().map(|t| t.reference.values().to_vec()))?;
    let (tokens, map) = map_forward_batch(params, &refs)?;

    let compose = if cfg.terms.compose {
        let templates: Vec<Template> = triplets
            .iter()
            .map(|t| Template::Compose {
                caption: t.caption_tokens.clone(),
            })
            .collect();
        let targets: Vec<&Embedding> = triplets.iter().map(|t| &t.target).collect();
        Some(run_path(&tokens, &templates, &targets, encoders, cfg.tau)?)
    } else {
        None
    };
    let align = if cfg.terms.align {
        let templates = vec![Template::Global; triplets.len()];
        let images: Vec<&Embedding> = triplets
            .iter()
            .map(|t| match cfg.align_target {
                AlignTarget::Reference => &t.reference,
                AlignTarget::Target => &t.target,
            })
            .collect();
        Some(run_path(&tokens, &templates, &images, encoders, cfg.tau)?)
    } else {
        None
    };

    let mut b = LossBreakdown::default();
    if let Some(c) = &compose {
        b.compose_t2i = c.t2i;
        b.compose_i2t = c.i2t;
        b.l_compose = c.loss();
    }
    if let Some(a) = &align {
        b.align_t2i = a.t2i;
        b.align_i2t = a.i2t;
        b.l_align = a.loss();
    }
    b.l_total = b.l_compose + b.l_align;
    Ok((b, ForwardCache { map, compose, align }))
}

/// Parameter gradients summed over the active paths.
pub fn backward(params: &MappingParams, cache: &ForwardCache, encoders: &Encoders) -> Result<MappingGrads> {
    if cache.map.generation() != params.generation() {
        return Err(Error::StaleCache {
            cache: cache.map.generation(),
            params: params.generation(),
        });
    }
    let mut d_tokens = Matrix::zeros(cache.map.batch_size(), params.output_dim());
    for path in [&cache.compose, &cache.align].into_iter().flatten() {
        let g = path.token_grads(encoders)?;
        for (a, b) in d_tokens.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    }
    map_backward(params, &cache.map, &d_tokens)
}

pub fn total_loss_and_grads(
    params: &MappingParams,
    triplets: &[PseudoTriplet],
    encoders: &Encoders,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, MappingGrads)> {
    let (loss, cache) = forward(params, triplets, encoders, cfg)?;
    let grads = backward(params, &cache, encoders)?;
    Ok((loss, grads))
}

/// Compose loss and its gradient w.r.t. each pseudo token.
pub fn compose_loss(
    params: &MappingParams,
    triplets: &[PseudoTriplet],
    encoders: &Encoders,
    tau: f64,
) -> Result<(f64, Matrix)> {
    let cfg = ObjectiveConfig {
        tau,
        terms: LossTerms::WITHOUT_ALIGN,
        align_target: AlignTarget::Reference,
    };
    let (loss, cache) = forward(params, triplets, encoders, &cfg)?;
    let path = cache.compose.expect("compose path is active");
    Ok((loss.l_compose, path.token_grads(encoders)?))
}

/// Alignment loss over bare reference embeddings (captions are not used) and
/// its gradient w.r.t. each pseudo token.
pub fn align_loss(
    params: &MappingParams,
    references: &[Embedding],
    encoders: &Encoders,
    tau: f64,
) -> Result<(f64, Matrix)> {
    check_batch(references.len())?;
    let refs = stack(references.iter().map(|e| e.values().to_vec()))?;
    let (tokens, _) = map_forward_batch(params, &refs)?;
    let templates = vec![Template::Global; references.len()];
    let images: Vec<&Embedding> = references.iter().collect();
    let path = run_path(&tokens, &templates, &images, encoders, tau)?;
    Ok((path.loss(), path.token_grads(encoders)?))
}

/// Loss of the active terms only; used by finite-difference checks.
pub fn loss_only(
    params: &MappingParams,
    triplets: &[PseudoTriplet],
    encoders: &Encoders,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    forward(params, triplets, encoders, cfg).map(|(l, _)| l)
}
