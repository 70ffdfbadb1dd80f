//! Pseudo-triplet construction.
//!
//! For a batch of image–caption pairs: pick a crop per image, score captions
//! against crops and originals, keep the pairs whose crop is *below* the batch
//! mean caption similarity while the original is *above* it, then replace some
//! references with the most similar other crop or other original.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::linalg::{dot, Matrix};
use crate::store::{normalize_slice, Embedding, StoreRecord};

pub type CropBox = Rect;

const MAX_CROP_ATTEMPTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    pub min: u32,
    pub max: u32,
    /// Box centers must fall outside the middle third of each axis.
    pub exclude_center: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            min: 32,
            max: 64,
            exclude_center: true,
        }
    }
}

impl CropConfig {
    pub fn new(min: u32, max: u32) -> Result<Self> {
        let c = Self {
            min,
            max,
            exclude_center: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::InvalidConfig(format!(
                "crop range {}..={} is empty",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// True when the box center lies strictly inside the central rectangle spanning
/// `(W/3, 2W/3) × (H/3, 2H/3)`.
pub fn center_in_exclusion_zone(bbox: &CropBox, width: u32, height: u32) -> bool {
    let (cx, cy) = bbox.center();
    let (w, h) = (f64::from(width), f64::from(height));
    cx > w / 3.0 && cx < 2.0 * w / 3.0 && cy > h / 3.0 && cy < 2.0 * h / 3.0
}

pub fn satisfies_crop_constraints(bbox: &CropBox, width: u32, height: u32, cfg: &CropConfig) -> bool {
    (cfg.min..=cfg.max).contains(&bbox.w)
        && (cfg.min..=cfg.max).contains(&bbox.h)
        && bbox.fits_within(width, height)
        && !(cfg.exclude_center && center_in_exclusion_zone(bbox, width, height))
}

/// Analytic feasibility: some box satisfying all constraints exists.
///
/// A box of width `w` can put its center at `w/2 ≤ W/3` (left of the zone) iff
/// `w ≤ 2W/3`, so the smallest box decides feasibility on each axis.
pub fn check_crop_feasible(width: u32, height: u32, cfg: &CropConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.min > width || cfg.min > height {
        return Err(Error::InfeasibleCrop(format!(
            "{width}x{height} image is smaller than crop_min={}",
            cfg.min
        )));
    }
    if cfg.exclude_center {
        let fits_x = 3 * u64::from(cfg.min) <= 2 * u64::from(width);
        let fits_y = 3 * u64::from(cfg.min) <= 2 * u64::from(height);
        if !fits_x && !fits_y {
            return Err(Error::InfeasibleCrop(format!(
                "every {}px box on a {width}x{height} image is centered in the excluded region",
                cfg.min
            )));
        }
    }
    Ok(())
}

/// Rejection-samples `(w, h, x, y)` uniformly and keeps the first draw that
/// satisfies the center-exclusion rule.
pub fn sample_crop_box<R: Rng + ?Sized>(width: u32, height: u32, rng: &mut R, cfg: &CropConfig) -> Result<CropBox> {
    check_crop_feasible(width, height, cfg)?;
    let max_w = cfg.max.min(width);
    let max_h = cfg.max.min(height);
    for _ in 0..MAX_CROP_ATTEMPTS {
        let w = rng.gen_range(cfg.min..=max_w);
        let h = rng.gen_range(cfg.min..=max_h);
        let x = rng.gen_range(0..=width - w);
        let y = rng.gen_range(0..=height - h);
        let bbox = CropBox { x, y, w, h };
        if !(cfg.exclude_center && center_in_exclusion_zone(&bbox, width, height)) {
            return Ok(bbox);
        }
    }
    Err(Error::InfeasibleCrop(format!(
        "no valid box after {MAX_CROP_ATTEMPTS} draws on {width}x{height}"
    )))
}

/// How caption–image similarities are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Raw dot products for text–image, cosine for image–image.
    #[default]
    Literal,
    /// Cosine everywhere.
    Cosine,
}

/// Batch similarity statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSim {
    pub t2vc: Vec<f64>,
    pub t2v: Vec<f64>,
    pub vc2vc: Matrix,
    pub v2v: Matrix,
    pub theta_t2vc: f64,
    pub theta_t2v: f64,
}

impl BatchSim {
    pub fn len(&self) -> usize {
        self.t2v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t2v.is_empty()
    }

    /// Builds statistics from precomputed vectors and matrices; thresholds are
    /// the vector means.
    pub fn from_parts(t2vc: Vec<f64>, t2v: Vec<f64>, vc2vc: Matrix, v2v: Matrix) -> Self {
        let theta_t2vc = mean(&t2vc);
        let theta_t2v = mean(&t2v);
        Self {
            t2vc,
            t2v,
            vc2vc,
            v2v,
            theta_t2vc,
            theta_t2v,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn normalized_rows(rows: &[Embedding], what: &'static str) -> Result<Matrix> {
    let normed = rows
        .iter()
        .map(|e| normalize_slice(e.values()).map_err(|_| Error::ZeroNorm(what)))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&normed)
}

pub fn compute_batch_sims(
    captions: &[Embedding],
    originals: &[Embedding],
    crops: &[Embedding],
    mode: SimMode,
) -> Result<BatchSim> {
    let m = captions.len();
    if m < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: m });
    }
    for (len, ctx) in [(originals.len(), "originals"), (crops.len(), "crops")] {
        if len != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: len,
                context: ctx,
            });
        }
    }
    let d = captions[0].dim();
    for e in captions.iter().chain(originals).chain(crops) {
        if e.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: e.dim(),
                context: "batch embedding",
            });
        }
    }
    let vn = normalized_rows(originals, "original image")?;
    let vcn = normalized_rows(crops, "cropped image")?;
    let (t2vc, t2v) = match mode {
        SimMode::Literal => (
            captions
                .iter()
                .zip(crops)
                .map(|(t, c)| dot(t.values(), c.values()))
                .collect(),
            captions
                .iter()
                .zip(originals)
                .map(|(t, v)| dot(t.values(), v.values()))
                .collect(),
        ),
        SimMode::Cosine => {
            let tn = normalized_rows(captions, "caption")?;
            (
                (0..m).map(|i| dot(tn.row(i), vcn.row(i))).collect(),
                (0..m).map(|i| dot(tn.row(i), vn.row(i))).collect(),
            )
        }
    };
    let vc2vc = vcn.mul_transposed(&vcn);
    let v2v = vn.mul_transposed(&vn);
    Ok(BatchSim::from_parts(t2vc, t2v, vc2vc, v2v))
}

/// Indices whose crop under-explains the caption while the original explains
/// it well: `t2vc[i] < Θ_t2vc` and `t2v[i] > Θ_t2v` (strict).
pub fn filter_triplets(sims: &BatchSim) -> Vec<usize> {
    (0..sims.len())
        .filter(|&i| sims.t2vc[i] < sims.theta_t2vc && sims.t2v[i] > sims.theta_t2v)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    SelfCrop,
    OtherCrop,
    OtherOriginal,
}

/// Probabilities of the two substitution branches; the remainder keeps the
/// image's own crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub other_crop: f64,
    pub other_original: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            other_crop: 0.25,
            other_original: 0.10,
        }
    }
}

impl MixtureConfig {
    pub fn self_crop(&self) -> f64 {
        1.0 - self.other_crop - self.other_original
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.other_crop)
            && (0.0..=1.0).contains(&self.other_original)
            && self.other_crop + self.other_original <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "mixture probabilities {} + {} must lie in [0, 1]",
                self.other_crop, self.other_original
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferencePick {
    pub provenance: Provenance,
    /// Batch index whose crop or original becomes the reference.
    pub source: usize,
}

/// Index of the row maximum excluding `i`; ties go to the lowest index.
fn argmax_excluding(row: &[f64], i: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if j != i && (best == usize::MAX || v > best_v) {
            best = j;
            best_v = v;
        }
    }
    best
}

/// Picks the reference for triplet `i` from a uniform draw `x ∈ [0, 1)`.
pub fn mine_reference(i: usize, sims: &BatchSim, x: f64, mix: &MixtureConfig) -> Result<ReferencePick> {
    let m = sims.len();
    if m < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: m });
    }
    if i >= m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: i,
            context: "triplet index",
        });
    }
    let pick = if x < mix.other_crop {
        ReferencePick {
            provenance: Provenance::OtherCrop,
            source: argmax_excluding(sims.vc2vc.row(i), i),
        }
    } else if x < mix.other_crop + mix.other_original {
        ReferencePick {
            provenance: Provenance::OtherOriginal,
            source: argmax_excluding(sims.v2v.row(i), i),
        }
    } else {
        ReferencePick {
            provenance: Provenance::SelfCrop,
            source: i,
        }
    };
    Ok(pick)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PtcConfig {
    pub crop: CropConfig,
    pub mixture: MixtureConfig,
    pub sim_mode: SimMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoTriplet {
    pub reference: Embedding,
    pub reference_id: String,
    pub provenance: Provenance,
    pub caption_tokens: Vec<u32>,
    pub caption_embedding: Embedding,
    pub target: Embedding,
    pub target_id: String,
}

/// Exported line of a triplet manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletManifestEntry {
    pub reference_id: String,
    pub provenance: Provenance,
    pub caption_tokens: Vec<u32>,
    pub target_id: String,
}

impl From<&PseudoTriplet> for TripletManifestEntry {
    fn from(t: &PseudoTriplet) -> Self {
        Self {
            reference_id: t.reference_id.clone(),
            provenance: t.provenance,
            caption_tokens: t.caption_tokens.clone(),
            target_id: t.target_id.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PtcStats {
    pub batch_size: usize,
    pub selected: usize,
    pub theta_t2vc: f64,
    pub theta_t2v: f64,
    pub self_crop: usize,
    pub other_crop: usize,
    pub other_original: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtcOutput {
    pub triplets: Vec<PseudoTriplet>,
    pub stats: PtcStats,
}

fn crop_id(image_id: &str, k: usize) -> String {
    format!("{image_id}#crop{k}")
}

/// Runs the full construction over one batch. `crop_rng` chooses a stored crop
/// candidate per image; `mixture_rng` draws the reference branch per kept pair.
pub fn construct_pseudo_triplets<R1, R2>(
    batch: &[&StoreRecord],
    crop_rng: &mut R1,
    mixture_rng: &mut R2,
    cfg: &PtcConfig,
) -> Result<PtcOutput>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let m = batch.len();
    if m < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: m });
    }
    cfg.mixture.validate()?;

    let mut crop_choice = Vec::with_capacity(m);
    for r in batch {
        let n = r.image.crop_candidates.len();
        if n == 0 {
            return Err(Error::InfeasibleCrop(format!(
                "image `{}` has no crop candidates",
                r.image.id
            )));
        }
        crop_choice.push(crop_rng.gen_range(0..n));
    }
    let captions: Vec<Embedding> = batch.iter().map(|r| r.caption.sentence_embedding.clone()).collect();
    let originals: Vec<Embedding> = batch.iter().map(|r| r.image.embedding.clone()).collect();
    let crops: Vec<Embedding> = batch
        .iter()
        .zip(&crop_choice)
        .map(|(r, &k)| r.image.crop_candidates[k].embedding.clone())
        .collect();

    let sims = compute_batch_sims(&captions, &originals, &crops, cfg.sim_mode)?;
    let kept = filter_triplets(&sims);

    let mut stats = PtcStats {
        batch_size: m,
        selected: kept.len(),
        theta_t2vc: sims.theta_t2vc,
        theta_t2v: sims.theta_t2v,
        ..PtcStats::default()
    };
    let mut triplets = Vec::with_capacity(kept.len());
    for &i in &kept {
        let x: f64 = mixture_rng.gen();
        let pick = mine_reference(i, &sims, x, &cfg.mixture)?;
        let src = batch[pick.source];
        let (reference, reference_id) = match pick.provenance {
            Provenance::SelfCrop | Provenance::OtherCrop => {
                stats.self_crop += usize::from(pick.provenance == Provenance::SelfCrop);
                stats.other_crop += usize::from(pick.provenance == Provenance::OtherCrop);
                let k = crop_choice[pick.source];
                (crops[pick.source].clone(), crop_id(&src.image.id, k))
            }
            Provenance::OtherOriginal => {
                stats.other_original += 1;
                (originals[pick.source].clone(), src.image.id.clone())
            }
        };
        triplets.push(PseudoTriplet {
            reference,
            reference_id,
            provenance: pick.provenance,
            caption_tokens: batch[i].caption.tokens.clone(),
            caption_embedding: captions[i].clone(),
            target: originals[i].clone(),
            target_id: batch[i].image.id.clone(),
        });
    }
    Ok(PtcOutput { triplets, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{CaptionRecord, CropCandidate, ImageRecord};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_image_is_infeasible() {
        let cfg = CropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_crop_box(40, 40, &mut rng, &cfg),
            Err(Error::InfeasibleCrop(_))
        ));
        assert!(matches!(
            sample_crop_box(30, 300, &mut rng, &cfg),
            Err(Error::InfeasibleCrop(_))
        ));
        // Without the exclusion rule a 40x40 image admits boxes.
        let loose = CropConfig {
            exclude_center: false,
            ..cfg
        };
        assert!(sample_crop_box(40, 40, &mut rng, &loose).is_ok());
        // Narrow but tall image: only the vertical axis can escape the zone.
        let b = sample_crop_box(40, 224, &mut rng, &cfg).unwrap();
        assert!(satisfies_crop_constraints(&b, 40, 224, &cfg));
    }

    #[test]
    fn crop_sampling_is_deterministic() {
        let cfg = CropConfig::default();
        let a = sample_crop_box(224, 224, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let b = sample_crop_box(224, 224, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feasibility_matches_exhaustive_search() {
        let cfg = CropConfig {
            min: 6,
            max: 9,
            exclude_center: true,
        };
        for w in 1..20u32 {
            for h in 1..20u32 {
                let mut exists = false;
                for bw in cfg.min..=cfg.max.min(w) {
                    for bh in cfg.min..=cfg.max.min(h) {
                        for x in 0..=(w - bw) {
                            for y in 0..=(h - bh) {
                                let b = CropBox { x, y, w: bw, h: bh };
                                exists |= satisfies_crop_constraints(&b, w, h, &cfg);
                            }
                        }
                    }
                }
                assert_eq!(check_crop_feasible(w, h, &cfg).is_ok(), exists, "{w}x{h}");
            }
        }
    }

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn matched_unit_batch_sims() {
        let basis: Vec<Embedding> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 1.0;
                e(&v)
            })
            .collect();
        let s = compute_batch_sims(&basis, &basis, &basis, SimMode::Literal).unwrap();
        assert_eq!(s.t2vc, vec![1.0; 3]);
        assert_eq!(s.theta_t2vc, 1.0);
        assert_eq!(s.v2v, Matrix::identity(3));
        assert!(filter_triplets(&s).is_empty());
    }

    #[test]
    fn zero_norm_crop_rejected() {
        let a = vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])];
        let z = vec![e(&[1.0, 0.0]), e(&[0.0, 0.0])];
        assert!(matches!(
            compute_batch_sims(&a, &a, &z, SimMode::Literal),
            Err(Error::ZeroNorm(_))
        ));
        assert!(matches!(
            compute_batch_sims(&a[..1], &a[..1], &a[..1], SimMode::Literal),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    fn sims_from(t2vc: Vec<f64>, t2v: Vec<f64>) -> BatchSim {
        let m = t2v.len();
        BatchSim::from_parts(t2vc, t2v, Matrix::identity(m), Matrix::identity(m))
    }

    #[test]
    fn filter_hand_cases() {
        assert_eq!(filter_triplets(&sims_from(vec![0.1, 0.9], vec![0.9, 0.1])), vec![0]);
        assert!(filter_triplets(&sims_from(vec![0.4; 5], vec![0.1, 0.2, 0.3, 0.4, 0.5])).is_empty());
    }

    #[test]
    fn mining_branches() {
        let mut vc = Matrix::identity(5);
        vc.set(0, 3, 0.8);
        vc.set(0, 2, 0.8);
        vc.set(0, 4, 0.1);
        let mut v = Matrix::identity(5);
        v.set(0, 1, 0.3);
        let sims = BatchSim::from_parts(vec![0.0; 5], vec![0.0; 5], vc, v);
        let mix = MixtureConfig::default();
        let self_pick = mine_reference(0, &sims, 0.5, &mix).unwrap();
        assert_eq!(
            self_pick,
            ReferencePick {
                provenance: Provenance::SelfCrop,
                source: 0
            }
        );
        let crop_pick = mine_reference(0, &sims, 0.10, &mix).unwrap();
        // 2 and 3 tie at 0.8; the lower index wins.
        assert_eq!(
            crop_pick,
            ReferencePick {
                provenance: Provenance::OtherCrop,
                source: 2
            }
        );
        let orig_pick = mine_reference(0, &sims, 0.30, &mix).unwrap();
        assert_eq!(
            orig_pick,
            ReferencePick {
                provenance: Provenance::OtherOriginal,
                source: 1
            }
        );
        assert_eq!(
            mine_reference(0, &sims, 0.35, &mix).unwrap().provenance,
            Provenance::SelfCrop
        );
        assert_eq!(
            mine_reference(0, &sims, 0.25, &mix).unwrap().provenance,
            Provenance::OtherOriginal
        );
    }

    #[test]
    fn argmax_never_selects_self() {
        // Self-similarity 1 is the row maximum but must be skipped.
        let sims = BatchSim::from_parts(vec![0.0; 2], vec![0.0; 2], Matrix::identity(2), Matrix::identity(2));
        let p = mine_reference(1, &sims, 0.0, &MixtureConfig::default()).unwrap();
        assert_eq!(p.source, 0);
    }

    fn rec(id: usize, d: usize, target_dot: f64, crop_dot: f64) -> StoreRecord {
        let mut t = vec![0.0; d];
        t[0] = 1.0;
        let mut v = vec![0.0; d];
        v[0] = target_dot;
        v[1 + id] = 1.0;
        let mut c = vec![0.0; d];
        c[0] = crop_dot;
        c[1 + id] = 0.5;
        StoreRecord {
            image: ImageRecord {
                id: format!("img{id}"),
                width: 224,
                height: 224,
                embedding: e(&v),
                crop_candidates: vec![CropCandidate {
                    bbox: CropBox::new(0, 0, 32, 32),
                    embedding: e(&c),
                }],
            },
            caption: CaptionRecord {
                image_id: format!("img{id}"),
                tokens: vec![id as u32 + 1],
                sentence_embedding: e(&t),
            },
        }
    }

    #[test]
    fn engineered_batch_keeps_exactly_one_and_four() {
        let t2v = [0.1, 0.9, 0.1, 0.1, 0.9];
        let t2vc = [0.9, 0.1, 0.9, 0.9, 0.1];
        let recs: Vec<StoreRecord> = (0..5).map(|i| rec(i, 8, t2v[i], t2vc[i])).collect();
        let batch: Vec<&StoreRecord> = recs.iter().collect();
        let out = construct_pseudo_triplets(
            &batch,
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut ChaCha8Rng::seed_from_u64(2),
            &PtcConfig::default(),
        )
        .unwrap();
        let targets: Vec<&str> = out.triplets.iter().map(|t| t.target_id.as_str()).collect();
        assert_eq!(targets, ["img1", "img4"]);
        for t in &out.triplets {
            assert_eq!(t.reference.dim(), t.target.dim());
            match t.provenance {
                Provenance::SelfCrop => assert!(t.reference_id.starts_with(&t.target_id)),
                _ => assert!(!t.reference_id.starts_with(&t.target_id)),
            }
        }
        assert_eq!(out.stats.selected, 2);
    }

    #[test]
    fn construction_rejects_single_record_and_is_deterministic() {
        let recs: Vec<StoreRecord> = (0..6).map(|i| rec(i, 8, 0.1 * i as f64, 0.2)).collect();
        let one: Vec<&StoreRecord> = recs.iter().take(1).collect();
        let cfg = PtcConfig::default();
        assert!(matches!(
            construct_pseudo_triplets(
                &one,
                &mut ChaCha8Rng::seed_from_u64(0),
                &mut ChaCha8Rng::seed_from_u64(0),
                &cfg
            ),
            Err(Error::BatchTooSmall { .. })
        ));
        let all: Vec<&StoreRecord> = recs.iter().collect();
        let run = || {
            construct_pseudo_triplets(
                &all,
                &mut ChaCha8Rng::seed_from_u64(9),
                &mut ChaCha8Rng::seed_from_u64(10),
                &cfg,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn filtered_set_is_shift_invariant(
                t2vc in prop::collection::vec(-1.0f64..1.0, 2..16),
                t2v_seed in prop::collection::vec(-1.0f64..1.0, 16),
                shift in -0.5f64..0.5,
            ) {
                // Dyadic grid keeps the mean shift exact in floating point.
                let q = |x: f64| (x * 64.0).round() / 64.0;
                let m = t2vc.len();
                let t2vc: Vec<f64> = t2vc.iter().map(|&x| q(x)).collect();
                let t2v: Vec<f64> = t2v_seed[..m].iter().map(|&x| q(x)).collect();
                let shifted: Vec<f64> = t2v.iter().map(|x| x + q(shift)).collect();
                let a = filter_triplets(&sims_from(t2vc.clone(), t2v));
                let b = filter_triplets(&sims_from(t2vc, shifted));
                prop_assert_eq!(a, b);
            }

            #[test]
            fn sampled_boxes_satisfy_constraints(seed in any::<u64>(), w in 96u32..400, h in 96u32..400) {
                let cfg = CropConfig::default();
                let b = sample_crop_box(w, h, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
                prop_assert!(satisfies_crop_constraints(&b, w, h, &cfg));
            }
        }
    }
}
