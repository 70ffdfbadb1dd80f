//! Deterministic synthetic world: images are additive compositions of concept
//! vectors laid out on a 3×3 grid plus a global style vector; captions name a
//! subset of an image's concepts together with its style.
//!
//! Token rows of concept and style words are the projected concept and style
//! vectors, so text and images share one space the way a contrastively trained
//! encoder pair would.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    Connective, Encoders, ImageDescriptor, PlacedConcept, PromptSequence, Template, TextEncoderConfig, ToyImageEncoder,
    ToyTextEncoder, VocabularyBuilder, DOMAIN_TAGS, WORD_AND, WORD_REPLACE, WORD_WITH,
};
use crate::error::{Error, Result};
use crate::eval::{EvalQuery, TaskKind, TaskSet};
use crate::geometry::Rect;
use crate::linalg::Matrix;
use crate::ptc::{check_crop_feasible, sample_crop_box, CropConfig};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::store::{CaptionRecord, CropCandidate, Embedding, ImageRecord, Store, StoreRecord};

/// Grid cells available to concepts: the 3×3 grid minus its center.
pub const LAYOUT_CELLS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Embedding dimension (also token and concept dimension).
    pub d: usize,
    pub concepts: usize,
    pub styles: usize,
    pub images: usize,
    pub image_size: u32,
    pub concepts_per_image: (usize, usize),
    /// Fraction of an image's concepts its caption names.
    pub coverage: f64,
    /// Image-embedding noise σ.
    pub noise: f64,
    /// Norm of style vectors relative to unit-norm concepts.
    pub style_scale: f64,
    /// Styles each scene is rendered in.
    pub styles_per_scene: usize,
    /// Probability that a base scene gets an edited companion (one concept
    /// swapped), used by sentence-manipulation tasks.
    pub edit_fraction: f64,
    pub crops_per_image: usize,
    pub crop: CropConfig,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d: 32,
            concepts: 64,
            styles: 4,
            images: 2000,
            image_size: 224,
            concepts_per_image: (2, 4),
            coverage: 0.6,
            noise: 0.05,
            style_scale: 0.6,
            styles_per_scene: 2,
            edit_fraction: 0.25,
            crops_per_image: 8,
            crop: CropConfig::default(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.concepts == 0 || self.styles == 0 || self.images == 0 || self.crops_per_image == 0 {
            return bad("world counts must all be >= 1".into());
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return bad(format!("coverage must be in (0, 1], got {}", self.coverage));
        }
        if !(self.noise >= 0.0) || !(self.style_scale >= 0.0) || !(0.0..=1.0).contains(&self.edit_fraction) {
            return bad("noise, style scale and edit fraction must be non-negative (edit fraction <= 1)".into());
        }
        let (lo, hi) = self.concepts_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("invalid concepts-per-image range {lo}..={hi}"));
        }
        if self.styles_per_scene == 0 || self.styles_per_scene > self.styles {
            return bad(format!(
                "styles per scene must be in 1..={}, got {}",
                self.styles, self.styles_per_scene
            ));
        }
        if hi > LAYOUT_CELLS || hi > self.concepts {
            return Err(Error::InfeasibleLayout(format!(
                "{hi} concepts per image, but the layout has {LAYOUT_CELLS} cells and the world {} concepts",
                self.concepts
            )));
        }
        if self.image_size < 3 {
            return Err(Error::InfeasibleLayout(format!(
                "image size {} too small for a 3x3 layout",
                self.image_size
            )));
        }
        self.crop.validate()?;
        check_crop_feasible(self.image_size, self.image_size, &self.crop)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub base_scene: usize,
    pub removed: usize,
    pub added: usize,
}

/// A concept arrangement, rendered once per assigned style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub concepts: Vec<usize>,
    pub regions: Vec<Rect>,
    pub edit: Option<Edit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldImage {
    pub id: String,
    pub scene: usize,
    pub style: usize,
    pub caption_concepts: Vec<usize>,
}

/// Metadata exported for oracle tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub config: WorldConfig,
    pub concept_names: Vec<String>,
    pub style_names: Vec<String>,
    pub scenes: Vec<Scene>,
    pub images: Vec<WorldImage>,
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub meta: WorldMeta,
    pub concept_vectors: Matrix,
    pub style_vectors: Matrix,
    pub image_encoder: ToyImageEncoder,
    pub encoders: Encoders,
    pub store: Store,
}

pub fn concept_name(k: usize) -> String {
    format!("obj{k:02}")
}

pub fn style_name(k: usize) -> String {
    DOMAIN_TAGS
        .get(k)
        .map_or_else(|| format!("style{k}"), |s| s.to_string())
}

fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

/// The eight non-center cells of a 3×3 grid over a `size × size` image.
pub fn layout_cells(size: u32) -> Vec<Rect> {
    let edge = |i: u32| i * size / 3;
    let mut cells = Vec::with_capacity(LAYOUT_CELLS);
    for row in 0..3 {
        for col in 0..3 {
            if row == 1 && col == 1 {
                continue;
            }
            cells.push(Rect::new(
                edge(col),
                edge(row),
                edge(col + 1) - edge(col),
                edge(row + 1) - edge(row),
            ));
        }
    }
    cells
}

fn gaussian_rows(n: usize, dim: usize, norm: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::gaussian(n, dim, norm / (dim as f64).sqrt(), rng)
}

fn caption_count(k: usize, coverage: f64) -> usize {
    let n = ((coverage * k as f64).round() as usize).clamp(1, k);
    if coverage < 1.0 && n == k && k > 1 {
        k - 1
    } else {
        n
    }
}

fn sample_scenes(cfg: &WorldConfig, n_scenes: usize, cells: &[Rect]) -> Result<Vec<Scene>> {
    let mut rng = stream_rng(cfg.seed, Stream::World, 3);
    let (lo, hi) = cfg.concepts_per_image;
    let mut seen: HashSet<BTreeSet<usize>> = HashSet::new();
    let mut scenes: Vec<Scene> = Vec::with_capacity(n_scenes);
    let mut attempts = 0usize;
    let budget = 1000 + 100 * n_scenes;
    while scenes.len() < n_scenes {
        attempts += 1;
        if attempts > budget {
            return Err(Error::InfeasibleLayout(format!(
                "could not draw {n_scenes} distinct concept sets from {} concepts",
                cfg.concepts
            )));
        }
        let k = rng.gen_range(lo..=hi);
        let concepts = rand::seq::index::sample(&mut rng, cfg.concepts, k).into_vec();
        let key: BTreeSet<usize> = concepts.iter().copied().collect();
        if !seen.insert(key) {
            continue;
        }
        let slots = rand::seq::index::sample(&mut rng, cells.len(), k).into_vec();
        let regions: Vec<Rect> = slots.iter().map(|&s| cells[s]).collect();
        let base = scenes.len();
        scenes.push(Scene {
            concepts: concepts.clone(),
            regions: regions.clone(),
            edit: None,
        });
        if scenes.len() < n_scenes && k < cfg.concepts && rng.gen_bool(cfg.edit_fraction) {
            let pos = rng.gen_range(0..k);
            let added = loop {
                let c = rng.gen_range(0..cfg.concepts);
                if !concepts.contains(&c) {
                    break c;
                }
            };
            let mut edited = concepts.clone();
            let removed = edited[pos];
            edited[pos] = added;
            if seen.insert(edited.iter().copied().collect()) {
                scenes.push(Scene {
                    concepts: edited,
                    regions,
                    edit: Some(Edit {
                        base_scene: base,
                        removed,
                        added,
                    }),
                });
            }
        }
    }
    Ok(scenes)
}

impl SynthWorld {
    fn descriptor(&self, image: usize) -> ImageDescriptor {
        let img = &self.meta.images[image];
        let scene = &self.meta.scenes[img.scene];
        ImageDescriptor {
            width: self.meta.config.image_size,
            height: self.meta.config.image_size,
            concepts: scene
                .concepts
                .iter()
                .zip(&scene.regions)
                .map(|(&c, &region)| PlacedConcept {
                    vector: self.concept_vectors.row(c).to_vec(),
                    region,
                })
                .collect(),
            style: Some(self.style_vectors.row(img.style).to_vec()),
            noise_key: image as u64,
        }
    }

    /// Embedding of the crop `bbox` of image `image`, as stored (f32-rounded).
    pub fn crop_embedding(&self, image: usize, bbox: &Rect) -> Result<Embedding> {
        Ok(self
            .image_encoder
            .embed_crop(&self.descriptor(image), bbox)?
            .quantized())
    }

    /// Concept set of an image, sorted.
    pub fn concept_set(&self, image: usize) -> BTreeSet<usize> {
        self.meta.scenes[self.meta.images[image].scene]
            .concepts
            .iter()
            .copied()
            .collect()
    }

    /// Same world with every image's crop candidates resampled under `crop`.
    pub fn with_crop_range(&self, crop: CropConfig) -> Result<Self> {
        let mut cfg = self.meta.config.clone();
        cfg.crop = crop;
        cfg.validate()?;
        let mut w = self.clone();
        w.meta.config = cfg;
        let records = (0..w.meta.images.len())
            .map(|i| {
                let mut r = w.store.records()[i].clone();
                r.image.crop_candidates = w.sample_crops(i)?;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        w.store = Store::new(w.store.dim(), records)?;
        Ok(w)
    }

    fn sample_crops(&self, image: usize) -> Result<Vec<CropCandidate>> {
        let cfg = &self.meta.config;
        let mut rng = stream_rng(derive_seed(cfg.seed, Stream::World, 4), Stream::Crop, image as u64);
        let desc = self.descriptor(image);
        (0..cfg.crops_per_image)
            .map(|_| {
                let bbox = sample_crop_box(cfg.image_size, cfg.image_size, &mut rng, &cfg.crop)?;
                let embedding = self.image_encoder.embed_crop(&desc, &bbox)?.quantized();
                Ok(CropCandidate { bbox, embedding })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.meta).expect("world metadata serializes")
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let d = cfg.d;
    let concept_vectors = gaussian_rows(cfg.concepts, d, 1.0, &mut stream_rng(cfg.seed, Stream::World, 1));
    let style_vectors = gaussian_rows(
        cfg.styles,
        d,
        cfg.style_scale,
        &mut stream_rng(cfg.seed, Stream::World, 2),
    );
    let image_encoder = ToyImageEncoder::seeded(d, d, cfg.noise, derive_seed(cfg.seed, Stream::Encoder, 1))?;

    let concept_names: Vec<String> = (0..cfg.concepts).map(concept_name).collect();
    let style_names: Vec<String> = (0..cfg.styles).map(style_name).collect();
    let mut vb = VocabularyBuilder::new(d, derive_seed(cfg.seed, Stream::Encoder, 2)).random_norm(0.5);
    for (k, name) in concept_names.iter().enumerate() {
        vb = vb.grounded(name, image_encoder.project(concept_vectors.row(k))?);
    }
    for (k, name) in style_names.iter().enumerate() {
        vb = vb.grounded(name, image_encoder.project(style_vectors.row(k))?);
    }
    let vocab = vb.build()?;
    let text = ToyTextEncoder::seeded(TextEncoderConfig::new(d, d, derive_seed(cfg.seed, Stream::Encoder, 3)))?;
    let encoders = Encoders::new(vocab, text, Connective::Comma)?;

    let cells = layout_cells(cfg.image_size);
    let n_scenes = cfg.images.div_ceil(cfg.styles_per_scene);
    let scenes = sample_scenes(cfg, n_scenes, &cells)?;

    let mut rng = stream_rng(cfg.seed, Stream::World, 5);
    let mut images = Vec::with_capacity(cfg.images);
    let mut base_styles: Vec<Vec<usize>> = Vec::with_capacity(scenes.len());
    for (s, scene) in scenes.iter().enumerate() {
        // Edited scenes reuse their base scene's styles so sentence tasks have
        // a same-style target.
        let styles = match &scene.edit {
            Some(e) => base_styles[e.base_scene].clone(),
            None => rand::seq::index::sample(&mut rng, cfg.styles, cfg.styles_per_scene).into_vec(),
        };
        for &style in &styles {
            if images.len() == cfg.images {
                break;
            }
            let k = scene.concepts.len();
            let mut named = scene.concepts.clone();
            named.shuffle(&mut rng);
            named.truncate(caption_count(k, cfg.coverage));
            images.push(WorldImage {
                id: image_id(images.len()),
                scene: s,
                style,
                caption_concepts: named,
            });
        }
        base_styles.push(styles);
    }

    let meta = WorldMeta {
        config: cfg.clone(),
        concept_names,
        style_names,
        scenes,
        images,
    };
    let mut world = SynthWorld {
        meta,
        concept_vectors,
        style_vectors,
        image_encoder,
        encoders,
        store: Store::new(d, Vec::new())?,
    };

    let and = world.encoders.vocab.id(WORD_AND)?;
    let mut records = Vec::with_capacity(cfg.images);
    for i in 0..world.meta.images.len() {
        let img = &world.meta.images[i];
        let mut tokens = vec![world.encoders.vocab.id(&world.meta.style_names[img.style])?];
        for (j, &c) in img.caption_concepts.iter().enumerate() {
            if j > 0 {
                tokens.push(and);
            }
            tokens.push(world.encoders.vocab.id(&world.meta.concept_names[c])?);
        }
        let caption = PromptSequence::caption(&tokens, &world.encoders.vocab)?;
        let sentence_embedding = world.encoders.text.forward(&caption)?.quantized();
        let embedding = world.image_encoder.embed_image(&world.descriptor(i))?.quantized();
        records.push(StoreRecord {
            image: ImageRecord {
                id: img.id.clone(),
                width: cfg.image_size,
                height: cfg.image_size,
                embedding,
                crop_candidates: world.sample_crops(i)?,
            },
            caption: CaptionRecord {
                image_id: img.id.clone(),
                tokens,
                sentence_embedding,
            },
        });
    }
    world.store = Store::new(d, records)?;
    Ok(world)
}

/// Renders the caption of a world image as text.
pub fn caption_text(world: &SynthWorld, image: usize) -> Result<String> {
    world
        .encoders
        .vocab
        .render(&world.store.records()[image].caption.tokens)
}

fn gallery(world: &SynthWorld) -> (Vec<String>, Vec<Embedding>) {
    world
        .store
        .records()
        .iter()
        .map(|r| (r.image.id.clone(), r.image.embedding.clone()))
        .unzip()
}

/// Images grouped by `(scene, style)`.
fn image_lookup(world: &SynthWorld) -> std::collections::HashMap<(usize, usize), usize> {
    world
        .meta
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| ((img.scene, img.style), i))
        .collect()
}

/// Evaluation queries of `kind`, at most `max_queries`, in a seeded order.
pub fn make_eval_tasks(world: &SynthWorld, kind: TaskKind, max_queries: usize, seed: u64) -> Result<TaskSet> {
    let vocab = &world.encoders.vocab;
    let images = &world.meta.images;
    let scenes = &world.meta.scenes;
    let lookup = image_lookup(world);
    let mut rng = stream_rng(seed, Stream::Eval, kind as u64);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let mut queries = Vec::new();

    match kind {
        TaskKind::DomainConversion => {
            for &i in &order {
                let img = &images[i];
                let others: Vec<usize> = (0..world.meta.style_names.len())
                    .filter(|&s| s != img.style && lookup.contains_key(&(img.scene, s)))
                    .collect();
                let Some(&style) = others.choose(&mut rng) else {
                    continue;
                };
                queries.push(EvalQuery {
                    reference_id: img.id.clone(),
                    reference: world.store.records()[i].image.embedding.clone(),
                    template: Template::Domain {
                        tag: vocab.id(&world.meta.style_names[style])?,
                    },
                    truth: vec![lookup[&(img.scene, style)]],
                });
                if queries.len() == max_queries {
                    break;
                }
            }
        }
        TaskKind::ObjectComposition => {
            let sets: Vec<BTreeSet<usize>> = (0..images.len()).map(|i| world.concept_set(i)).collect();
            for &t in &order {
                let target = &sets[t];
                if target.len() < 2 {
                    continue;
                }
                let target_concepts: Vec<usize> = target.iter().copied().collect();
                let &c = target_concepts.choose(&mut rng).expect("non-empty");
                // Reference: the region holding `c` in another image that lacks
                // at least one of the target's other concepts.
                let donors: Vec<usize> = (0..images.len())
                    .filter(|&r| sets[r].contains(&c) && !target.is_subset(&sets[r]))
                    .collect();
                let Some(&donor) = donors.choose(&mut rng) else {
                    continue;
                };
                let scene = &scenes[images[donor].scene];
                let pos = scene.concepts.iter().position(|&x| x == c).expect("donor has concept");
                let region = scene.regions[pos];
                let tags = target_concepts
                    .iter()
                    .filter(|&&x| x != c)
                    .map(|&x| vocab.id(&world.meta.concept_names[x]))
                    .collect::<Result<Vec<_>>>()?;
                let truth: Vec<usize> = (0..images.len()).filter(|&j| target.is_subset(&sets[j])).collect();
                queries.push(EvalQuery {
                    reference_id: format!("{}@{}", images[donor].id, region),
                    reference: world.crop_embedding(donor, &region)?,
                    template: Template::ObjectComposition { tags },
                    truth,
                });
                if queries.len() == max_queries {
                    break;
                }
            }
        }
        TaskKind::SentenceManipulation => {
            let replace = vocab.id(WORD_REPLACE)?;
            let with = vocab.id(WORD_WITH)?;
            for &t in &order {
                let img = &images[t];
                let Some(edit) = &scenes[img.scene].edit else { continue };
                let Some(&r) = lookup.get(&(edit.base_scene, img.style)) else {
                    continue;
                };
                queries.push(EvalQuery {
                    reference_id: images[r].id.clone(),
                    reference: world.store.records()[r].image.embedding.clone(),
                    template: Template::Sentence {
                        tokens: vec![
                            replace,
                            vocab.id(&world.meta.concept_names[edit.removed])?,
                            with,
                            vocab.id(&world.meta.concept_names[edit.added])?,
                        ],
                    },
                    truth: vec![t],
                });
                if queries.len() == max_queries {
                    break;
                }
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::NoTasks(kind.name().to_string()));
    }
    let (gallery_ids, gallery) = gallery(world);
    let set = TaskSet {
        kind,
        queries,
        gallery_ids,
        gallery,
    };
    set.validate()?;
    Ok(set)
}
