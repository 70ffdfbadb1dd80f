#![allow(dead_code)]

use denoise_i2w::encoders::{Connective, Encoders, ToyTextEncoder, VocabularyBuilder};
use denoise_i2w::linalg::Matrix;
use denoise_i2w::pcm::{Activation, Affine, MappingParams};
use denoise_i2w::ptc::{Provenance, PseudoTriplet};
use denoise_i2w::synth::WorldConfig;
use denoise_i2w::trainer::TrainConfig;
use denoise_i2w::Embedding;

pub const CAPTION_WORDS: [&str; 4] = ["red", "blue", "dog", "cat"];

pub fn basis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// Encoders whose token table is all zeros and whose text MLP acts
/// coordinate-wise (`W₁ = g·I`, `W₂ = I/g`, no biases), so a prompt's sentence
/// embedding is parallel to its pseudo token.
pub fn engineered_encoders(d: usize) -> Encoders {
    let mut b = VocabularyBuilder::new(d, 0).random_norm(0.0);
    for w in CAPTION_WORDS {
        b = b.word(w);
    }
    let vocab = b.build().unwrap();
    let gain = 1e-3;
    let mut w1 = Matrix::identity(d);
    w1.scale(gain);
    let mut w2 = Matrix::identity(d);
    w2.scale(1.0 / gain);
    let text = ToyTextEncoder::from_parts(vec![1.0; 32], w1, vec![0.0; d], w2, vec![0.0; d]).unwrap();
    Encoders::new(vocab, text, Connective::Comma).unwrap()
}

/// Three identity layers with the identity activation: `S_* = v_r`.
pub fn identity_mapping(d: usize) -> MappingParams {
    let layer = || Affine {
        weight: Matrix::identity(d),
        bias: vec![0.0; d],
    };
    MappingParams::from_layers([layer(), layer(), layer()], Activation::Identity).unwrap()
}

pub fn triplet(reference: Vec<f64>, caption_tokens: Vec<u32>, target: Vec<f64>, i: usize) -> PseudoTriplet {
    let d = reference.len();
    PseudoTriplet {
        reference: Embedding::new(reference).unwrap(),
        reference_id: format!("r{i}"),
        provenance: Provenance::SelfCrop,
        caption_tokens,
        caption_embedding: Embedding::new(basis(d, (i + 1) % d)).unwrap(),
        target: Embedding::new(target).unwrap(),
        target_id: format!("t{i}"),
    }
}

/// Reduced world that keeps tests fast.
pub fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        images: 400,
        seed,
        ..WorldConfig::default()
    }
}

/// Settings under which 200 steps move the mapping noticeably.
pub fn desk_train(seed: u64, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 5e-4,
        warmup_steps: 20,
        batch_size: 64,
        total_steps: steps,
        seed,
        ..TrainConfig::default()
    };
    cfg.objective.tau = 10.0;
    cfg
}
