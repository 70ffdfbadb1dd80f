use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use denoise_i2w::encoders::Template;
use denoise_i2w::eval::{compose_query, Gallery};
use denoise_i2w::store::write_store;
use denoise_i2w::synth::{generate_world, SynthWorld, WorldConfig};
use denoise_i2w::trainer::{train, TrainConfig};
use denoise_i2w_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    store: CString,
    encoders: CString,
    checkpoint: CString,
    world: SynthWorld,
    params: denoise_i2w::pcm::MappingParams,
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let world = generate_world(&WorldConfig {
        images: 200,
        seed: 5,
        ..WorldConfig::default()
    })
    .unwrap();
    let store = dir.path().join("store.di2w");
    let encoders = dir.path().join("store.vocab.json");
    let checkpoint = dir.path().join("checkpoint.di2k");
    write_store(world.store.records(), world.store.dim(), &store).unwrap();
    world.encoders.save(&encoders).unwrap();
    let cfg = TrainConfig {
        total_steps: 20,
        warmup_steps: 5,
        learning_rate: 5e-4,
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&world.store, &world.encoders, &cfg).unwrap();
    out.checkpoint(&cfg).save(&checkpoint).unwrap();
    Fixture {
        store: cpath(&store),
        encoders: cpath(&encoders),
        checkpoint: cpath(&checkpoint),
        params: out.params,
        world,
        _dir: dir,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(di2w_last_error_message()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn open(f: &Fixture) -> (*mut Di2wStore, *mut Di2wModel) {
    let mut store = ptr::null_mut();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(di2w_store_open(f.store.as_ptr(), &mut store), Di2wStatus::Ok);
        assert_eq!(
            di2w_model_open(f.checkpoint.as_ptr(), f.encoders.as_ptr(), &mut model),
            Di2wStatus::Ok
        );
    }
    assert!(last_error().is_empty());
    (store, model)
}

#[test]
fn composed_query_and_ranking_match_the_library() {
    let f = fixture();
    let (store, model) = open(&f);
    let (mut len, mut dim, mut input, mut qdim) = (0, 0, 0, 0);
    unsafe {
        assert_eq!(di2w_store_info(store, &mut len, &mut dim), Di2wStatus::Ok);
        assert_eq!(di2w_model_info(model, &mut input, &mut qdim), Di2wStatus::Ok);
    }
    assert_eq!((len, dim), (200, f.world.store.dim()));
    assert_eq!(input, dim);

    let mut reference = vec![0.0; dim];
    unsafe {
        assert_eq!(
            di2w_store_image_embedding(store, 7, reference.as_mut_ptr(), dim),
            Di2wStatus::Ok
        );
    }
    assert_eq!(reference, f.world.store.records()[7].image.embedding.values());

    let words = CString::new("obj03 obj11").unwrap();
    let mut query = vec![0.0; qdim];
    unsafe {
        let st = di2w_compose_query(
            model,
            reference.as_ptr(),
            dim,
            Di2wTemplate::ObjectComposition,
            words.as_ptr(),
            query.as_mut_ptr(),
            qdim,
        );
        assert_eq!(st, Di2wStatus::Ok, "{}", last_error());
    }
    let vocab = &f.world.encoders.vocab;
    let template = Template::ObjectComposition {
        tags: vocab.encode_words(&["obj03", "obj11"]).unwrap(),
    };
    let want = compose_query(&f.params, &reference, &template, &f.world.encoders).unwrap();
    assert_eq!(query, want.values());

    let images: Vec<_> = f
        .world
        .store
        .records()
        .iter()
        .map(|r| r.image.embedding.clone())
        .collect();
    let ranking = Gallery::new(&images).unwrap().rank(&query).unwrap();
    let mut top = vec![usize::MAX; 10];
    let mut written = 0;
    unsafe {
        assert_eq!(
            di2w_rank(store, query.as_ptr(), qdim, 10, top.as_mut_ptr(), &mut written),
            Di2wStatus::Ok
        );
    }
    assert_eq!(written, 10);
    assert_eq!(top, ranking[..10]);

    let mut all = vec![0; 500];
    unsafe {
        assert_eq!(
            di2w_rank(store, query.as_ptr(), qdim, 500, all.as_mut_ptr(), &mut written),
            Di2wStatus::Ok
        );
    }
    assert_eq!(written, 200);

    let mut global = vec![0.0; qdim];
    unsafe {
        let st = di2w_compose_query(
            model,
            reference.as_ptr(),
            dim,
            Di2wTemplate::Global,
            ptr::null(),
            global.as_mut_ptr(),
            qdim,
        );
        assert_eq!(st, Di2wStatus::Ok);
        di2w_store_free(store);
        di2w_model_free(model);
    }
    let norm: f64 = global.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn failures_return_codes_and_messages() {
    let f = fixture();
    let (store, model) = open(&f);
    let dim = f.world.store.dim();
    let reference = f.world.store.records()[0].image.embedding.values().to_vec();
    let mut out = vec![0.0; dim];
    let compose = |t, words: &str, out: &mut [f64]| {
        let w = CString::new(words).unwrap();
        unsafe {
            di2w_compose_query(
                model,
                reference.as_ptr(),
                dim,
                t,
                w.as_ptr(),
                out.as_mut_ptr(),
                out.len(),
            )
        }
    };
    assert_eq!(
        compose(Di2wTemplate::Compose, "zebra", &mut out),
        Di2wStatus::UnknownWord
    );
    assert!(last_error().starts_with("unknown_word"), "{}", last_error());
    assert_eq!(
        compose(Di2wTemplate::Domain, "obj01 obj02", &mut out),
        Di2wStatus::InvalidArgument
    );
    assert_eq!(
        compose(Di2wTemplate::Sentence, "", &mut out),
        Di2wStatus::InvalidArgument
    );
    assert_eq!(
        compose(Di2wTemplate::Compose, "obj01", &mut out[..3]),
        Di2wStatus::BufferTooSmall
    );
    assert_eq!(compose(Di2wTemplate::Compose, "obj01", &mut out), Di2wStatus::Ok);
    assert!(last_error().is_empty());

    let mut written = 99;
    let mut idx = [0usize; 4];
    unsafe {
        let st = di2w_rank(store, reference.as_ptr(), dim - 1, 4, idx.as_mut_ptr(), &mut written);
        assert_eq!(st, Di2wStatus::DimensionMismatch);
        assert_eq!(written, 0);
        assert_eq!(
            di2w_rank(store, ptr::null(), dim, 4, idx.as_mut_ptr(), &mut written),
            Di2wStatus::NullPointer
        );
        let mut v = [0.0; 3];
        assert_eq!(
            di2w_store_image_embedding(store, 200, v.as_mut_ptr(), 3),
            Di2wStatus::InvalidArgument
        );
        assert_eq!(
            di2w_store_image_embedding(store, 0, v.as_mut_ptr(), 3),
            Di2wStatus::BufferTooSmall
        );
        assert_eq!(
            di2w_store_info(ptr::null(), &mut written, &mut written),
            Di2wStatus::NullPointer
        );
        di2w_store_free(store);
        di2w_model_free(model);
        di2w_store_free(ptr::null_mut());
    }

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.di2w");
    std::fs::write(&junk, b"NOPE\x01\x00rest").unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(
            di2w_store_open(cpath(&junk).as_ptr(), &mut handle),
            Di2wStatus::BadMagic
        );
        assert!(handle.is_null());
        let missing = cpath(&dir.path().join("missing.di2w"));
        assert_eq!(di2w_store_open(missing.as_ptr(), &mut handle), Di2wStatus::Io);
        assert!(last_error().starts_with("io"));
        assert_eq!(di2w_store_open(ptr::null(), &mut handle), Di2wStatus::NullPointer);
        let mut model = ptr::null_mut();
        assert_eq!(
            di2w_model_open(f.store.as_ptr(), f.encoders.as_ptr(), &mut model),
            Di2wStatus::BadMagic
        );
        assert!(model.is_null());
    }
}

#[test]
fn normalize_gradcheck_and_version() {
    let mut v = [3.0, 4.0];
    let mut zero = [0.0, 0.0];
    unsafe {
        assert_eq!(di2w_l2_normalize(v.as_mut_ptr(), 2), Di2wStatus::Ok);
        assert_eq!(di2w_l2_normalize(zero.as_mut_ptr(), 2), Di2wStatus::ZeroNorm);
    }
    assert_eq!(v, [0.6, 0.8]);

    let (mut err, mut passed) = (f64::NAN, false);
    unsafe {
        assert_eq!(
            di2w_gradcheck(8, 8, 4, 1, 1e-5, 1e-5, &mut err, &mut passed),
            Di2wStatus::Ok
        );
    }
    assert!(passed && err <= 1e-5, "{err}");
    unsafe {
        assert_eq!(
            di2w_gradcheck(8, 8, 0, 1, 1e-5, 1e-5, &mut err, &mut passed),
            Di2wStatus::InvalidConfig
        );
    }
    assert!(last_error().starts_with("batch_too_small"), "{}", last_error());

    let version = unsafe { CStr::from_ptr(di2w_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_current() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/denoise_i2w.h")).unwrap();
    for name in [
        "di2w_store_open",
        "di2w_store_free",
        "di2w_store_info",
        "di2w_store_image_embedding",
        "di2w_rank",
        "di2w_model_open",
        "di2w_model_free",
        "di2w_model_info",
        "di2w_compose_query",
        "di2w_l2_normalize",
        "di2w_gradcheck",
        "di2w_last_error_message",
        "di2w_version",
        "DI2W_STATUS_BUFFER_TOO_SMALL = 13",
        "typedef struct Di2wStore Di2wStore",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
