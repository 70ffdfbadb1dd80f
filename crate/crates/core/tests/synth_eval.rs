mod common;

use std::collections::BTreeSet;

use common::small_world;
use denoise_i2w::encoders::Template;
use denoise_i2w::eval::{evaluate, read_tasks, write_tasks, Gallery, TaskKind, AVERAGE_ROW};
use denoise_i2w::geometry::Rect;
use denoise_i2w::linalg::cosine;
use denoise_i2w::synth::{concept_name, generate_world, layout_cells, make_eval_tasks, WorldConfig};
use denoise_i2w::trainer::{initial_params, TrainConfig};

#[test]
fn truth_sets_match_a_metadata_scan() {
    let w = generate_world(&small_world(2)).unwrap();
    let images = &w.meta.images;
    let sets: Vec<BTreeSet<usize>> = (0..images.len()).map(|i| w.concept_set(i)).collect();
    let id_index = |id: &str| images.iter().position(|m| m.id == id).unwrap();

    let dc = make_eval_tasks(&w, TaskKind::DomainConversion, 200, 2).unwrap();
    for q in &dc.queries {
        let r = id_index(&q.reference_id);
        let Template::Domain { tag } = q.template else {
            panic!("domain template")
        };
        let style = w
            .meta
            .style_names
            .iter()
            .position(|s| s == w.encoders.vocab.word(tag).unwrap())
            .unwrap();
        let want: Vec<usize> = (0..images.len())
            .filter(|&j| images[j].scene == images[r].scene && images[j].style == style)
            .collect();
        assert_ne!(style, images[r].style);
        assert_eq!(q.truth, want);
    }

    let oc = make_eval_tasks(&w, TaskKind::ObjectComposition, 200, 2).unwrap();
    for q in &oc.queries {
        let Template::ObjectComposition { tags } = &q.template else {
            panic!("composition template")
        };
        let (donor_id, _) = q.reference_id.split_once('@').unwrap();
        let donor = id_index(donor_id);
        let mut target: BTreeSet<usize> = tags
            .iter()
            .map(|&t| {
                w.meta
                    .concept_names
                    .iter()
                    .position(|n| n == w.encoders.vocab.word(t).unwrap())
                    .unwrap()
            })
            .collect();
        let shared: Vec<usize> = sets[donor].iter().copied().filter(|c| !target.contains(c)).collect();
        let c = *shared
            .iter()
            .find(|&&c| {
                let mut t = target.clone();
                t.insert(c);
                q.truth.iter().all(|&j| t.is_subset(&sets[j]))
            })
            .unwrap();
        target.insert(c);
        assert!(!target.is_subset(&sets[donor]));
        let want: Vec<usize> = (0..images.len()).filter(|&j| target.is_subset(&sets[j])).collect();
        assert_eq!(q.truth, want);
    }

    let sm = make_eval_tasks(&w, TaskKind::SentenceManipulation, 200, 2).unwrap();
    for q in &sm.queries {
        let r = id_index(&q.reference_id);
        let t = q.truth[0];
        assert_eq!(q.truth.len(), 1);
        let edit = w.meta.scenes[images[t].scene].edit.as_ref().unwrap();
        assert_eq!(edit.base_scene, images[r].scene);
        assert_eq!(images[t].style, images[r].style);
        let Template::Sentence { tokens } = &q.template else {
            panic!("sentence template")
        };
        assert_eq!(w.encoders.vocab.word(tokens[1]).unwrap(), concept_name(edit.removed));
        assert_eq!(w.encoders.vocab.word(tokens[3]).unwrap(), concept_name(edit.added));
    }
}

#[test]
fn noiseless_images_are_identifiable() {
    let w = generate_world(&WorldConfig {
        noise: 0.0,
        ..small_world(8)
    })
    .unwrap();
    let gallery: Vec<_> = w.store.records().iter().map(|r| r.image.embedding.clone()).collect();
    let g = Gallery::new(&gallery).unwrap();
    for (i, e) in gallery.iter().enumerate() {
        assert_eq!(g.rank(e.values()).unwrap()[0], i);
    }
}

#[test]
fn partial_crops_are_not_the_whole_image() {
    let w = generate_world(&WorldConfig {
        noise: 0.0,
        ..small_world(9)
    })
    .unwrap();
    let size = w.meta.config.image_size;
    let cells = layout_cells(size);
    for i in 0..50 {
        let scene = &w.meta.scenes[w.meta.images[i].scene];
        let full = &w.store.records()[i].image.embedding;
        let region = scene.regions[0];
        assert!(cells.contains(&region));
        let crop = w.crop_embedding(i, &region).unwrap();
        let c = cosine(crop.values(), full.values()).unwrap();
        assert!(c < 1.0 - 1e-9, "image {i}: cosine {c}");
        let whole = w.crop_embedding(i, &Rect::full(size, size)).unwrap();
        assert!(cosine(whole.values(), full.values()).unwrap() > 1.0 - 1e-6);
    }
}

#[test]
fn task_files_round_trip() {
    let w = generate_world(&small_world(10)).unwrap();
    let tasks: Vec<_> = TaskKind::ALL
        .iter()
        .map(|&k| make_eval_tasks(&w, k, 40, 10).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (tp, gp) = (dir.path().join("tasks.jsonl"), dir.path().join("gallery.jsonl"));
    write_tasks(&tp, &gp, &tasks).unwrap();
    let back = read_tasks(&tp, &gp, &w.store).unwrap();
    assert_eq!(back, tasks);
}

#[test]
fn report_has_every_task_and_an_average() {
    let w = generate_world(&small_world(11)).unwrap();
    let tasks: Vec<_> = TaskKind::ALL
        .iter()
        .map(|&k| make_eval_tasks(&w, k, 50, 11).unwrap())
        .collect();
    let p = initial_params(w.store.dim(), &w.encoders, &TrainConfig::default()).unwrap();
    let r = evaluate(&p, &tasks, &w.encoders, &[1, 5, 10], 11, "h").unwrap();
    for k in [1, 5, 10] {
        let per: Vec<f64> = TaskKind::ALL.iter().map(|t| r.recall(t.name(), k).unwrap()).collect();
        let avg = r.recall(AVERAGE_ROW, k).unwrap();
        assert!((avg - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
    assert!(r.to_csv().starts_with("task,K,recall\n"));
    let again = evaluate(&p, &tasks, &w.encoders, &[1, 5, 10], 11, "h").unwrap();
    assert_eq!(r.to_json(), again.to_json());
}
