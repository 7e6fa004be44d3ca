use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use wood_core::imageio::{load_gray, load_mask};
use wood_core::manifest::{load_manifest, resolve};
use wood_core::synth::{describe, generate, GenSpec, TEST_MANIFEST, TRAIN_MANIFEST};
use wood_core::Split;

fn small(seed: u64) -> GenSpec {
    GenSpec {
        image_size: 24,
        n_in: 12,
        n_ood_candidate: 50,
        n_test: 5,
        contamination: 0.2,
        multi_label_rate: 0.3,
        rng_seed: seed,
        ..GenSpec::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate(&small(7), a.path()).unwrap();
    generate(&small(7), b.path()).unwrap();
    generate(&small(8), c.path()).unwrap();
    let ta = tree(a.path());
    assert_eq!(ta, tree(b.path()));
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn counts_masks_and_contamination() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(3);
    let gen = generate(&spec, dir.path()).unwrap();
    let train_path = dir.path().join(TRAIN_MANIFEST);
    let test_path = dir.path().join(TEST_MANIFEST);
    assert_eq!(load_manifest(&train_path).unwrap(), gen.train);
    assert_eq!(load_manifest(&test_path).unwrap(), gen.test);

    let nc = spec.classes.len();
    assert_eq!(gen.train.by_split(Split::InDist).count(), spec.n_in * nc);
    assert_eq!(gen.train.by_split(Split::OodCandidate).count(), spec.n_ood_candidate);
    assert_eq!(gen.test.records.len(), spec.n_test * nc);

    let mut with_fg = 0;
    let mut multi = 0;
    for (m, path) in [(&gen.train, &train_path), (&gen.test, &test_path)] {
        for rec in &m.records {
            let img = load_gray(resolve(path, &rec.path)).unwrap();
            let mask = load_mask(resolve(path, rec.gt_mask_path.as_ref().unwrap())).unwrap();
            assert_eq!((img.width, img.height), (spec.image_size, spec.image_size));
            assert_eq!((mask.width, mask.height), (img.width, img.height));
            assert!(mask.data.iter().all(|&v| (v as usize) <= nc));
            match rec.split {
                Split::InDist => {
                    for c in 0..nc {
                        let present = mask.count(c as u8 + 1) > 0;
                        assert_eq!(present, rec.labels[c] == 1, "{} class {c}", rec.id);
                    }
                    if rec.labels.iter().filter(|&&v| v == 1).count() > 1 {
                        multi += 1;
                    }
                }
                _ => {
                    assert!(rec.labels.iter().all(|&v| v == 0));
                    if mask.foreground_pixels() > 0 {
                        with_fg += 1;
                    }
                }
            }
        }
    }
    assert_eq!(with_fg, 10);
    assert!(multi > 0);

    let summary = describe(&gen.train, &train_path).unwrap();
    assert_eq!(summary.candidates_with_foreground, 10);
    assert!((summary.contamination_rate - 0.2).abs() < 1e-12);
    assert_eq!(summary.in_dist, spec.n_in * nc);
    for cc in &summary.per_class {
        assert!(cc.count >= spec.n_in, "{cc:?}");
    }
}

#[test]
fn uncorrelated_spec_without_contamination() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenSpec {
        contamination: 0.0,
        multi_label_rate: 0.0,
        correlation_rate: 0.0,
        ..small(1)
    };
    let gen = generate(&spec, dir.path()).unwrap();
    let summary = describe(&gen.train, &dir.path().join(TRAIN_MANIFEST)).unwrap();
    assert_eq!(summary.candidates_with_foreground, 0);
    assert!(summary.per_class.iter().all(|c| c.count == spec.n_in));
}
