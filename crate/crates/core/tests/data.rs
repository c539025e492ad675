mod common;

use common::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use sbctm::data::{assign_splits, mix_at_snr, synth_corpus, synth_utterance, write_corpus, Manifest, Split, SynthConfig, MANIFEST_FILE};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        num_utterances: 8,
        duration_s: 0.5,
        test_fraction: 0.25,
        valid_fraction: 0.125,
        seed,
        ..SynthConfig::default()
    }
}

fn snr_of(clean: &[f64], noisy: &[f64]) -> f64 {
    let ec: f64 = clean.iter().map(|c| c * c).sum();
    let en: f64 = clean.iter().zip(noisy).map(|(c, n)| (n - c).powi(2)).sum();
    10.0 * (ec / en).log10()
}

#[test]
fn mixing_hits_the_requested_snr() {
    let mut r = rng(1);
    let clean: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.05).sin()).collect();
    let noise: Vec<f64> = (0..8000).map(|_| r.sample(StandardNormal)).collect();
    for db in [-5.0, 0.0, 10.0, 25.0] {
        let mixed = mix_at_snr(&clean, &noise, db).unwrap();
        assert!((snr_of(&clean, &mixed) - db).abs() < 0.01, "{db}");
    }
}

#[test]
fn synthetic_pairs_sit_at_their_recorded_snr() {
    let cfg = small(3);
    for i in 0..cfg.num_utterances {
        let u = synth_utterance(&cfg, i).unwrap();
        let c: Vec<f64> = u.clean.iter().map(|&v| v as f64).collect();
        let n: Vec<f64> = u.noisy.iter().map(|&v| v as f64).collect();
        assert!((snr_of(&c, &n) - u.snr_db).abs() < 0.01, "{}: {} vs {}", u.id, snr_of(&c, &n), u.snr_db);
        assert!((cfg.snr_db_min..cfg.snr_db_max).contains(&u.snr_db));
    }
}

#[test]
fn infinite_snr_leaves_clean_untouched() {
    let cfg = SynthConfig {
        snr_db_min: f64::INFINITY,
        snr_db_max: f64::INFINITY,
        ..small(4)
    };
    let u = synth_utterance(&cfg, 0).unwrap();
    assert_eq!(u.clean, u.noisy);
    let clean = [0.25, -0.5, 1e-9];
    assert_eq!(mix_at_snr(&clean, &[1.0, 1.0, 1.0], f64::INFINITY).unwrap(), clean.to_vec());
}

#[test]
fn mixing_rejects_degenerate_inputs() {
    assert!(mix_at_snr(&[1.0, 1.0], &[1.0], 0.0).is_err());
    assert!(mix_at_snr(&[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
    assert!(mix_at_snr(&[1.0, 1.0], &[1.0, 1.0], f64::NAN).is_err());
}

#[test]
fn corpus_is_deterministic() {
    let a = synth_corpus(&small(5)).unwrap();
    let b = synth_corpus(&small(5)).unwrap();
    assert_eq!(a, b);
    let c = synth_corpus(&small(6)).unwrap();
    assert_ne!(a[0].clean, c[0].clean);
    // index-addressable: the parallel corpus matches single draws
    assert_eq!(a[5], synth_utterance(&small(5), 5).unwrap());
}

#[test]
fn splits_are_a_partition_with_requested_sizes() {
    let s = assign_splits(80, 0.125, 0.25, 9);
    assert_eq!(s.len(), 80);
    assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 20);
    assert_eq!(s.iter().filter(|&&x| x == Split::Valid).count(), 10);
    assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 50);
    assert_eq!(s, assign_splits(80, 0.125, 0.25, 9));
}

#[test]
fn manifest_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(7);
    let m = write_corpus(dir.path(), &cfg).unwrap();
    let back = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m, back);
    let utts = synth_corpus(&cfg).unwrap();
    let mut total = 0;
    for split in [Split::Train, Split::Valid, Split::Test] {
        let loaded = back.load_split(dir.path(), split).unwrap();
        total += loaded.len();
        for u in loaded {
            let orig = utts.iter().find(|o| o.id == u.id).unwrap();
            assert_eq!(u.clean, orig.clean);
            assert_eq!(u.noisy, orig.noisy);
        }
    }
    assert_eq!(total, cfg.num_utterances);
}

#[test]
fn manifest_with_duplicate_ids_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(dir.path(), &small(8)).unwrap();
    let mut dup = m.clone();
    dup.entries.push(m.entries[0].clone());
    let p = dir.path().join("dup.json");
    dup.save(&p).unwrap();
    assert!(Manifest::load(&p).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        SynthConfig { num_utterances: 0, ..small(0) },
        SynthConfig { sample_rate: 8000, ..small(0) },
        SynthConfig { snr_db_min: 5.0, snr_db_max: -5.0, ..small(0) },
        SynthConfig { test_fraction: 0.6, valid_fraction: 0.5, ..small(0) },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}
