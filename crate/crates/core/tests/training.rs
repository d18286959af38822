use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use maskvid::dataio::pnm::raster_to_tensor;
use maskvid::dataio::synth;
use maskvid::masking::asymmetric_pair;
use maskvid::trainer::{TrainConfig, Trainer};
use maskvid::{Precision, Tensor};

fn data(seed: u64) -> Vec<Vec<Tensor>> {
    synth::generate(seed, 6, 5, 32, 8)
        .unwrap()
        .iter()
        .map(|s| s.frames.iter().map(|r| raster_to_tensor(r).unwrap()).collect())
        .collect()
}

fn small() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        pairs_per_epoch: 4,
        epochs: 2,
        warmup_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_the_same_trajectory() {
    let run = |seed| {
        let mut cfg = small();
        cfg.seed = seed;
        let mut t = Trainer::new(cfg, data(1)).unwrap();
        let reports: Vec<_> = (0..3).map(|_| t.step().unwrap().0).collect();
        (reports, t.dual)
    };
    let (ra, da) = run(4);
    let (rb, db) = run(4);
    assert_eq!(ra, rb);
    assert_eq!(da, db);
    let (rc, _) = run(5);
    assert_ne!(ra, rc);
}

#[test]
fn asymmetric_masks_train_and_overlap_as_expected() {
    let mut cfg = small();
    cfg.symmetric_masking = false;
    let mut t = Trainer::new(cfg, data(2)).unwrap();
    let mut differing = 0;
    for _ in 0..20 {
        let p = t.sample_pair().unwrap();
        assert_eq!(p.mask1.num_masked(), p.mask2.num_masked());
        differing += usize::from(p.mask1 != p.mask2);
    }
    assert!(differing > 10);
    let (r, _) = t.step().unwrap();
    assert!(r.is_finite());

    // two independent 12-of-16 draws share 12·12/16 = 9 masked cells on average
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 20_000;
    let mut shared = 0usize;
    for _ in 0..draws {
        let (a, b) = asymmetric_pair(4, 4, 0.75, &mut rng).unwrap();
        shared += a.visible().iter().zip(b.visible()).filter(|(x, y)| !**x && !**y).count();
    }
    let mean = shared as f64 / draws as f64;
    // hypergeometric variance 12·(4/16)·(4/16)·(12/15) = 0.6
    let sd = (0.6f64 / draws as f64).sqrt();
    assert!((mean - 9.0).abs() < 4.0 * sd, "mean overlap {mean}");
}

#[test]
fn single_precision_mode_rounds_graph_outputs() {
    let mut cfg = small();
    cfg.precision = Precision::F32;
    let mut t = Trainer::new(cfg, data(3)).unwrap();
    for _ in 0..2 {
        let (r, _) = t.step().unwrap();
        assert!(r.is_finite());
        assert_eq!(r.l_online, r.l_online as f32 as f64);
    }
    maskvid::set_precision(Precision::F64);
}

#[test]
fn frames_must_have_three_channels() {
    let bad = vec![vec![Tensor::zeros(&[1, 32, 32]); 3]];
    assert!(Trainer::new(small(), bad).is_err());
    let short = vec![vec![Tensor::zeros(&[3, 32, 32]); 1]];
    assert!(Trainer::new(small(), short).is_err());
}

#[test]
fn shipped_desk_config_is_the_default() {
    let text = include_str!("../../../configs/desk.cfg");
    assert_eq!(TrainConfig::parse(text).unwrap(), TrainConfig::default());
}
