use ape_core::checkpoint::load_checkpoint;
use ape_core::eval::{center_retrieval, localization_items, EmbeddedPhantom};
use ape_core::localization::localization_protocol;
use ape_core::model::{sliding_window_embed, SlidingWindowConfig};
use ape_core::phantom::{generate_phantom, PhantomSpec};
use ape_core::train::{read_metrics, train, TrainSetup, Variant};

fn short_setup(variant: Variant, steps: u64) -> TrainSetup {
    let mut s = TrainSetup::default();
    s.train.variant = variant;
    s.train.steps = steps;
    s.train.n = 2;
    s.train.k = 40;
    s.train.checkpoint_every = 2;
    s.train.log_every = 1;
    s
}

#[test]
fn train_resume_embed_and_evaluate() {
    let spec = PhantomSpec::default();
    let samples: Vec<_> = (0..4).map(|i| generate_phantom(&spec, 100 + i).unwrap()).collect();
    let pool: Vec<_> = samples[..2].iter().map(|s| s.volume.clone()).collect();
    let dir = tempfile::tempdir().unwrap();

    let first = train(&short_setup(Variant::Equiv, 3), &pool, dir.path(), false).unwrap();
    assert_eq!(first.model.step, 3);
    let resumed = train(&short_setup(Variant::Equiv, 5), &pool, dir.path(), true).unwrap();
    assert_eq!(resumed.model.step, 5);
    let steps: Vec<u64> = read_metrics(&resumed.metrics).unwrap().iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);

    // An uninterrupted run reaches the same parameters.
    let straight_dir = tempfile::tempdir().unwrap();
    let straight = train(&short_setup(Variant::Equiv, 5), &pool, straight_dir.path(), false).unwrap();
    assert_eq!(straight.model, resumed.model);
    assert_eq!(load_checkpoint(&resumed.checkpoint).unwrap().model, resumed.model);

    let eval = &samples[2..];
    let window = SlidingWindowConfig {
        window: [32, 32, 24],
        ..SlidingWindowConfig::default()
    };
    let maps: Vec<_> = eval.iter().map(|s| sliding_window_embed(&resumed.model, &s.volume, &window).unwrap()).collect();
    for (m, s) in maps.iter().zip(eval) {
        assert_eq!(m.shape(), s.volume.shape());
    }
    let items: Vec<_> = eval
        .iter()
        .zip(&maps)
        .enumerate()
        .map(|(i, (s, m))| EmbeddedPhantom {
            id: format!("p{i}"),
            sample: s,
            map: m,
        })
        .collect();
    let cases = center_retrieval(&items).unwrap();
    assert_eq!(cases.len(), 2 * spec.organs.len());
    assert!(cases.iter().all(|c| c.radial_error.is_finite()));

    let (details, reports) = localization_protocol(&localization_items(&items), 1, 0).unwrap();
    assert_eq!(reports.len(), spec.organs.len());
    assert_eq!(details.len(), 2 * spec.organs.len());
    assert!(details.iter().all(|d| (0.0..=1.0).contains(&d.iou)));
}

#[test]
fn naive_runs_log_no_equivariance_terms() {
    let spec = PhantomSpec::default();
    let pool = vec![generate_phantom(&spec, 7).unwrap().volume];
    let dir = tempfile::tempdir().unwrap();
    let out = train(&short_setup(Variant::Naive, 2), &pool, dir.path(), false).unwrap();
    assert!(out.rows.iter().all(|r| r.loss_equiv.is_none() && r.mean_dpred_ii.is_none()));
}
