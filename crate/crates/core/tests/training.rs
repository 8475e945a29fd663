use vasplat::model::Model;
use vasplat::synth::{self, Dataset, RigSpec, SceneSpec, Split};
use vasplat::train::{self, Frame, TrainConfig};

fn frames(ds: &Dataset, split: Split) -> Vec<Frame<'_>> {
    ds.indices(split)
        .into_iter()
        .map(|i| Frame {
            pose: &ds.rig.views[i].pose,
            cam: &ds.rig.views[i].cam,
            image: &ds.images[i],
        })
        .collect()
}

fn desk(size: u32, n_train: usize, n_test: usize, gaussians: usize) -> (Dataset, synth::GtScene) {
    let mut spec = SceneSpec::desk(3);
    spec.gaussian_count = gaussians;
    Dataset::generate(&spec, &RigSpec::desk(n_train, n_test, size, 3)).unwrap()
}

fn window_means(losses: &[f64], w: usize) -> Vec<f64> {
    losses.chunks_exact(w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn static_fit_loss_windows_do_not_increase() {
    let (ds, gt) = Dataset::generate(&SceneSpec::desk(3), &RigSpec::desk(8, 2, 48, 3)).unwrap();
    let tr = frames(&ds, Split::Train);
    let cfg = TrainConfig {
        steps: 300,
        ..Default::default()
    };
    let out = train::fit_static(&synth::init_scene(&gt, cfg.sh_degree), &tr, &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.loss).collect();
    let means = window_means(&losses, 50);
    assert_eq!(means.len(), 6);
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "window means {means:?}");
    }
}

#[test]
fn head_fits_do_not_lose_to_their_starting_point() {
    let (ds, gt) = desk(24, 48, 12, 60);
    let (tr, te) = (frames(&ds, Split::Train), frames(&ds, Split::Test));
    let bg = ds.spec.background;
    let static_cfg = TrainConfig {
        steps: 150,
        sh_degree: 2,
        batch: Some(4),
        ..Default::default()
    };
    let base = train::fit_static(&synth::init_scene(&gt, 2), &tr, &static_cfg).unwrap().model;
    let base_psnr = train::evaluate(&base, &te, bg).unwrap().psnr;

    let cfg = TrainConfig {
        steps: 150,
        ..static_cfg.clone()
    };
    let view = train::fit_view(&base.scene, &tr, &cfg).unwrap().model;
    assert_eq!(view.scene, base.scene);
    let view_psnr = train::evaluate(&view, &te, bg).unwrap().psnr;
    assert!(view_psnr >= base_psnr - 0.05, "view {view_psnr} base {base_psnr}");

    let joint = train::fit_joint(&view, &tr, &TrainConfig { steps: 60, ..cfg }).unwrap().model;
    let joint_psnr = train::evaluate(&joint, &te, bg).unwrap().psnr;
    assert!(joint_psnr >= view_psnr - 0.1, "joint {joint_psnr} view {view_psnr}");
    assert!(joint.is_adaptive());
}

#[test]
fn static_only_model_round_trips_through_a_head_model() {
    let (ds, gt) = desk(16, 3, 1, 20);
    let init = synth::init_scene(&gt, 1);
    let head = train::new_head(&init, &TrainConfig { sh_degree: 1, ..Default::default() });
    let adaptive = Model::with_hyper(init.clone(), head, Default::default()).unwrap();
    for f in frames(&ds, Split::Train) {
        let a = adaptive.render(f.pose, f.cam, ds.spec.background).unwrap();
        let b = Model::static_only(init.clone()).render(f.pose, f.cam, ds.spec.background).unwrap();
        assert_eq!(a.image.data, b.image.data);
    }
}
