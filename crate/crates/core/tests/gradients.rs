mod common;
use common::{architectures, test_point, worst_directional_error};

use ctinr::inr::{backprop_grid, evaluate_grid, init_inr, InrModel, PreparedGrid};
use ctinr::projector::{Compose, CountingOperator};
use ctinr::recon::{loss_and_grad, LossKind};
use ctinr::scalar::dot;
use ctinr::sino_filter::{FilterOperator, FilterPower};
use ctinr::{make_fan_geometry, FanProjector, GridSpec, LinearOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn backprop_matches_finite_differences() {
    let grid = GridSpec::new(16, 40.0).unwrap();
    for (i, arch) in architectures().iter().enumerate() {
        let pg = PreparedGrid::for_grid(arch, &grid).unwrap();
        let model = test_point(arch, 3 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let upstream: Vec<f64> = (0..pg.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = backprop_grid(&model, &pg, &upstream).unwrap();
        let worst = worst_directional_error(&model, &pg, &grad, 7, |m| dot(&upstream, &evaluate_grid(m, &pg).unwrap()));
        assert!(worst < 1e-5, "{}: worst relative error {worst:e}", arch.kind());
    }
}

#[test]
fn losses_match_finite_differences() {
    let grid = GridSpec::new(16, 40.0).unwrap();
    let geom = make_fan_geometry(8, 32, grid).unwrap();
    let proj = FanProjector::new(geom.clone()).unwrap();
    let filter = FilterOperator::new(&geom, FilterPower::Full).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y: Vec<f64> = (0..geom.n_rays()).map(|_| rng.random_range(0.0..2.0)).collect();
    for (i, arch) in architectures().iter().enumerate() {
        let pg = PreparedGrid::for_grid(arch, &grid).unwrap();
        let model = test_point(arch, 20 + i as u64);
        for kind in [LossKind::Ls, LossKind::Fls] {
            let eval = loss_and_grad(&model, &pg, &proj, &y, kind, Some(&filter)).unwrap();
            let worst = worst_directional_error(&model, &pg, &eval.grad, 8, |m| {
                loss_and_grad(m, &pg, &proj, &y, kind, Some(&filter)).unwrap().loss
            });
            assert!(worst < 1e-5, "{} {kind:?}: worst relative error {worst:e}", arch.kind());
        }
    }
}

#[test]
fn fls_equals_ls_on_half_filtered_system() {
    let grid = GridSpec::new(12, 30.0).unwrap();
    let geom = make_fan_geometry(6, 24, grid).unwrap();
    let proj = FanProjector::new(geom.clone()).unwrap();
    let full = FilterOperator::new(&geom, FilterPower::Full).unwrap();
    let half = FilterOperator::new(&geom, FilterPower::Half).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y: Vec<f64> = (0..geom.n_rays()).map(|_| rng.random_range(0.0..2.0)).collect();
    let mut hy = vec![0.0; y.len()];
    half.apply(&y, &mut hy);
    let filtered = Compose { outer: half, inner: &proj };
    for arch in architectures() {
        let pg = PreparedGrid::for_grid(&arch, &grid).unwrap();
        let model: InrModel<f64> = init_inr(&arch, 5).unwrap();
        let fls = loss_and_grad(&model, &pg, &proj, &y, LossKind::Fls, Some(&full)).unwrap();
        let ls = loss_and_grad(&model, &pg, &filtered, &hy, LossKind::Ls, None).unwrap();
        assert!((fls.loss - ls.loss).abs() < 1e-12 * ls.loss);
        let diff: Vec<f64> = fls.grad.iter().zip(&ls.grad).map(|(a, b)| a - b).collect();
        assert!(dot(&diff, &diff).sqrt() < 1e-12 * dot(&ls.grad, &ls.grad).sqrt());
    }
}

#[test]
fn one_projection_pair_per_loss_evaluation() {
    let grid = GridSpec::new(8, 10.0).unwrap();
    let geom = make_fan_geometry(4, 16, grid).unwrap();
    let proj = CountingOperator::new(FanProjector::new(geom.clone()).unwrap());
    let filter = FilterOperator::new(&geom, FilterPower::Full).unwrap();
    let arch = &architectures()[1];
    let pg = PreparedGrid::for_grid(arch, &grid).unwrap();
    let model: InrModel<f64> = init_inr(arch, 1).unwrap();
    let y = vec![0.5; geom.n_rays()];
    for (k, kind) in [LossKind::Ls, LossKind::Fls, LossKind::Fls].into_iter().enumerate() {
        loss_and_grad(&model, &pg, &proj, &y, kind, Some(&filter)).unwrap();
        assert_eq!((proj.forward_count(), proj.adjoint_count()), (k + 1, k + 1));
    }
}
