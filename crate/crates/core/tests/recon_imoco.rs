use imoco_core::imoco::{imoco_blocks, imoco_solve, moco_average, state_warps, TgvParams};
use imoco_core::metrics::{masked_nrmse, nrmse};
use imoco_core::nufft::LinearOperator;
use imoco_core::phantom::{make_phantom, simulate_acquisition, true_field, PhantomGroundTruth};
use imoco_core::recon::{cg_sense, nongated_recon, xd_grasp, MotionResolvedImages, RegularizerSpec, StateData, Variant};
use imoco_core::solver::{DataMode, SolverOptions, Stacked, StopRule};
use imoco_core::trajectory::{golden_angle_2d, nyquist_k_max, Trajectory};
use imoco_core::{GridImage, MotionField, RadialKSpace, Shape, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn static_acquisition(n_spokes: usize, sigma: f64) -> (PhantomGroundTruth, RadialKSpace, Trajectory) {
    let shape = Shape::d2(64, 64);
    let mut gt = make_phantom(shape, vec![1.0, 1.0]).unwrap().with_coils(4, 3).unwrap();
    gt.waveform = vec![0.0; n_spokes];
    gt.times = (0..n_spokes).map(|s| s as f64 * 0.015).collect();
    gt.corrupted = vec![false; n_spokes];
    let traj = golden_angle_2d(n_spokes, 32, nyquist_k_max(32)).unwrap();
    let sim = simulate_acquisition(&gt, &traj, sigma, 5).unwrap();
    (gt, sim.kspace, traj)
}

fn long_run() -> SolverOptions {
    SolverOptions { max_iters: 1500, tol: 1e-7, stop: StopRule::PrimalChange, ..SolverOptions::default() }
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

fn random_field(shape: Shape, amp: f64, rng: &mut ChaCha8Rng) -> MotionField {
    let d = (0..shape.ndim()).map(|_| (0..shape.len()).map(|_| rng.gen_range(-amp..amp)).collect()).collect();
    MotionField::new(shape, d).unwrap()
}

#[test]
fn single_state_identity_imoco_matches_cg_sense() {
    let (gt, data, traj) = static_acquisition(400, 0.0);
    let all: Vec<usize> = (0..data.n_spokes).collect();
    let st = StateData::gather(&data, &traj, &all, 1.0).unwrap();
    let oracle = cg_sense(&st, &gt.coil_maps, &st.sqrt_dcf(), 200, 1e-12).unwrap();
    let zero = vec![MotionField::zeros(gt.shape())];
    let (x, report) = imoco_solve(&[st.clone()], &gt.coil_maps, &zero, 0.0, &TgvParams::default(), &long_run(), None).unwrap();
    let e = nrmse(&x.values, &oracle.values);
    assert!(e <= 0.01, "imoco vs CG NRMSE {e}");
    assert!(report.final_objective() <= report.initial_objective());

    let spec = RegularizerSpec { variant: Variant::S1, lambda_s: 0.0, lambda_t: 0.0 };
    let (mr, rep2) = xd_grasp(&[st], &gt.coil_maps, &spec, &long_run()).unwrap();
    let e2 = nrmse(&mr.images[0].values, &oracle.values);
    assert!(e2 <= 0.01, "xd_grasp vs CG NRMSE {e2}");
    assert!(rep2.final_objective() <= rep2.initial_objective());
}

#[test]
fn identical_states_collapse_to_pooled_solve() {
    let (gt, data, traj) = static_acquisition(160, 0.002);
    let all: Vec<usize> = (0..data.n_spokes).collect();
    let st = StateData::gather(&data, &traj, &all, 1.0).unwrap();
    let opts = SolverOptions { max_iters: 40, tol: 0.0, ..SolverOptions::default() };
    let tgv = TgvParams::default();
    let one = vec![MotionField::zeros(gt.shape())];
    let (x1, _) = imoco_solve(&[st.clone()], &gt.coil_maps, &one, 0.05, &tgv, &opts, None).unwrap();
    let three = vec![MotionField::zeros(gt.shape()); 3];
    let copies = vec![st.clone(), st.clone(), st];
    let (x3, _) = imoco_solve(&copies, &gt.coil_maps, &three, 0.05, &tgv, &opts, None).unwrap();
    let e = nrmse(&x3.values, &x1.values);
    assert!(e <= 1e-4, "collapse NRMSE {e}");
}

#[test]
fn stacked_imoco_operator_adjoint() {
    let (gt, data, traj) = static_acquisition(90, 0.0);
    let shape = gt.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let states: Vec<StateData> = (0..3)
        .map(|k| StateData::gather(&data, &traj, &(k * 30..(k + 1) * 30).collect::<Vec<_>>(), 1.0).unwrap())
        .collect();
    let warps: Vec<MotionField> = (0..3).map(|_| random_field(shape, 2.0, &mut rng)).collect();
    let (blocks, n) = imoco_blocks(&states, &gt.coil_maps, &warps, 0.05, &TgvParams::default()).unwrap();
    let op = Stacked { blocks: &blocks, n };
    for _ in 0..10 {
        let x = random_vec(op.domain_len(), &mut rng);
        let y = random_vec(op.range_len(), &mut rng);
        let lhs: C64 = op.forward(&x).iter().zip(&y).map(|(a, b)| a.conj() * b).sum();
        let rhs: C64 = x.iter().zip(op.adjoint(&y)).map(|(a, b)| a.conj() * b).sum();
        let scale = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt() * y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!((lhs - rhs).norm() <= 1e-5 * scale, "adjoint mismatch {}", (lhs - rhs).norm() / scale);
    }
}

#[test]
fn zero_data_gives_zero_image() {
    let (gt, mut data, traj) = static_acquisition(60, 0.0);
    data.samples.iter_mut().for_each(|v| *v = Default::default());
    let all: Vec<usize> = (0..data.n_spokes).collect();
    let st = StateData::gather(&data, &traj, &all, 1.0).unwrap();
    let zero = vec![MotionField::zeros(gt.shape())];
    let opts = SolverOptions { max_iters: 20, ..SolverOptions::default() };
    let (x, _) = imoco_solve(&[st], &gt.coil_maps, &zero, 0.05, &TgvParams::default(), &opts, None).unwrap();
    assert!(x.values.iter().all(|v| v.norm() == 0.0));
}

#[test]
fn nongated_static_phantom_resembles_reference() {
    let (gt, data, traj) = static_acquisition(400, 0.0);
    let img = nongated_recon(&data, &traj, &gt.coil_maps, None).unwrap();
    let body = gt.body_mask();
    let e = masked_nrmse(&img, &gt.reference_image, &body).unwrap();
    assert!(e <= 0.1, "masked NRMSE {e}");
}

#[test]
fn motion_compensation_recovers_reference_from_warped_states() {
    // two noiseless states: the reference and an inspiratory deformation
    let shape = Shape::d2(64, 64);
    let gt = make_phantom(shape, vec![1.0, 1.0]).unwrap().with_coils(4, 3).unwrap();
    let n_spokes = 400;
    let traj = golden_angle_2d(n_spokes, 32, nyquist_k_max(32)).unwrap();
    let mut g2 = gt.clone();
    g2.waveform = (0..n_spokes).map(|s| if s % 2 == 0 { 0.0 } else { 4.0 }).collect();
    g2.times = (0..n_spokes).map(|s| s as f64 * 0.015).collect();
    g2.corrupted = vec![false; n_spokes];
    let data = simulate_acquisition(&g2, &traj, 0.0, 1).unwrap().kspace;
    let even: Vec<usize> = (0..n_spokes).step_by(2).collect();
    let odd: Vec<usize> = (1..n_spokes).step_by(2).collect();
    let states = vec![StateData::gather(&data, &traj, &even, 1.0).unwrap(), StateData::gather(&data, &traj, &odd, 1.0).unwrap()];
    let warps = vec![MotionField::zeros(shape), true_field(shape, 4.0)];
    let opts = SolverOptions { max_iters: 100, ..SolverOptions::default() };
    let (x, report) = imoco_solve(&states, &gt.coil_maps, &warps, 0.0, &TgvParams::default(), &opts, None).unwrap();
    assert!(report.final_objective() < report.initial_objective());
    let body = gt.body_mask();
    let e_moco = masked_nrmse(&x, &gt.reference_image, &body).unwrap();
    let blurred = nongated_recon(&data, &traj, &gt.coil_maps, None).unwrap();
    let e_ng = masked_nrmse(&blurred, &gt.reference_image, &body).unwrap();
    assert!(e_moco < e_ng, "iMoCo {e_moco} vs nongated {e_ng}");
}

#[test]
fn moco_average_of_identical_states_is_identity() {
    let gt = make_phantom(Shape::d2(64, 64), vec![1.0, 1.0]).unwrap();
    let imgs = MotionResolvedImages { images: vec![gt.reference_image.clone(); 3] };
    let zero = vec![MotionField::zeros(gt.shape()); 3];
    let avg = moco_average(&imgs, &zero).unwrap();
    assert!(nrmse(&avg.values, &gt.reference_image.values) < 1e-12);
    let single = MotionResolvedImages { images: vec![gt.reference_image.clone()] };
    let avg1 = moco_average(&single, &zero[..1]).unwrap();
    assert_eq!(avg1.values, gt.reference_image.values);
    assert!(moco_average(&imgs, &zero[..2]).is_err());
    // registered fields are inverted into state operators; zero stays zero
    assert_eq!(state_warps(&zero)[0].max_abs(), 0.0);
    let _: &GridImage = &avg;
}

#[test]
fn toeplitz_and_dual_data_modes_agree() {
    let (gt, data, traj) = static_acquisition(200, 0.002);
    let states: Vec<StateData> = (0..2)
        .map(|k| StateData::gather(&data, &traj, &(k * 100..(k + 1) * 100).collect::<Vec<_>>(), 1.0).unwrap())
        .collect();
    let spec = RegularizerSpec { variant: Variant::S3, lambda_s: 0.01, lambda_t: 0.02 };
    let run = |mode| SolverOptions { max_iters: 800, tol: 1e-7, data_mode: mode, ..SolverOptions::default() };
    let (a, _) = xd_grasp(&states, &gt.coil_maps, &spec, &run(DataMode::Dual)).unwrap();
    let (b, rb) = xd_grasp(&states, &gt.coil_maps, &spec, &run(DataMode::Toeplitz)).unwrap();
    assert!(rb.final_objective() < rb.initial_objective());
    for (x, y) in a.images.iter().zip(&b.images) {
        let e = nrmse(&y.values, &x.values);
        assert!(e <= 0.01, "xd_grasp mode NRMSE {e}");
    }
    let warps = vec![MotionField::zeros(gt.shape()), true_field(gt.shape(), 2.0)];
    let tgv = TgvParams::default();
    let (c, _) = imoco_solve(&states, &gt.coil_maps, &warps, 0.02, &tgv, &run(DataMode::Dual), None).unwrap();
    let (d, _) = imoco_solve(&states, &gt.coil_maps, &warps, 0.02, &tgv, &run(DataMode::Toeplitz), None).unwrap();
    let e = nrmse(&d.values, &c.values);
    assert!(e <= 0.01, "imoco mode NRMSE {e}");
}
