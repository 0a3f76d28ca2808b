use std::f64::consts::PI;
use std::time::Instant;

use imoco_core::nufft::{operator_norm, plan, sense_adjoint, sense_forward, LinearOperator, SenseOperator};
use imoco_core::trajectory::{golden_angle_2d, nyquist_k_max, Trajectory};
use imoco_core::{SensitivityMaps, Shape, C64};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn direct_ndft(traj: &Trajectory, shape: Shape, img: &[C64]) -> Vec<C64> {
    let (ny, nx) = (shape.dims()[0], shape.dims()[1]);
    (0..traj.n_samples())
        .map(|j| {
            let ky = traj.coords[2 * j] as f64;
            let kx = traj.coords[2 * j + 1] as f64;
            let mut acc = C64::new(0.0, 0.0);
            for y in 0..ny {
                for x in 0..nx {
                    let yc = y as f64 - (ny / 2) as f64;
                    let xc = x as f64 - (nx / 2) as f64;
                    acc += img[y * nx + x] * C64::from_polar(1.0, -2.0 * PI * (ky * yc + kx * xc));
                }
            }
            acc
        })
        .collect()
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn l2(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

fn rel_err(a: &[C64], b: &[C64]) -> f64 {
    let d: Vec<C64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2(&d) / l2(b)
}

#[test]
fn forward_matches_direct_dft_32() {
    let shape = Shape::d2(32, 32);
    let traj = golden_angle_2d(200, 16, nyquist_k_max(16)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_vec(shape.len(), &mut rng);
    let t0 = Instant::now();
    let p = plan(&traj, shape).unwrap();
    let y = p.forward_values(&img);
    let elapsed = t0.elapsed().as_secs_f64();
    let e = rel_err(&y, &direct_ndft(&traj, shape, &img));
    assert!(e <= 1e-3, "relative error {e}");
    assert!(elapsed < 5.0);
}

#[test]
fn forward_accuracy_full_band() {
    // samples out to |k| = 0.5 exercise the kernel's worst aliasing
    let shape = Shape::d2(32, 32);
    let traj = golden_angle_2d(100, 24, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_vec(shape.len(), &mut rng);
    let p = plan(&traj, shape).unwrap();
    let e = rel_err(&p.forward_values(&img), &direct_ndft(&traj, shape, &img));
    assert!(e <= 1e-3, "relative error {e}");
}

#[test]
fn centered_delta_gives_unit_samples() {
    let shape = Shape::d2(32, 32);
    let traj = golden_angle_2d(30, 16, nyquist_k_max(16)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let mut img = vec![C64::new(0.0, 0.0); shape.len()];
    img[16 * 32 + 16] = C64::new(1.0, 0.0);
    let y = p.forward_values(&img);
    let ones = vec![C64::new(1.0, 0.0); y.len()];
    assert!(rel_err(&y, &ones) < 1e-3);
}

#[test]
fn dc_sample_is_image_sum() {
    let shape = Shape::d2(32, 32);
    let traj = golden_angle_2d(10, 16, nyquist_k_max(16)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img: Vec<C64> = (0..shape.len()).map(|_| C64::new(rng.gen_range(0.0..1.0), 0.0)).collect();
    let sum: C64 = img.iter().sum();
    let y = p.forward_values(&img);
    assert!((y[0] - sum).norm() / sum.norm() < 1e-3);
}

#[test]
fn adjoint_identity_random_draws() {
    let shape = Shape::d2(32, 32);
    let traj = golden_angle_2d(100, 16, nyquist_k_max(16)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let x = random_vec(shape.len(), &mut rng);
        let y = random_vec(p.n_samples(), &mut rng);
        let lhs = inner(&p.forward_values(&x), &y);
        let rhs = inner(&x, &p.adjoint_values(&y, None));
        assert!((lhs - rhs).norm() <= 1e-5 * l2(&x) * l2(&y));
    }
}

#[test]
fn forward_is_linear() {
    let shape = Shape::d2(16, 16);
    let traj = golden_angle_2d(40, 8, nyquist_k_max(8)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_vec(shape.len(), &mut rng);
    let y = random_vec(shape.len(), &mut rng);
    let a = C64::new(0.7, -1.3);
    let comb: Vec<C64> = x.iter().zip(&y).map(|(u, v)| a * u + v).collect();
    let lhs = p.forward_values(&comb);
    let fx = p.forward_values(&x);
    let fy = p.forward_values(&y);
    let rhs: Vec<C64> = fx.iter().zip(&fy).map(|(u, v)| a * u + v).collect();
    assert!(rel_err(&lhs, &rhs) < 1e-10);
}

#[test]
fn dcf_psf_peaks_at_center() {
    let shape = Shape::d2(64, 64);
    let traj = golden_angle_2d(400, 32, nyquist_k_max(32)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let ones = vec![C64::new(1.0, 0.0); p.n_samples()];
    let psf: Vec<f64> = p.adjoint_values(&ones, Some(&traj.dcf)).iter().map(|v| v.norm()).collect();
    let c = 32 * 64 + 32;
    let (imax, peak) = psf.iter().enumerate().fold((0, 0.0), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
    assert_eq!(imax, c);
    // next sidelobe: largest value outside the main lobe (radius 2)
    let side = (0..psf.len())
        .filter(|&i| {
            let (y, x) = (i / 64, i % 64);
            let r2 = (y as i64 - 32).pow(2) + (x as i64 - 32).pow(2);
            r2 > 4
        })
        .map(|i| psf[i])
        .fold(0.0, f64::max);
    assert!(peak / side >= 5.0, "peak/sidelobe {}", peak / side);
}

#[test]
fn gridding_preserves_intensity_of_extended_object() {
    let shape = Shape::d2(64, 64);
    let traj = golden_angle_2d(400, 32, nyquist_k_max(32)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let inside = |y: f64, x: f64, ay: f64, ax: f64| (y / ay).powi(2) + (x / ax).powi(2) < 1.0;
    let coord = |i: usize| ((i / 64) as f64 - 32.0, (i % 64) as f64 - 32.0);
    let obj: Vec<C64> = (0..shape.len())
        .map(|i| {
            let (y, x) = coord(i);
            C64::new(if inside(y, x, 20.0, 16.0) { 1.0 } else { 0.0 }, 0.0)
        })
        .collect();
    let data = direct_ndft(&traj, shape, &obj);
    let rec = p.adjoint_values(&data, Some(&traj.dcf));
    let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
    for (i, v) in rec.iter().enumerate() {
        let (y, x) = coord(i);
        if inside(y, x, 17.0, 13.0) {
            si += v.re;
            ni += 1;
        } else if !inside(y, x, 24.0, 20.0) {
            so += v.re;
            no += 1;
        }
    }
    let (mi, mo) = (si / ni as f64, so / no as f64);
    assert!((mi - 1.0).abs() < 0.08, "interior mean {mi}");
    assert!(mo.abs() < 0.02, "background mean {mo}");
}

fn smooth_maps(shape: Shape, n: usize) -> SensitivityMaps {
    let (ny, nx) = (shape.dims()[0], shape.dims()[1]);
    let maps = (0..n)
        .map(|c| {
            let ang = 2.0 * PI * c as f64 / n as f64;
            (0..shape.len())
                .map(|i| {
                    let y = (i / nx) as f64 / ny as f64 - 0.5;
                    let x = (i % nx) as f64 / nx as f64 - 0.5;
                    let d2 = (y - 0.5 * ang.sin()).powi(2) + (x - 0.5 * ang.cos()).powi(2);
                    C64::from_polar(0.5 * (-d2 / 0.3).exp(), 2.0 * x + ang)
                })
                .collect()
        })
        .collect();
    SensitivityMaps::new(shape, maps).unwrap()
}

#[test]
fn single_uniform_coil_equals_plain_transform() {
    let shape = Shape::d2(16, 16);
    let traj = golden_angle_2d(30, 8, nyquist_k_max(8)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let maps = SensitivityMaps::uniform(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_vec(shape.len(), &mut rng);
    let f = sense_forward(&p, &maps, &x).unwrap();
    assert_eq!(f[0], p.forward_values(&x));
    let y = random_vec(p.n_samples(), &mut rng);
    let a = sense_adjoint(&p, &maps, &[y.clone()], None).unwrap();
    assert!(rel_err(&a, &p.adjoint_values(&y, None)) < 1e-14);
}

#[test]
fn sense_adjoint_identity_and_linearity() {
    let shape = Shape::d2(32, 32);
    let traj = golden_angle_2d(100, 16, nyquist_k_max(16)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let maps = smooth_maps(shape, 4);
    let op = SenseOperator { plan: &p, maps: &maps, weights: Some(&traj.dcf) };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let x = random_vec(op.domain_len(), &mut rng);
        let y = random_vec(op.range_len(), &mut rng);
        let lhs = inner(&op.forward(&x), &y);
        let rhs = inner(&x, &op.adjoint(&y));
        assert!((lhs - rhs).norm() <= 1e-5 * l2(&x) * l2(&y));
    }
    let x = random_vec(shape.len(), &mut rng);
    let z = random_vec(shape.len(), &mut rng);
    let a = C64::new(-2.0, 0.5);
    let comb: Vec<C64> = x.iter().zip(&z).map(|(u, v)| a * u + v).collect();
    let lhs = sense_forward(&p, &maps, &comb).unwrap().concat();
    let fx = sense_forward(&p, &maps, &x).unwrap().concat();
    let fz = sense_forward(&p, &maps, &z).unwrap().concat();
    let rhs: Vec<C64> = fx.iter().zip(&fz).map(|(u, v)| a * u + v).collect();
    assert!(rel_err(&lhs, &rhs) < 1e-10);
    assert!(sense_adjoint(&p, &maps, &[vec![C64::new(0.0, 0.0); p.n_samples()]], None).is_err());
}

#[test]
fn operator_norm_matches_dense_singular_value() {
    let shape = Shape::d2(16, 16);
    let traj = golden_angle_2d(40, 8, nyquist_k_max(8)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let maps = SensitivityMaps::uniform(shape);
    let op = SenseOperator { plan: &p, maps: &maps, weights: None };
    let n = shape.len();
    let m = p.n_samples();
    let mut dense = DMatrix::<C64>::zeros(m, n);
    for j in 0..n {
        let mut e = vec![C64::new(0.0, 0.0); n];
        e[j] = C64::new(1.0, 0.0);
        let col = p.forward_values(&e);
        for i in 0..m {
            dense[(i, j)] = col[i];
        }
    }
    let smax = dense.singular_values().max();
    let est = operator_norm(&op, 30, 1);
    assert!((est - smax).abs() / smax < 0.02, "power {est} dense {smax}");
}

#[test]
fn results_independent_of_thread_count() {
    let shape = Shape::d2(32, 32);
    let traj = golden_angle_2d(600, 16, nyquist_k_max(16)).unwrap();
    let p = plan(&traj, shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y = random_vec(p.n_samples(), &mut rng);
    let run = |t: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .unwrap()
            .install(|| p.adjoint_values(&y, Some(&traj.dcf)))
    };
    let a = run(1);
    let b = run(3);
    assert!(rel_err(&a, &b) <= 1e-10);
    assert_eq!(a, run(1));
}
