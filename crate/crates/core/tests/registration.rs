use imoco_core::phantom::{deform, make_phantom, true_field, LUNG};
use imoco_core::recon::MotionResolvedImages;
use imoco_core::registration::{demons, register_all, PyramidSchedule};
use imoco_core::warp::{invert_field, upsample_field, warp};
use imoco_core::{GridImage, MotionField, Shape};

fn endpoint_error(u: &MotionField, v: &MotionField, mask: &[bool]) -> f64 {
    let nd = u.shape.ndim();
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..u.shape.len() {
        if mask[i] {
            let d2: f64 = (0..nd).map(|a| (u.displacement[a][i] - v.displacement[a][i]).powi(2)).sum();
            s += d2.sqrt();
            n += 1.0;
        }
    }
    s / n
}

fn rmse(a: &GridImage, b: &GridImage) -> f64 {
    let n = a.values.len() as f64;
    (a.values.iter().zip(&b.values).map(|(x, y)| (x.norm() - y.norm()).powi(2)).sum::<f64>() / n).sqrt()
}

#[test]
fn eight_voxel_excursion_recovered_in_lung() {
    let p = make_phantom(Shape::d2(128, 128), vec![1.0, 1.0]).unwrap();
    let lung = p.mask(LUNG);
    let (insp, field) = deform(&p.reference_image, 8.0).unwrap();
    let sched = PyramidSchedule::default();

    // reference onto the deformed state recovers the analytic field itself
    let u = demons(&p.reference_image, &insp, &sched).unwrap();
    let mask_insp: Vec<bool> = {
        let (lab, _) = deform(&p.reference_image.with_values(lung.iter().map(|&l| (l as u8 as f64).into()).collect()), 8.0).unwrap();
        lab.values.iter().map(|v| v.re > 0.5).collect()
    };
    let e1 = endpoint_error(&u, &field, &mask_insp);
    eprintln!("forward endpoint error {e1:.3}");
    assert!(e1 <= 0.5, "forward endpoint error {e1}");

    // deformed state onto the reference recovers the inverse field
    let v = demons(&insp, &p.reference_image, &sched).unwrap();
    let truth = invert_field(&field, 30);
    let e2 = endpoint_error(&v, &truth, &lung);
    eprintln!("inverse endpoint error {e2:.3}");
    assert!(e2 <= 0.5, "inverse endpoint error {e2}");
}

#[test]
fn registration_reduces_rmse_between_states() {
    let p = make_phantom(Shape::d2(96, 96), vec![1.0, 1.0]).unwrap();
    let states: Vec<GridImage> = [0.0, 2.0, 4.0, 6.0].iter().map(|&a| deform(&p.reference_image, a).unwrap().0).collect();
    let imgs = MotionResolvedImages { images: states.clone() };
    let fields = register_all(&imgs, 0, &PyramidSchedule::default()).unwrap();
    for k in 1..states.len() {
        let before = rmse(&states[k], &states[0]);
        let after = rmse(&warp(&states[k], &fields[k]).unwrap(), &states[0]);
        assert!(after < 0.6 * before, "state {k}: {before} -> {after}");
    }
}

#[test]
fn diaphragm_displacement_monotone_in_state() {
    let p = make_phantom(Shape::d2(96, 96), vec![1.0, 1.0]).unwrap();
    let amps = [0.0, 1.5, 3.0, 4.5, 6.0];
    let imgs = MotionResolvedImages {
        images: amps.iter().map(|&a| deform(&p.reference_image, a).unwrap().0).collect(),
    };
    let fields = register_all(&imgs, 0, &PyramidSchedule::default()).unwrap();
    // sample just above the dome along the central column; u points toward the reference
    let s = imgs.shape();
    let probe: Vec<usize> = (0..s.len())
        .filter(|&i| {
            let c = s.coords(i);
            let y = true_field(s, 1.0).displacement[0][i];
            c[1] == s.dims()[1] / 2 && y.abs() > 0.5
        })
        .collect();
    assert!(!probe.is_empty());
    let mean_u: Vec<f64> = fields
        .iter()
        .map(|f| probe.iter().map(|&i| f.displacement[0][i]).sum::<f64>() / probe.len() as f64)
        .collect();
    for w in mean_u.windows(2) {
        assert!(w[1] > w[0], "not monotone: {mean_u:?}");
    }
}

#[test]
fn coarse_field_upsampled_matches_fine_truth() {
    let fine = Shape::d2(96, 96);
    let coarse = Shape::d2(64, 64);
    let a = 6.0;
    let up = upsample_field(&true_field(coarse, a * 64.0 / 96.0), fine).unwrap();
    let truth = true_field(fine, a);
    let all = vec![true; fine.len()];
    let e = endpoint_error(&up, &truth, &all);
    assert!(e <= 0.2, "upsampling error {e}");
}
