mod common;

use bevfuse_core::autodiff::{Graph, Mat};
use bevfuse_core::radar::{embed_saliency, gated_unit, SaliencyGrid};
use bevfuse_core::BevGridSpec;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_parameter_group_matches_central_differences() {
    check_radar_parts_have_gradients().unwrap();
    let counts = check_gradients(&GRADIENT_GROUPS).unwrap();
    assert_eq!(counts.len(), GRADIENT_GROUPS.len());
    assert!(counts.iter().all(|(_, n)| *n > 0));
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// The gated unit in isolation, perturbing its input embedding as well as
/// its weights.
#[test]
fn gated_unit_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = BevGridSpec::new(2, 4, 1.0).unwrap();
    let mut sal = SaliencyGrid::zeros(&grid);
    sal.counts = vec![0, 1, 2, 5, 3, 1, 4, 2];
    let c = 4;
    let mut inputs = vec![rand_mat(&mut rng, 4, c), rand_mat(&mut rng, c, c), rand_mat(&mut rng, 1, c), rand_mat(&mut rng, c, c), rand_mat(&mut rng, 1, c)];
    let probe = rand_mat(&mut rng, 8, c);
    let eval = |inputs: &[Mat]| {
        let mut g = Graph::new();
        let v: Vec<_> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let e = embed_saliency(&mut g, &sal, v[0]);
        let out = gated_unit(&mut g, e, v[1], v[2], v[3], v[4]);
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p);
        let s = g.sum(prod);
        (g.scalar(s), g.backward(s), v)
    };
    let (_, grads, vars) = eval(&inputs);
    let analytic: Vec<Mat> = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
    let h = 1e-6;
    for k in 0..inputs.len() {
        for idx in 0..inputs[k].data.len() {
            let orig = inputs[k].data[idx];
            inputs[k].data[idx] = orig + h;
            let up = eval(&inputs).0;
            inputs[k].data[idx] = orig - h;
            let down = eval(&inputs).0;
            inputs[k].data[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[k].data[idx];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-9, "input {k}[{idx}]: {fd} vs {an}");
        }
    }
    // the clamped row of the table (count 5 > K = 3) receives the gradient
    assert!(analytic[0].row(3).iter().any(|g| *g != 0.0));
}
