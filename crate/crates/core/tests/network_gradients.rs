//! End-to-end gradient check of the network's backward pass against central
//! differences of the total loss, in f64.

use stagereg::data::{generate_phantom, SynthConfig};
use stagereg::losses::{total_loss, total_loss_backward, LossWeights, SmoothNorm};
use stagereg::network::{HeadInit, Network, NetworkConfig, NUM_STAGES};
use stagereg::nn::ParamStore;
use stagereg::volume::{Shape3, Volume};

fn tiny(shape: Shape3) -> NetworkConfig {
    NetworkConfig {
        channels: vec![2, 3, 3, 4],
        in_shape: shape,
        coarse_width: 3,
        rigid_conv_widths: [3, 2],
        rigid_fc_widths: [5, 4],
        refine_width: 2,
        fusion_widths: vec![4, 3],
        head_init: HeadInit::Normal { std: 0.05 },
        ..NetworkConfig::default()
    }
}

fn loss(
    net: &Network,
    p: &ParamStore<f64>,
    f: &Volume<f64>,
    m: &Volume<f64>,
    active: &[bool],
    w: &LossWeights,
) -> f64 {
    let out = net.infer(p, f, m).unwrap();
    total_loss(&out.loss_inputs(), active, w).unwrap().total
}

fn pair(shape: Shape3) -> (Volume<f64>, Volume<f64>) {
    let cfg = |seed| SynthConfig {
        shape,
        max_displacement: 1.0,
        seed,
        ..SynthConfig::default()
    };
    (
        generate_phantom(&cfg(1)).unwrap().0,
        generate_phantom(&cfg(2)).unwrap().0,
    )
}

fn check(cfg: NetworkConfig, active: [bool; NUM_STAGES]) {
    let shape = cfg.in_shape;
    let net = Network::new(cfg).unwrap();
    let mut p = net.init_params::<f64>(11);
    // Break the identity/zero init of the rigid output layers so every path is live.
    for key in ["rigid.rot.fc3.weight", "rigid.trans.fc3.weight"] {
        if p.contains(key) {
            for (i, v) in p.get_mut(key).iter_mut().enumerate() {
                *v = 0.02 * ((i as f64) * 0.7).sin();
            }
        }
    }
    let (f, m) = pair(shape);
    // The L1 terms are checked on their own; here they would add a kink at
    // every voxel whose field component or difference crosses zero.
    let w = LossWeights {
        lambda: 0.1,
        alpha: 0.0,
        beta: 1.0,
        smooth_norm: SmoothNorm::L2,
    };
    let (out, tape) = net.forward(&p, &f, &m).unwrap();
    let sg = total_loss_backward(&out.loss_inputs(), &active, &w).unwrap();
    let grads = net.backward(&p, &out, &tape, &sg).unwrap();

    let keys: Vec<String> = p.keys().cloned().collect();
    let fd = |p: &mut ParamStore<f64>, key: &str, j: usize, h: f64| {
        let orig = p.get(key)[j];
        p.get_mut(key)[j] = orig + h;
        let lp = loss(&net, p, &f, &m, &active, &w);
        p.get_mut(key)[j] = orig - h;
        let lm = loss(&net, p, &f, &m, &active, &w);
        p.get_mut(key)[j] = orig;
        (lp - lm) / (2.0 * h)
    };
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
    for key in &keys {
        let len = p.get(key).len();
        for j in [0, len / 2, len - 1] {
            let a = grads.get(key)[j];
            let n1 = fd(&mut p, key, j, 1e-7);
            let n2 = fd(&mut p, key, j, 1e-6);
            // Round-off of a central difference at this loss scale is ~1e-9.
            let err = (a - n1).abs();
            let rel = err / a.abs().max(n1.abs()).max(1e-6);
            if err > 2e-8 + 1e-4 * a.abs().max(n1.abs()) {
                // Leaky ReLU and sampler cell edges make the loss piecewise
                // smooth; a step that straddles one shows up as disagreement
                // between the two step sizes.
                assert!(
                    err <= 2.0 * (n1 - n2).abs(),
                    "{key}[{j}]: analytic {a:e} vs numeric {n1:e} / {n2:e} (rel {rel:e})"
                );
                kinks += 1;
                continue;
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(
        checked >= 2 * keys.len(),
        "too few informative entries: {checked}"
    );
    assert!(kinks * 10 <= checked, "too many non-smooth probes: {kinks}");
    eprintln!("checked {checked} entries ({kinks} at kinks), worst relative error {worst:e}");
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    check(tiny(Shape3::new(32, 32, 16)), [true; NUM_STAGES]);
}

#[test]
fn gradient_check_without_refine_core_or_rigid() {
    let cfg = NetworkConfig {
        use_refine_core: false,
        use_rigid: false,
        ..tiny(Shape3::new(32, 32, 16))
    };
    check(cfg, [true, true, false, true, true]);
}
