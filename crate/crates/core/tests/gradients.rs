mod common;

use common::{block_grad_check, distinct, grad_check, project, random, rng, FD_TOL};
use pgh2net::blocks::{
    channel_harmonization, channel_harmonization_block, hegm, prior_aggregation, sandwich_module, spatial_harmonization, ChParams, PaParams,
    SandwichParams, ShParams,
};
use pgh2net::network::forward_graph;
use pgh2net::objectives::{loss_frequency, loss_ssim, loss_total, ssim_map_graph, FrequencyNorm, LossWeights, SsimConfig};
use pgh2net::params::{Bound, Initializer, ParamStore};
use pgh2net::{ArchConfig, BlockFlags, Graph, Padding, PriorWindow, Shape, Tensor, Var};

fn block_check(name: &str, x: Tensor, declare: impl Fn(&mut ParamStore), f: impl Fn(&mut Graph, &Bound, Var) -> Var) {
    assert_close(name, block_grad_check(x, declare, f));
}

fn assert_close(name: &str, err: f64) {
    assert!(err < FD_TOL, "{name}: relative error {err:.3e}");
}

fn unary(name: &str, x: Tensor, op: impl Fn(&mut Graph, Var) -> Var) {
    let err = grad_check(&[x], |g, v| {
        let y = op(g, v[0]);
        project(g, y, 7)
    });
    assert_close(name, err);
}

fn binary(name: &str, a: Tensor, b: Tensor, op: impl Fn(&mut Graph, Var, Var) -> Var) {
    let err = grad_check(&[a, b], |g, v| {
        let y = op(g, v[0], v[1]);
        project(g, y, 11)
    });
    assert_close(name, err);
}

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    let s = Shape::new(2, 3, 4, 5);
    let x = random(&mut r, s, -2.0, 2.0);
    unary("gelu", x.clone(), |g, v| g.gelu(v).unwrap());
    unary("silu", x.clone(), |g, v| g.silu(v).unwrap());
    unary("sigmoid", x.clone(), |g, v| g.sigmoid(v).unwrap());
    unary("scale", x.clone(), |g, v| g.scale(v, -1.7).unwrap());
    unary("add_scalar", x.clone(), |g, v| g.add_scalar(v, 0.3).unwrap());
    unary("abs", distinct(&mut r, s, 0.01), |g, v| g.abs(v).unwrap());
    unary("sqrt", random(&mut r, s, 0.2, 2.0), |g, v| g.sqrt(v).unwrap());
}

#[test]
fn broadcasting_binary_ops() {
    let mut r = rng(2);
    let full = Shape::new(2, 3, 4, 4);
    for other in [full, Shape::new(1, 3, 1, 1), Shape::new(2, 1, 4, 4), Shape::new(2, 3, 1, 1)] {
        let a = random(&mut r, full, -1.0, 1.0);
        let b = random(&mut r, other, 0.5, 1.5);
        binary("add", a.clone(), b.clone(), |g, x, y| g.add(x, y).unwrap());
        binary("sub", b.clone(), a.clone(), |g, x, y| g.sub(x, y).unwrap());
        binary("mul", a.clone(), b.clone(), |g, x, y| g.mul(x, y).unwrap());
        binary("div", a.clone(), b.clone(), |g, x, y| g.div(x, y).unwrap());
    }
}

#[test]
fn reductions_and_resampling() {
    let mut r = rng(3);
    let x = random(&mut r, Shape::new(2, 3, 4, 6), -1.0, 1.0);
    unary("gap", x.clone(), |g, v| g.gap(v).unwrap());
    unary("channel_mean", x.clone(), |g, v| g.channel_mean(v).unwrap());
    unary("up2", x.clone(), |g, v| g.up2(v).unwrap());
    unary("down2", x.clone(), |g, v| g.down2(v).unwrap());
    unary("narrow", x.clone(), |g, v| g.narrow(v, 1, 2).unwrap());
    unary("sum", x.clone(), |g, v| g.sum(v).unwrap());
    unary("mean", x.clone(), |g, v| g.mean(v).unwrap());
    binary("concat", x.clone(), random(&mut r, Shape::new(2, 2, 4, 6), -1.0, 1.0), |g, a, b| {
        g.concat(&[a, b, a]).unwrap()
    });
}

#[test]
fn layer_norm() {
    let mut r = rng(4);
    let x = random(&mut r, Shape::new(2, 4, 3, 3), -1.0, 1.0);
    let scale = random(&mut r, Shape::new(1, 4, 1, 1), 0.5, 1.5);
    let shift = random(&mut r, Shape::new(1, 4, 1, 1), -0.5, 0.5);
    let err = grad_check(&[x, scale, shift], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        project(g, y, 5)
    });
    assert_close("layer_norm", err);
}

#[test]
fn convolutions() {
    let mut r = rng(5);
    for (k, stride, padding) in [
        (1, 1, Padding::Valid),
        (3, 1, Padding::Zero),
        (3, 1, Padding::Reflect),
        (3, 2, Padding::Reflect),
        (3, 2, Padding::Zero),
        (5, 1, Padding::Valid),
    ] {
        let x = random(&mut r, Shape::new(2, 3, 6, 6), -1.0, 1.0);
        let w = random(&mut r, Shape::new(4, 3, k, k), -0.5, 0.5);
        let b = random(&mut r, Shape::new(1, 4, 1, 1), -0.5, 0.5);
        let err = grad_check(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap();
            project(g, y, 9)
        });
        assert_close(&format!("conv k{k} s{stride} {padding:?}"), err);
    }
    for (k, padding) in [(3, Padding::Reflect), (5, Padding::Reflect), (3, Padding::Zero), (3, Padding::Valid)] {
        let x = random(&mut r, Shape::new(2, 3, 7, 6), -1.0, 1.0);
        let w = random(&mut r, Shape::new(3, 1, k, k), -0.5, 0.5);
        let b = random(&mut r, Shape::new(1, 3, 1, 1), -0.5, 0.5);
        let err = grad_check(&[x, w, b], |g, v| {
            let y = g.dwconv2d(v[0], v[1], Some(v[2]), padding).unwrap();
            project(g, y, 13)
        });
        assert_close(&format!("dwconv k{k} {padding:?}"), err);
    }
}

#[test]
fn channel_extrema() {
    let mut r = rng(6);
    let window = PriorWindow::new(3).unwrap();
    let x = distinct(&mut r, Shape::new(2, 3, 5, 5), 0.01);
    unary("dark_channel", x.clone(), |g, v| g.dark_channel(v, window).unwrap());
    unary("bright_channel", x, |g, v| g.bright_channel(v, window).unwrap());
}

#[test]
fn fft_magnitudes_and_parts() {
    let mut r = rng(7);
    let x = random(&mut r, Shape::new(1, 2, 4, 8), -1.0, 1.0);
    unary("fft2", x, |g, v| g.fft2(v).unwrap());
}

#[test]
fn spatial_harmonization_block() {
    let x = random(&mut rng(8), Shape::new(2, 4, 5, 5), -1.0, 1.0);
    block_check(
        "sh",
        x,
        |s| ShParams::declare(s, "sh", 4, &mut Initializer::new(0)).unwrap(),
        |g, b, x| spatial_harmonization(g, x, &ShParams::bind(b, "sh").unwrap()).unwrap(),
    );
}

#[test]
fn prior_aggregation_variants() {
    let window = PriorWindow::new(3).unwrap();
    for (priors, gating) in [(true, true), (true, false), (false, true), (false, false)] {
        let x = random(&mut rng(9), Shape::new(2, 3, 6, 6), -1.0, 1.0);
        block_check(
            &format!("pa priors={priors} gating={gating}"),
            x,
            |s| PaParams::declare(s, "pa", 3, priors, gating, &mut Initializer::new(0)).unwrap(),
            |g, b, x| prior_aggregation(g, x, &PaParams::bind(b, "pa", priors, gating, window).unwrap()).unwrap(),
        );
    }
}

#[test]
fn channel_harmonization_inner_and_block() {
    let mut r = rng(10);
    let y = random(&mut r, Shape::new(2, 4, 3, 3), -1.0, 1.0);
    let w = random(&mut r, Shape::new(1, 4, 1, 1), -0.5, 0.5);
    let gamma = random(&mut r, Shape::new(1, 4, 1, 1), -0.5, 0.5);
    let err = grad_check(&[y, w, gamma], |g, v| {
        let z = channel_harmonization(g, v[0], v[1], v[2]).unwrap();
        project(g, z, 3)
    });
    assert_close("ch inner", err);

    let x = random(&mut r, Shape::new(2, 4, 5, 5), -1.0, 1.0);
    block_check(
        "ch",
        x,
        |s| ChParams::declare(s, "ch", 4, &mut Initializer::new(0)).unwrap(),
        |g, b, x| channel_harmonization_block(g, x, &ChParams::bind(b, "ch").unwrap()).unwrap(),
    );
}

#[test]
fn sandwich() {
    let window = PriorWindow::new(3).unwrap();
    let x = distinct(&mut rng(11), Shape::new(2, 3, 5, 5), 0.01);
    block_check(
        "sm",
        x,
        |s| SandwichParams::declare(s, "sm", 3, &mut Initializer::new(0)).unwrap(),
        |g, b, x| sandwich_module(g, x, &SandwichParams::bind(b, "sm", window).unwrap()).unwrap(),
    );
}

#[test]
fn histogram_guidance() {
    // 144 values on a 0.01 grid never sit within a step of a 64-bin edge
    let x = distinct(&mut rng(12), Shape::new(1, 4, 6, 6), 0.01);
    unary("hegm", x, |g, v| hegm(g, v, 64).unwrap());
}

fn pyramid(r: &mut impl rand::Rng, n: usize) -> Vec<Tensor> {
    [16, 8, 4].iter().map(|&s| random(r, Shape::new(n, 3, s, s), 0.05, 0.95)).collect()
}

#[test]
fn ssim_map() {
    let mut r = rng(13);
    let a = random(&mut r, Shape::new(1, 2, 8, 8), 0.0, 1.0);
    let b = random(&mut r, Shape::new(1, 2, 8, 8), 0.0, 1.0);
    binary("ssim map", a, b, |g, x, y| ssim_map_graph(g, x, y, &SsimConfig::default()).unwrap());
}

#[test]
fn loss_terms() {
    let mut r = rng(14);
    let preds = pyramid(&mut r, 2);
    let gts: Vec<Tensor> = pyramid(&mut r, 2);
    let with_gts = |f: &dyn Fn(&mut Graph, &[Var], &[Var]) -> Var| {
        grad_check(&preds, |g, v| {
            let t: Vec<Var> = gts.iter().map(|t| g.constant(t.clone())).collect();
            f(g, v, &t)
        })
    };
    assert_close("frequency parts", with_gts(&|g, p, t| loss_frequency(g, p, t, FrequencyNorm::Parts).unwrap()));
    assert_close("frequency magnitude", with_gts(&|g, p, t| loss_frequency(g, p, t, FrequencyNorm::Magnitude).unwrap()));
    assert_close("ssim", with_gts(&|g, p, t| loss_ssim(g, p, t).unwrap()));
    let w = LossWeights::default();
    let window = PriorWindow::new(3).unwrap();
    assert_close(
        "total",
        with_gts(&|g, p, t| loss_total(g, p, t, &w, FrequencyNorm::Parts, window).unwrap().total),
    );
}

#[test]
fn tiny_network_end_to_end() {
    let mut arch = ArchConfig {
        base_width: 2,
        enc_blocks: [1, 1, 1],
        dec_blocks: [1, 1],
        ..ArchConfig::default()
    };
    arch.flags = BlockFlags {
        hegm: false,
        ..BlockFlags::default()
    };
    let model = pgh2net::build(&arch, 0).unwrap();
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut r = rng(15);
    let mut inputs = vec![random(&mut r, Shape::new(1, 3, 4, 4), 0.0, 1.0)];
    for n in &names {
        inputs.push(random(&mut r, model.params.get(n).unwrap().shape(), -0.5, 0.5));
    }
    let err = grad_check(&inputs, |g, v| {
        let bound: Bound = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let outs = forward_graph(g, &bound, &arch, v[0]).unwrap();
        let parts: Vec<Var> = outs.iter().enumerate().map(|(i, &o)| project(g, o, 20 + i as u64)).collect();
        let s = g.add(parts[0], parts[1]).unwrap();
        g.add(s, parts[2]).unwrap()
    });
    assert_close("network", err);
}
