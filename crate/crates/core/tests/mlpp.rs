mod common;

use common::*;
use phnet_core::mlpp::*;
use phnet_core::nn::Linear;
use phnet_core::ParamStore;
use phnet_tensor::{grad_check, grad_check_coords, Graph, Tensor};
use rand::Rng;

fn set_linear(store: &mut ParamStore<f64>, fc: &Linear, w: Tensor<f64>) {
    store.set_value(fc.weight, w).unwrap();
    if let Some(b) = fc.bias {
        store.set_value(b, Tensor::zeros(&[fc.out_features])).unwrap();
    }
}

fn ip_setup(c: usize, seed: u64) -> (ParamStore<f64>, IpMlp) {
    let mut store = ParamStore::new();
    let ip = IpMlp::new(&mut store, &mut rng(seed), "ip", c);
    randomize(&mut store, seed, 0.5);
    (store, ip)
}

fn run_ip(store: &ParamStore<f64>, ip: &IpMlp, x: &Tensor<f64>, l: usize, act: Activation) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = ip.forward(&mut g, &p, xv, l, act).unwrap();
    g.value(y).clone()
}

#[test]
fn segment_counts_follow_grouping_rule() {
    // H = W = 4, C = 4, L = 2: g = 2, HW/L = 8 tokens, C/g = 2 groups, rows of length 4.
    let layout = TokenLayout::segments(&[1, 1, 4, 4, 4], SegmentAxis::W, 2).unwrap();
    assert_eq!(layout.cols(), 4);
    assert_eq!(layout.rows(), 8 * 2);
    // D = 8, L = 2, H = W = 2, C = 4: HWD/L = 16 depth tokens per group.
    let layout = TokenLayout::segments(&[1, 8, 2, 2, 4], SegmentAxis::D, 2).unwrap();
    assert_eq!(layout.rows() / (4 / 2), 16);
    // H = W = 4, C = 2, window side 2: HWC/L² = 8 windows.
    assert_eq!(TokenLayout::windows(&[1, 1, 4, 4, 2], 2).unwrap().rows(), 8);
}

#[test]
fn segment_rows_hold_consecutive_positions_of_one_group() {
    let (b, d, h, w, c, l) = (2, 2, 4, 6, 6, 3);
    let g = c / l;
    let x = Tensor::<f64>::from_fn(&[b, d, h, w, c], |i| i as f64);
    let rows = TokenLayout::segments(x.shape(), SegmentAxis::W, l).unwrap().to_tokens(&x).unwrap();
    let mut r = 0;
    for bi in 0..b {
        for di in 0..d {
            for hi in 0..h {
                for seg in 0..w / l {
                    for k in 0..c / g {
                        for i in 0..l {
                            for j in 0..g {
                                assert_eq!(rows.get(&[r, i * g + j]), x.get(&[bi, di, hi, seg * l + i, k * g + j]));
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
    assert_eq!(r, rows.shape()[0]);
}

#[test]
fn segmentation_round_trips_bitwise() {
    let mut r = rng(11);
    let x = uniform(&mut r, &[2, 4, 4, 6, 6], -1.0, 1.0);
    for (axis, l) in [(SegmentAxis::H, 2), (SegmentAxis::W, 3), (SegmentAxis::D, 2), (SegmentAxis::W, 6)] {
        let layout = TokenLayout::segments(x.shape(), axis, l).unwrap();
        assert_eq!(layout.from_tokens(&layout.to_tokens(&x).unwrap()).unwrap(), x);
    }
    let layout = TokenLayout::windows(x.shape(), 2).unwrap();
    assert_eq!(layout.from_tokens(&layout.to_tokens(&x).unwrap()).unwrap(), x);
}

#[test]
fn divisibility_errors_name_axis_and_length() {
    let err = TokenLayout::segments(&[1, 3, 4, 4, 4], SegmentAxis::D, 2).unwrap_err().to_string();
    assert!(err.contains("D") && err.contains('2'), "{err}");
    let err = TokenLayout::segments(&[1, 2, 4, 6, 4], SegmentAxis::W, 4).unwrap_err().to_string();
    assert!(err.contains("W") && err.contains('4'), "{err}");
    assert!(TokenLayout::segments(&[1, 2, 6, 6, 4], SegmentAxis::H, 3).is_err());
}

#[test]
fn ip_zero_weights_give_zero() {
    let (mut store, ip) = ip_setup(4, 1);
    zero_all(&mut store);
    let x = uniform(&mut rng(2), &[1, 2, 4, 4, 4], -1.0, 1.0);
    assert!(run_ip(&store, &ip, &x, 2, Activation::Gelu).to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn ip_channel_identity_pathway_reproduces_input() {
    let (mut store, ip) = ip_setup(4, 3);
    set_linear(&mut store, &ip.vertical, Tensor::zeros(&[4, 4]));
    set_linear(&mut store, &ip.horizontal, Tensor::zeros(&[4, 4]));
    set_linear(&mut store, &ip.channel, Tensor::eye(4));
    set_linear(&mut store, &ip.fuse, Tensor::eye(4));
    let x = uniform(&mut rng(4), &[2, 3, 4, 4, 4], -1.0, 1.0);
    assert_eq!(run_ip(&store, &ip, &x, 2, Activation::Identity), x);
}

#[test]
fn full_width_horizontal_pathway_matches_per_row_dense_oracle() {
    let (h, w, c) = (4, 4, 4);
    let l = w;
    let g = c / l;
    let (mut store, ip) = ip_setup(c, 5);
    set_linear(&mut store, &ip.vertical, Tensor::zeros(&[c, c]));
    set_linear(&mut store, &ip.channel, Tensor::zeros(&[c, c]));
    set_linear(&mut store, &ip.fuse, Tensor::eye(c));
    let wh = store.get(ip.horizontal.weight).value.clone();
    let bh = store.get(ip.horizontal.bias.unwrap()).value.clone();
    let x = uniform(&mut rng(6), &[1, 1, h, w, c], -1.0, 1.0);
    let got = run_ip(&store, &ip, &x, l, Activation::Identity);
    let mut max_err = 0.0f64;
    for row in 0..h {
        for grp in 0..c / g {
            // The whole row of one channel group is a single token of length w·g.
            let input: Vec<f64> = (0..w).flat_map(|i| (0..g).map(move |j| (i, j))).map(|(i, j)| x.get(&[0, 0, row, i, grp * g + j])).collect();
            for (o, (i, j)) in (0..w).flat_map(|i| (0..g).map(move |j| (i, j))).enumerate() {
                let want: f64 = bh.get(&[o]) + (0..w * g).map(|q| wh.get(&[o, q]) * input[q]).sum::<f64>();
                max_err = max_err.max((got.get(&[0, 0, row, i, grp * g + j]) - want).abs());
            }
        }
    }
    assert!(max_err <= 1e-10, "{max_err}");
}

#[test]
fn aa_identity_and_window_loop_oracle() {
    let side = 2;
    let mut store = ParamStore::<f64>::new();
    let aa = AaMlp::new(&mut store, &mut rng(7), "aa", side);
    let x = uniform(&mut rng(8), &[2, 2, 4, 6, 3], -1.0, 1.0);
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = aa.forward(&mut g, &p, xv, side, Activation::Identity).unwrap();
        g.value(y).clone()
    };
    set_linear(&mut store, &aa.window, Tensor::eye(4));
    assert_eq!(run(&store), x);

    randomize(&mut store, 9, 1.0);
    let wa = store.get(aa.window.weight).value.clone();
    let ba = store.get(aa.window.bias.unwrap()).value.clone();
    let got = run(&store);
    let [b, d, h, w, c] = [2, 2, 4, 6, 3];
    let mut max_err = 0.0f64;
    let mut windows = 0;
    for bi in 0..b {
        for di in 0..d {
            for ch in 0..c {
                for wy in 0..h / side {
                    for wx in 0..w / side {
                        windows += 1;
                        let at = |q: usize| [bi, di, wy * side + q / side, wx * side + q % side, ch];
                        for o in 0..side * side {
                            let want = ba.get(&[o]) + (0..side * side).map(|q| wa.get(&[o, q]) * x.get(&at(q))).sum::<f64>();
                            max_err = max_err.max((got.get(&at(o)) - want).abs());
                        }
                    }
                }
            }
        }
    }
    assert_eq!(windows, b * d * h * w * c / (side * side));
    assert!(max_err <= 1e-10, "{max_err}");
}

#[test]
fn residual_attention_fuse_contracts() {
    let mut r = rng(10);
    let y_ip = uniform(&mut r, &[1, 2, 4, 4, 4], -2.0, 2.0);
    let y_a = uniform(&mut r, &[1, 2, 4, 4, 4], -2.0, 2.0);
    let mut g = Graph::new();
    let ip = g.constant(y_ip.clone());
    let zero = g.constant(Tensor::zeros(y_ip.shape()));
    let one = g.constant(Tensor::ones(y_ip.shape()));
    let a = g.constant(y_a.clone());
    let f0 = residual_attention_fuse(&mut g, ip, zero).unwrap();
    assert_eq!(g.value(f0), &y_ip);
    let f1 = residual_attention_fuse(&mut g, ip, one).unwrap();
    assert_eq!(g.value(f1), &y_ip.scale(2.0));
    let fr = residual_attention_fuse(&mut g, ip, a).unwrap();
    let want: Vec<f64> = y_ip.to_vec().iter().zip(y_a.to_vec()).map(|(p, q)| (1.0 + q) * p).collect();
    assert_eq!(g.value(fr).to_vec(), want);
    let small = g.constant(Tensor::zeros(&[1, 2, 4, 4, 2]));
    assert!(residual_attention_fuse(&mut g, ip, small).is_err());
}

fn run_tp(store: &ParamStore<f64>, tp: &TpMlp, x: &Tensor<f64>, l: usize, act: Activation) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = tp.forward(&mut g, &p, xv, l, act).unwrap();
    g.value(y).clone()
}

#[test]
fn tp_identity_and_zero() {
    let mut store = ParamStore::<f64>::new();
    let tp = TpMlp::new(&mut store, &mut rng(12), "tp", 4);
    let x = uniform(&mut rng(13), &[1, 4, 2, 2, 4], -1.0, 1.0);
    set_linear(&mut store, &tp.depth, Tensor::eye(4));
    assert_eq!(run_tp(&store, &tp, &x, 2, Activation::Identity), x);
    zero_all(&mut store);
    assert!(run_tp(&store, &tp, &x, 2, Activation::Gelu).to_vec().iter().all(|&v| v == 0.0));
}

/// Perturbs one input element per probe and asserts that every output element
/// that moved lies inside `allowed(input, output)`, and that at least one did.
fn probe<F>(x: &Tensor<f64>, probes: usize, seed: u64, eval: F, allowed: impl Fn(&[usize], &[usize]) -> bool)
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    let base = eval(x);
    let mut r = rng(seed);
    let shape = x.shape().to_vec();
    let unravel = |mut i: usize| {
        let mut idx = vec![0; shape.len()];
        for a in (0..shape.len()).rev() {
            idx[a] = i % shape[a];
            i /= shape[a];
        }
        idx
    };
    for _ in 0..probes {
        let at = r.random_range(0..x.numel());
        let mut data = x.to_vec();
        data[at] += 0.75;
        let moved = eval(&Tensor::from_vec(&shape, data).unwrap());
        let src = unravel(at);
        let mut inside = 0;
        for (o, (a, b)) in base.to_vec().iter().zip(moved.to_vec()).enumerate() {
            let dst = unravel(o);
            if allowed(&src, &dst) {
                inside += usize::from(*a != b);
            } else {
                assert_eq!(a.to_bits(), b.to_bits(), "output {dst:?} moved after perturbing {src:?}");
            }
        }
        assert!(inside > 0, "perturbing {src:?} moved nothing");
    }
}

#[test]
fn in_plane_pathways_are_local_to_their_segment_and_group() {
    let (c, l) = (6, 3);
    let g = c / l;
    let x = uniform(&mut rng(14), &[1, 2, 6, 6, c], -1.0, 1.0);
    for horizontal in [true, false] {
        let (mut store, ip) = ip_setup(c, 15);
        let silenced = if horizontal { &ip.vertical } else { &ip.horizontal };
        set_linear(&mut store, silenced, Tensor::zeros(&[c, c]));
        set_linear(&mut store, &ip.channel, Tensor::zeros(&[c, c]));
        set_linear(&mut store, &ip.fuse, Tensor::eye(c));
        let (line, along) = if horizontal { (2, 3) } else { (3, 2) };
        probe(
            &x,
            50,
            16 + horizontal as u64,
            |x| run_ip(&store, &ip, x, l, Activation::Gelu),
            |s, o| s[0] == o[0] && s[1] == o[1] && s[line] == o[line] && s[along] / l == o[along] / l && s[4] / g == o[4] / g,
        );
    }
}

#[test]
fn through_plane_mixing_is_local_to_its_depth_segment() {
    let (c, l) = (4, 2);
    let g = c / l;
    let mut store = ParamStore::<f64>::new();
    let tp = TpMlp::new(&mut store, &mut rng(17), "tp", c);
    randomize(&mut store, 18, 0.8);
    let x = uniform(&mut rng(19), &[1, 6, 3, 3, c], -1.0, 1.0);
    probe(
        &x,
        50,
        20,
        |x| run_tp(&store, &tp, x, l, Activation::Gelu),
        |s, o| s[1] / l == o[1] / l && s[2] == o[2] && s[3] == o[3] && s[4] / g == o[4] / g,
    );
}

fn block(cfg: MlppConfig, seed: u64) -> (ParamStore<f64>, MlppBlock) {
    let mut store = ParamStore::new();
    let b = MlppBlock::new(&mut store, &mut rng(seed), "mlpp", cfg).unwrap();
    (store, b)
}

fn run_block(store: &ParamStore<f64>, b: &MlppBlock, x: &Tensor<f64>) -> phnet_core::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = b.forward(&mut g, &p, xv)?;
    Ok(g.value(y).clone())
}

fn small_cfg() -> MlppConfig {
    MlppConfig { channels: 8, l_ip: 2, l_aa: 2, l_tp: 2, layers: 2, activation: Activation::Gelu }
}

#[test]
fn block_with_zero_projections_is_identity_and_preserves_shape() {
    let (mut store, b) = block(small_cfg(), 21);
    for layer in &b.layers {
        for fc in [&layer.ip.vertical, &layer.ip.horizontal, &layer.ip.channel, &layer.ip.fuse, &layer.aa.window, &layer.tp.depth] {
            let shape = store.get(fc.weight).value.shape().to_vec();
            store.set_value(fc.weight, Tensor::zeros(&shape)).unwrap();
        }
    }
    let x = uniform(&mut rng(22), &[2, 8, 4, 4, 6], -1.0, 1.0);
    assert_eq!(run_block(&store, &b, &x).unwrap(), x);

    randomize(&mut store, 23, 0.5);
    for shape in [[1, 8, 2, 4, 4], [2, 8, 4, 8, 6], [1, 8, 6, 2, 10]] {
        let x = uniform(&mut rng(24), &shape, -1.0, 1.0);
        assert_eq!(run_block(&store, &b, &x).unwrap().shape(), &shape);
    }
    assert!(run_block(&store, &b, &uniform(&mut rng(25), &[1, 8, 3, 4, 4], -1.0, 1.0)).is_err());
    assert!(run_block(&store, &b, &uniform(&mut rng(25), &[1, 4, 2, 4, 4], -1.0, 1.0)).is_err());
}

#[test]
fn block_gradient_matches_finite_differences() {
    let (mut store, b) = block(small_cfg(), 26);
    randomize(&mut store, 27, 0.5);
    let x = uniform(&mut rng(28), &[1, 8, 2, 4, 4], -1.0, 1.0);
    let err = grad_check(
        |g, x| {
            let p = store.bind(g, false);
            let y = b.forward(g, &p, x)?;
            weighted_sum(g, y, 29)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "input gradient {err}");

    // Every parameter tensor, at a sample of its coordinates.
    let mut r = rng(30);
    for id in store.ids() {
        let value = store.get(id).value.clone();
        let coords = sample_coords(&mut r, value.numel(), 6);
        let err = grad_check_coords(
            |g, w| {
                let mut p = store.bind(g, false);
                p.set(id, w);
                let xv = g.constant(x.clone());
                let y = b.forward(g, &p, xv)?;
                weighted_sum(g, y, 29)
            },
            &value,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-5, "{}: {err}", store.get(id).name);
    }
}

#[test]
fn parameter_shapes_are_resolution_free() {
    let cfg = MlppConfig { channels: 8, l_ip: 4, l_aa: 2, l_tp: 2, layers: 2, activation: Activation::Gelu };
    let (store, b) = block(cfg, 31);
    let shapes: Vec<Vec<usize>> = store.iter().map(|p| p.value.shape().to_vec()).collect();
    for s in &shapes {
        assert!(s.iter().all(|&e| [8, 4].contains(&e)), "{s:?}");
    }
    let (store2, _) = block(cfg, 99);
    assert_eq!(shapes, store2.iter().map(|p| p.value.shape().to_vec()).collect::<Vec<_>>());
    for shape in [[1, 8, 2, 4, 4], [1, 8, 4, 8, 8], [1, 8, 2, 12, 4]] {
        let x = uniform(&mut rng(32), &shape, -1.0, 1.0);
        assert_eq!(run_block(&store, &b, &x).unwrap().shape(), &shape);
    }
}

#[test]
fn in_plane_cost_is_linear_and_vanilla_mixing_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let ip = IpMlp::new(&mut store, &mut rng(33), "ip", 4);
    assert_eq!(ip.flops(8, 8).horizontal, 2048);
    assert_eq!(ip.flops(16, 8).horizontal, 4096);
    assert_eq!(ip.flops(16, 8).total(), 2 * ip.flops(8, 8).total());

    let small = VanillaTokenMixer::new(&mut store, &mut rng(34), "v8", 8, 8);
    let large = VanillaTokenMixer::new(&mut store, &mut rng(35), "v16", 16, 8);
    assert_eq!(large.flops(4), 4 * small.flops(4));

    // The baseline is tied to its resolution; the axial block is not.
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::ones(&[1, 1, 16, 8, 4]));
    assert!(small.forward(&mut g, &p, x).is_err());
    assert!(large.forward(&mut g, &p, x).is_ok());
    assert!(ip.forward(&mut g, &p, x, 2, Activation::Gelu).is_ok());
}
