mod common;

use phnet_core::metrics::{
    class_metrics, cross_entropy, dice, dice_ce_loss, hausdorff, iou, nvd, squared_distance_transform, surface_dice,
    surface_voxels, write_report, HausdorffMode, ReportRow,
};
use phnet_core::{LabelVolume, PhnetError};
use phnet_tensor::{grad_check, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn mask(dims: [usize; 3], spacing: [f64; 3], voxels: &[[usize; 3]]) -> LabelVolume {
    let mut m = LabelVolume::filled(dims, spacing, 0).unwrap();
    for &[z, y, x] in voxels {
        m.set(z, y, x, 1);
    }
    m
}

/// Random blobby label volume: a few boxes of class 1, occasionally empty.
fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> LabelVolume {
    let mut m = LabelVolume::filled(dims, spacing, 0).unwrap();
    let boxes = rng.random_range(0..4);
    for _ in 0..boxes {
        let lo: Vec<usize> = dims.iter().map(|&n| rng.random_range(0..n)).collect();
        let hi: Vec<usize> = (0..3).map(|a| rng.random_range(lo[a]..dims[a]) + 1).collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m.set(z, y, x, 1);
                }
            }
        }
    }
    // Salt noise makes thin and isolated surfaces.
    for _ in 0..rng.random_range(0..6) {
        let z = rng.random_range(0..dims[0]);
        let y = rng.random_range(0..dims[1]);
        let x = rng.random_range(0..dims[2]);
        m.set(z, y, x, 1);
    }
    m
}

/// Boundary voxels by explicit signed neighbour lookups.
fn surface_oracle(m: &LabelVolume) -> Vec<[usize; 3]> {
    let [d, h, w] = m.dims();
    let at = |z: i64, y: i64, x: i64| {
        z >= 0 && y >= 0 && x >= 0 && (z as usize) < d && (y as usize) < h && (x as usize) < w
            && m.get(z as usize, y as usize, x as usize) == 1
    };
    let mut out = Vec::new();
    for z in 0..d as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !at(z, y, x) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| !at(z + a, y + b, x + c)) {
                    out.push([z as usize, y as usize, x as usize]);
                }
            }
        }
    }
    out
}

fn mm_dist(a: [usize; 3], b: [usize; 3], spacing_xyz: [f64; 3]) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * spacing_xyz[2];
    let dy = (a[1] as f64 - b[1] as f64) * spacing_xyz[1];
    let dx = (a[2] as f64 - b[2] as f64) * spacing_xyz[0];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Nearest-surface distance from every point of `from` to the set `to`, by
/// exhaustive search.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter().map(|&a| to.iter().map(|&b| mm_dist(a, b, spacing)).fold(f64::INFINITY, f64::min)).collect()
}

fn nearest_rank_interp(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() as f64 - 1.0);
    let i = pos as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
}

fn random_case(rng: &mut ChaCha8Rng) -> (LabelVolume, LabelVolume) {
    let dims = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
    let spacing = [rng.random_range(0.3..3.0), rng.random_range(0.3..3.0), rng.random_range(0.5..6.0)];
    (random_mask(rng, dims, spacing), random_mask(rng, dims, spacing))
}

#[test]
fn overlap_examples() {
    let s = [1.0; 3];
    let a = mask([1, 1, 4], s, &[[0, 0, 0], [0, 0, 1]]);
    let b = mask([1, 1, 4], s, &[[0, 0, 1], [0, 0, 2]]);
    let c = mask([1, 1, 4], s, &[[0, 0, 3]]);
    assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
    assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
    assert_eq!(iou(&a, &c, 1).unwrap(), 0.0);
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
    assert!((iou(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    let empty = mask([1, 1, 4], s, &[]);
    assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
    assert_eq!(iou(&empty, &empty, 1).unwrap(), 1.0);

    let other = mask([1, 2, 2], s, &[]);
    assert!(matches!(dice(&a, &other, 1), Err(PhnetError::InvalidArgument(_))));
    assert!(matches!(iou(&a, &other, 1), Err(PhnetError::InvalidArgument(_))));
}

#[test]
fn nvd_examples() {
    let dims = [1, 10, 12];
    let gt_vox: Vec<_> = (0..100).map(|i| [0, i / 12, i % 12]).collect();
    let pred_vox: Vec<_> = (0..120).map(|i| [0, i / 12, i % 12]).collect();
    for spacing in [[1.0, 1.0, 1.0], [2.0, 1.0, 1.0], [0.7, 0.7, 5.0]] {
        let gt = mask(dims, spacing, &gt_vox);
        let pred = mask(dims, spacing, &pred_vox);
        assert!((nvd(&pred, &gt, 1).unwrap().unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(nvd(&gt, &gt, 1).unwrap(), Some(0.0));
        let empty = mask(dims, spacing, &[]);
        assert_eq!(nvd(&pred, &empty, 1).unwrap(), None);
    }
}

#[test]
fn hausdorff_examples() {
    let s = [1.0; 3];
    let a = mask([1, 4, 5], s, &[[0, 0, 0]]);
    let b = mask([1, 4, 5], s, &[[0, 3, 4]]);
    assert_eq!(hausdorff(&a, &b, 1, HausdorffMode::Max).unwrap(), Some(5.0));
    assert_eq!(hausdorff(&a, &b, 1, HausdorffMode::P95).unwrap(), Some(5.0));
    assert_eq!(hausdorff(&a, &a, 1, HausdorffMode::Max).unwrap(), Some(0.0));
    let empty = mask([1, 4, 5], s, &[]);
    assert_eq!(hausdorff(&a, &empty, 1, HausdorffMode::Max).unwrap(), None);
    assert_eq!(hausdorff(&empty, &empty, 1, HausdorffMode::P95).unwrap(), None);

    // Anisotropic spacing: one slice apart along z at 5 mm.
    let a = mask([3, 2, 2], [0.5, 0.5, 5.0], &[[0, 0, 0]]);
    let b = mask([3, 2, 2], [0.5, 0.5, 5.0], &[[1, 0, 0]]);
    assert_eq!(hausdorff(&a, &b, 1, HausdorffMode::Max).unwrap(), Some(5.0));
}

#[test]
fn surface_dice_examples() {
    let s = [1.0; 3];
    let a = mask([4, 4, 4], s, &[[1, 1, 1], [1, 1, 2], [2, 2, 2]]);
    let b = mask([4, 4, 4], s, &[[3, 3, 3]]);
    for tau in [0.0, 0.5, 3.0] {
        assert_eq!(surface_dice(&a, &a, 1, tau).unwrap(), 1.0);
    }
    let diagonal = (3.0f64 * 16.0).sqrt() + 1.0;
    assert_eq!(surface_dice(&a, &b, 1, diagonal).unwrap(), 1.0);
    assert_eq!(surface_dice(&a, &b, 1, 0.0).unwrap(), 0.0);
    let empty = mask([4, 4, 4], s, &[]);
    assert_eq!(surface_dice(&empty, &empty, 1, 1.0).unwrap(), 1.0);
    assert_eq!(surface_dice(&a, &empty, 1, 1.0).unwrap(), 0.0);
    assert!(matches!(surface_dice(&a, &b, 1, -0.1), Err(PhnetError::InvalidArgument(_))));
    assert!(matches!(
        class_metrics(&a, &b, 1, -1.0, HausdorffMode::P95),
        Err(PhnetError::InvalidArgument(_))
    ));
}

#[test]
fn surface_voxels_match_neighbour_oracle() {
    let mut rng = common::rng(11);
    for _ in 0..50 {
        let (m, _) = random_case(&mut rng);
        let mut got = surface_voxels(&m, 1);
        let mut want = surface_oracle(&m);
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }
    // A solid 3×3×3 cube inside a 5³ grid has 26 surface voxels.
    let cube: Vec<_> = (1..4).flat_map(|z| (1..4).flat_map(move |y| (1..4).map(move |x| [z, y, x]))).collect();
    assert_eq!(surface_voxels(&mask([5, 5, 5], [1.0; 3], &cube), 1).len(), 26);
}

#[test]
fn distance_transform_matches_brute_force() {
    let mut rng = common::rng(12);
    for _ in 0..30 {
        let dims = [rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9)];
        let spacing_xyz = [rng.random_range(0.2..3.0), rng.random_range(0.2..3.0), rng.random_range(0.2..6.0)];
        let n_sites = rng.random_range(1..6);
        let sites: Vec<[usize; 3]> = (0..n_sites)
            .map(|_| [rng.random_range(0..dims[0]), rng.random_range(0..dims[1]), rng.random_range(0..dims[2])])
            .collect();
        let field = squared_distance_transform(dims, [spacing_xyz[2], spacing_xyz[1], spacing_xyz[0]], &sites);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let want = sites.iter().map(|&s| mm_dist([z, y, x], s, spacing_xyz).powi(2)).fold(f64::INFINITY, f64::min);
                    let got = field[(z * dims[1] + y) * dims[2] + x];
                    assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
                }
            }
        }
    }
    let none = squared_distance_transform([2, 2, 2], [1.0; 3], &[]);
    assert!(none.iter().all(|v| v.is_infinite()));
}

#[test]
fn surface_metrics_match_all_pairs_oracle() {
    let mut rng = common::rng(13);
    let mut compared = 0;
    for _ in 0..50 {
        let (p, g) = random_case(&mut rng);
        let spacing = p.spacing_mm();
        let (sp, sg) = (surface_oracle(&p), surface_oracle(&g));
        let tau = rng.random_range(0.0..4.0);
        let sd = surface_dice(&p, &g, 1, tau).unwrap();
        let hd_max = hausdorff(&p, &g, 1, HausdorffMode::Max).unwrap();
        let hd95 = hausdorff(&p, &g, 1, HausdorffMode::P95).unwrap();
        if sp.is_empty() || sg.is_empty() {
            assert_eq!(hd_max, None);
            assert_eq!(hd95, None);
            assert_eq!(sd, if sp.is_empty() && sg.is_empty() { 1.0 } else { 0.0 });
            continue;
        }
        compared += 1;
        let mut pooled = directed(&sp, &sg, spacing);
        pooled.extend(directed(&sg, &sp, spacing));
        let want_max = pooled.iter().cloned().fold(0.0, f64::max);
        let want_95 = nearest_rank_interp(pooled.clone(), 0.95);
        let want_sd = pooled.iter().filter(|&&d| d <= tau).count() as f64 / pooled.len() as f64;
        assert!((hd_max.unwrap() - want_max).abs() <= 1e-9, "{hd_max:?} vs {want_max}");
        assert!((hd95.unwrap() - want_95).abs() <= 1e-9, "{hd95:?} vs {want_95}");
        assert!((sd - want_sd).abs() <= 1e-9, "{sd} vs {want_sd}");

        let all = class_metrics(&p, &g, 1, tau, HausdorffMode::P95).unwrap();
        assert_eq!(all.surface_dice, sd);
        assert_eq!(all.hd, hd95);
        assert_eq!(all.dice, dice(&p, &g, 1).unwrap());
        assert_eq!(all.iou, iou(&p, &g, 1).unwrap());
        assert_eq!(all.nvd, nvd(&p, &g, 1).unwrap());
    }
    assert!(compared >= 30, "only {compared} non-empty pairs");
}

#[test]
fn distances_scale_with_spacing() {
    let mut rng = common::rng(14);
    for _ in 0..20 {
        let (p, g) = random_case(&mut rng);
        let s = p.spacing_mm();
        let doubled = [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]];
        let p2 = LabelVolume::new(p.dims(), doubled, p.data().to_vec()).unwrap();
        let g2 = LabelVolume::new(g.dims(), doubled, g.data().to_vec()).unwrap();
        for mode in [HausdorffMode::Max, HausdorffMode::P95] {
            let a = hausdorff(&p, &g, 1, mode).unwrap();
            let b = hausdorff(&p2, &g2, 1, mode).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => assert!((b - 2.0 * a).abs() <= 1e-9 * a.max(1.0)),
                (a, b) => assert_eq!(a, b),
            }
        }
        for tau in [0.0, 0.7, 2.5] {
            assert_eq!(surface_dice(&p, &g, 1, tau).unwrap(), surface_dice(&p2, &g2, 1, 2.0 * tau).unwrap());
        }
        assert_eq!(dice(&p, &g, 1).unwrap(), dice(&p2, &g2, 1).unwrap());
        let (n1, n2) = (nvd(&p, &g, 1).unwrap(), nvd(&p2, &g2, 1).unwrap());
        match (n1, n2) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9 * a.max(1.0)),
            (a, b) => assert_eq!(a, b),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_and_surface_invariants(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let (p, g) = random_case(&mut rng);
        let d = dice(&p, &g, 1).unwrap();
        let j = iou(&p, &g, 1).unwrap();
        prop_assert_eq!(d, dice(&g, &p, 1).unwrap());
        prop_assert_eq!(j, iou(&g, &p, 1).unwrap());
        prop_assert!(j <= d + 1e-15);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d));
        for mode in [HausdorffMode::Max, HausdorffMode::P95] {
            prop_assert_eq!(hausdorff(&p, &g, 1, mode).unwrap(), hausdorff(&g, &p, 1, mode).unwrap());
        }
        let tau = rng.random_range(0.0..3.0);
        prop_assert_eq!(surface_dice(&p, &g, 1, tau).unwrap(), surface_dice(&g, &p, 1, tau).unwrap());
    }
}

fn labels_from(rng: &mut ChaCha8Rng, batch: usize, k: u8, dims: [usize; 3]) -> Vec<LabelVolume> {
    (0..batch)
        .map(|_| {
            let n = dims.iter().product::<usize>();
            // Guarantee every class occurs so the Dice term is well conditioned.
            let data = (0..n).map(|i| if i < k as usize { i as u8 } else { rng.random_range(0..k) }).collect();
            LabelVolume::new(dims, [1.0, 1.0, 3.0], data).unwrap()
        })
        .collect()
}

#[test]
fn uniform_logits_give_log_k_cross_entropy() {
    let mut rng = common::rng(20);
    let labels = labels_from(&mut rng, 2, 2, [2, 3, 3]);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 2, 2, 3, 3], 0.3));
    let ce = cross_entropy(&mut g, x, &labels).unwrap();
    assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-9);

    // Combined loss: CE = ln 2 and every probability is 1/2.
    let total = dice_ce_loss(&mut g, x, &labels).unwrap();
    let fg: usize = labels.iter().map(|l| l.data().iter().filter(|&&c| c == 1).count()).sum();
    let n = 2 * 18;
    let soft_dice = (2.0 * 0.5 * fg as f64 + 1e-5) / (0.5 * n as f64 + fg as f64 + 1e-5);
    assert!((g.value(total).item() - (1.0 - soft_dice + 2f64.ln())).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_give_small_loss() {
    let mut rng = common::rng(21);
    for k in [2u8, 3, 4] {
        let labels = labels_from(&mut rng, 2, k, [2, 4, 4]);
        let shape = [2, k as usize, 2, 4, 4];
        let n = 32;
        let logits = Tensor::<f64>::from_fn(&shape, |i| {
            let (b, c, v) = (i / (k as usize * n), (i / n) % k as usize, i % n);
            if labels[b].data()[v] as usize == c {
                10.0
            } else {
                0.0
            }
        });
        let mut g = Graph::new();
        let x = g.constant(logits);
        let loss = dice_ce_loss(&mut g, x, &labels).unwrap();
        let v = g.value(loss).item();
        assert!(v < 0.01, "k={k}: {v}");
        assert!(v > 0.0);
    }
}

#[test]
fn loss_rejects_bad_labels() {
    let mut rng = common::rng(22);
    let mut labels = labels_from(&mut rng, 1, 3, [2, 2, 2]);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
    assert!(dice_ce_loss(&mut g, x, &labels).is_ok());
    labels[0].set(0, 0, 0, 3);
    assert!(matches!(dice_ce_loss(&mut g, x, &labels), Err(PhnetError::InvalidArgument(_))));
    let two = labels_from(&mut rng, 2, 3, [2, 2, 2]);
    assert!(matches!(dice_ce_loss(&mut g, x, &two), Err(PhnetError::InvalidArgument(_))));
    let wrong_dims = labels_from(&mut rng, 1, 3, [2, 2, 3]);
    assert!(matches!(dice_ce_loss(&mut g, x, &wrong_dims), Err(PhnetError::InvalidArgument(_))));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = common::rng(23);
    for trial in 0..5 {
        let k = 2 + trial % 3;
        let labels = labels_from(&mut rng, 2, k as u8, [2, 3, 2]);
        let x = common::uniform(&mut rng, &[2, k, 2, 3, 2], -2.0, 2.0);
        let err = grad_check(|g, x| Ok(dice_ce_loss(g, x, &labels)?), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "trial {trial}: {err}");
    }
}

#[test]
fn loss_decreases_along_negative_gradient() {
    let mut rng = common::rng(24);
    for state in 0..20 {
        let k = 2 + state % 3;
        let labels = labels_from(&mut rng, 1, k as u8, [2, 3, 3]);
        let x = common::uniform(&mut rng, &[1, k, 2, 3, 3], -3.0, 3.0);
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.param(t.clone());
            let l = dice_ce_loss(&mut g, v, &labels).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.get(v).unwrap().clone())
        };
        let (l0, grad) = eval(&x);
        let step = x.sub(&grad.scale(1e-2)).unwrap();
        let (l1, _) = eval(&step);
        assert!(l1 < l0, "state {state}: {l1} !< {l0}");
    }
}

#[test]
fn report_has_fixed_columns_and_mean_row() {
    let s = [1.0; 3];
    let a = mask([2, 2, 2], s, &[[0, 0, 0], [0, 0, 1]]);
    let b = mask([2, 2, 2], s, &[[0, 0, 1]]);
    let empty = mask([2, 2, 2], s, &[]);
    let rows = vec![
        ReportRow { case: "case_0".into(), class: 1, outcome: Ok(class_metrics(&a, &b, 1, 1.0, HausdorffMode::Max).unwrap()) },
        ReportRow { case: "case_1".into(), class: 1, outcome: Ok(class_metrics(&a, &empty, 1, 1.0, HausdorffMode::Max).unwrap()) },
        ReportRow { case: "case_2".into(), class: 1, outcome: Err("missing label file, not found".into()) },
    ];
    let mut buf = Vec::new();
    write_report(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "case,class,dice,iou,sd,nvd,hd,error");
    assert_eq!(lines[1], "case_0,1,0.666667,0.500000,1.000000,100.000000,1.000000,");
    assert_eq!(lines[2], "case_1,1,0.000000,0.000000,0.000000,NA,NA,");
    assert_eq!(lines[3], "case_2,1,NA,NA,NA,NA,NA,\"missing label file, not found\"");
    assert_eq!(lines[4], "mean,all,0.333333,0.250000,0.500000,100.000000,1.000000,");
    assert_eq!(lines.len(), 5);
}
