//! Finite-difference gradient suite: every differentiable op on several
//! random shapes, plus the full exchange architecture end to end.

use swarmfuse::backbone::{BackboneConfig, TaskHead};
use swarmfuse::scenegen::{generate_dataset, GenConfig, Preset};
use swarmfuse::tensor::gradcheck::{
    check_gradients, check_param_gradients, random_tensor, separated_tensor,
};
use swarmfuse::tensor::{Graph, Tensor, Var};
use swarmfuse::train::{init_model, Method, ModelConfig};

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-3;

fn assert_ok(name: &str, report: swarmfuse::tensor::gradcheck::CheckReport) {
    println!(
        "gradcheck {name}: {} elements, max rel err {:.3e}",
        report.elements_checked, report.max_rel_err
    );
    assert!(report.max_rel_err < TOL, "{name}: max rel err {}", report.max_rel_err);
}

#[test]
fn conv2d_gradients() {
    // The stated reference case: 2x3x8x8 input against a 4x3x3x3 kernel.
    let x = random_tensor(&[2, 3, 8, 8], -1.0, 1.0, 1);
    let w = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, 2);
    let b = random_tensor(&[4], -0.2, 0.2, 3);
    assert_ok(
        "conv2d 2x3x8x8 s1 p1",
        check_gradients(&[x, w, b], EPS, 10, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap()),
    );

    let x = random_tensor(&[1, 2, 5, 7], -1.0, 1.0, 4);
    let w = random_tensor(&[3, 2, 3, 3], -0.5, 0.5, 5);
    let b = random_tensor(&[3], -0.2, 0.2, 6);
    assert_ok(
        "conv2d 1x2x5x7 s1 p0",
        check_gradients(&[x, w, b], EPS, 11, |g, v| g.conv2d(v[0], v[1], v[2], 1, 0).unwrap()),
    );

    let x = random_tensor(&[1, 2, 8, 8], -1.0, 1.0, 7);
    let w = random_tensor(&[3, 2, 3, 3], -0.5, 0.5, 8);
    let b = random_tensor(&[3], -0.2, 0.2, 9);
    assert_ok(
        "conv2d 1x2x8x8 s2 p1",
        check_gradients(&[x, w, b], EPS, 12, |g, v| g.conv2d(v[0], v[1], v[2], 2, 1).unwrap()),
    );
}

#[test]
fn matmul_gradients() {
    for (i, (m, k, n)) in [(2usize, 3usize, 4usize), (1, 5, 1), (4, 4, 2)].iter().enumerate() {
        let a = random_tensor(&[*m, *k], -1.0, 1.0, 20 + i as u64);
        let b = random_tensor(&[*k, *n], -1.0, 1.0, 30 + i as u64);
        assert_ok(
            &format!("matmul {m}x{k}x{n}"),
            check_gradients(&[a, b], EPS, 40 + i as u64, |g, v| g.matmul(v[0], v[1]).unwrap()),
        );
    }
}

#[test]
fn elementwise_gradients() {
    for (i, shape) in [vec![7], vec![3, 4], vec![2, 3, 2]].iter().enumerate() {
        let s = i as u64;
        let x = separated_tensor(shape, 0.05, 50 + s);
        assert_ok(&format!("relu {shape:?}"), check_gradients(&[x], EPS, 60 + s, |g, v| g.relu(v[0])));

        let a = random_tensor(shape, -1.0, 1.0, 70 + s);
        let b = random_tensor(shape, -1.0, 1.0, 80 + s);
        assert_ok(
            &format!("add {shape:?}"),
            check_gradients(&[a.clone(), b.clone()], EPS, 90 + s, |g, v| g.add(v[0], v[1]).unwrap()),
        );
        assert_ok(
            &format!("mul {shape:?}"),
            check_gradients(&[a.clone(), b.clone()], EPS, 100 + s, |g, v| g.mul(v[0], v[1]).unwrap()),
        );
        assert_ok(
            &format!("scale {shape:?}"),
            check_gradients(&[a.clone()], EPS, 110 + s, |g, v| g.scale(v[0], -1.7)),
        );
        assert_ok(
            &format!("sum_all {shape:?}"),
            check_gradients(&[a], EPS, 120 + s, |g, v| g.sum_all(v[0])),
        );

        let am = separated_tensor(shape, 0.05, 130 + s);
        let bm = separated_tensor(shape, 0.05, 140 + s);
        assert_ok(
            &format!("emax {shape:?}"),
            check_gradients(&[am, bm], EPS, 150 + s, |g, v| g.emax(v[0], v[1]).unwrap()),
        );

        // Clamp kinks at 0 and 1: keep values away from both edges.
        let c = separated_tensor(shape, 0.05, 160 + s);
        let scaled: Vec<f32> = c.data().iter().map(|&v| 0.5 + v * 0.2).collect();
        let c = Tensor::from_vec(shape, scaled).unwrap();
        assert_ok(
            &format!("clamp01 {shape:?}"),
            check_gradients(&[c], EPS, 170 + s, |g, v| g.clamp01(v[0])),
        );
    }
}

#[test]
fn softmax_gradients() {
    for (i, (shape, axis)) in [(vec![7], 0usize), (vec![3, 5], 1), (vec![2, 3, 4], 1)].iter().enumerate() {
        let x = random_tensor(shape, -3.0, 3.0, 200 + i as u64);
        let axis = *axis;
        assert_ok(
            &format!("softmax {shape:?} axis {axis}"),
            check_gradients(&[x], EPS, 210 + i as u64, |g, v| g.softmax(v[0], axis).unwrap()),
        );
    }
}

#[test]
fn cross_entropy_gradients() {
    // From logits, including the stated 4x7 case.
    for (i, (rows, cols)) in [(4usize, 7usize), (3, 3), (6, 2)].iter().enumerate() {
        let x = random_tensor(&[*rows, *cols], -2.0, 2.0, 220 + i as u64);
        let labels: Vec<u32> = (0..*rows as u32).map(|r| r % *cols as u32).collect();
        assert_ok(
            &format!("cross_entropy logits {rows}x{cols}"),
            check_gradients(&[x], EPS, 230 + i as u64, move |g, v| {
                g.cross_entropy(v[0], &labels, false, None).unwrap().0
            }),
        );
    }

    // From probabilities (rows need not be normalized; values stay far from
    // the clamp floor).
    for (i, (rows, cols)) in [(3usize, 5usize), (2, 4), (5, 3)].iter().enumerate() {
        let x = random_tensor(&[*rows, *cols], 0.05, 0.9, 240 + i as u64);
        let labels: Vec<u32> = (0..*rows as u32).map(|r| (r + 1) % *cols as u32).collect();
        assert_ok(
            &format!("cross_entropy probs {rows}x{cols}"),
            check_gradients(&[x], EPS, 250 + i as u64, move |g, v| {
                g.cross_entropy(v[0], &labels, true, None).unwrap().0
            }),
        );
    }

    // Ignored rows contribute nothing.
    let x = random_tensor(&[4, 3], -2.0, 2.0, 260);
    let labels = vec![0u32, 9, 2, 9];
    assert_ok(
        "cross_entropy with ignore_index",
        check_gradients(&[x], EPS, 261, move |g, v| {
            g.cross_entropy(v[0], &labels, false, Some(9)).unwrap().0
        }),
    );
}

#[test]
fn pooling_and_upsample_gradients() {
    for (i, shape) in [vec![1, 2, 4, 4], vec![2, 1, 6, 4], vec![1, 3, 8, 8]].iter().enumerate() {
        let x = separated_tensor(shape, 0.05, 270 + i as u64);
        assert_ok(
            &format!("maxpool2x {shape:?}"),
            check_gradients(&[x], EPS, 280 + i as u64, |g, v| g.maxpool2x(v[0]).unwrap()),
        );
        let x = random_tensor(shape, -1.0, 1.0, 290 + i as u64);
        assert_ok(
            &format!("upsample2x {shape:?}"),
            check_gradients(&[x], EPS, 300 + i as u64, |g, v| g.upsample2x(v[0]).unwrap()),
        );
    }
}

#[test]
fn gather_concat_permute_gradients() {
    // Repeated indices exercise the scatter-add path.
    let cases: [(Vec<usize>, usize, Vec<usize>); 3] = [
        (vec![5, 4], 0, vec![0, 2, 2, 4]),
        (vec![2, 6], 1, vec![5, 0, 0]),
        (vec![3, 2, 2], 1, vec![1, 1]),
    ];
    for (i, (shape, axis, idx)) in cases.iter().enumerate() {
        let x = random_tensor(shape, -1.0, 1.0, 310 + i as u64);
        let (axis, idx) = (*axis, idx.clone());
        assert_ok(
            &format!("index_select {shape:?} axis {axis}"),
            check_gradients(&[x], EPS, 320 + i as u64, move |g, v| {
                g.index_select(v[0], axis, &idx).unwrap()
            }),
        );
    }

    for (i, (sa, sb, axis)) in [
        (vec![2usize, 3usize], vec![1usize, 3usize], 0usize),
        (vec![2, 2], vec![2, 4], 1),
        (vec![2, 2, 2], vec![2, 2, 3], 2),
    ]
    .iter()
    .enumerate()
    {
        let a = random_tensor(sa, -1.0, 1.0, 330 + i as u64);
        let b = random_tensor(sb, -1.0, 1.0, 340 + i as u64);
        let axis = *axis;
        assert_ok(
            &format!("concat axis {axis}"),
            check_gradients(&[a, b], EPS, 350 + i as u64, move |g, v| {
                g.concat(&[v[0], v[1]], axis).unwrap()
            }),
        );
    }

    for (i, order) in [vec![1usize, 0usize, 2usize], vec![2, 1, 0], vec![1, 2, 0]].iter().enumerate() {
        let x = random_tensor(&[2, 3, 4], -1.0, 1.0, 360 + i as u64);
        let order = order.clone();
        assert_ok(
            &format!("permute {order:?}"),
            check_gradients(&[x], EPS, 370 + i as u64, move |g, v| g.permute(v[0], &order).unwrap()),
        );
        let x = random_tensor(&[2, 3, 4], -1.0, 1.0, 380 + i as u64);
        assert_ok(
            "reshape",
            check_gradients(&[x], EPS, 390 + i as u64, |g, v| g.reshape(v[0], &[6, 4]).unwrap()),
        );
    }
}

#[test]
fn distance_and_selection_gradients() {
    for (i, (ka, ga, gb)) in [(4usize, (2usize, 3usize), (2usize, 2usize)), (8, (3, 3), (2, 3)), (3, (2, 2), (4, 2))]
        .iter()
        .enumerate()
    {
        let a = random_tensor(&[*ka, ga.0, ga.1], -1.0, 1.0, 400 + i as u64);
        let b = random_tensor(&[*ka, gb.0, gb.1], -1.0, 1.0, 410 + i as u64);
        assert_ok(
            &format!("distance_volume k={ka}"),
            check_gradients(&[a.clone(), b], EPS, 420 + i as u64, |g, v| {
                g.distance_volume(v[0], v[1]).unwrap()
            }),
        );
        assert_ok(
            &format!("feature_norms k={ka}"),
            check_gradients(&[a], EPS, 430 + i as u64, |g, v| g.feature_norms(v[0]).unwrap()),
        );
    }

    for (i, branches) in [2usize, 3, 4].iter().enumerate() {
        let shape = vec![3usize, 2, 2];
        let inputs: Vec<Tensor> = (0..*branches)
            .map(|b| random_tensor(&shape, -1.0, 1.0, 440 + i as u64 * 10 + b as u64))
            .collect();
        let winners: Vec<u32> = (0..4u32).map(|c| c % *branches as u32).collect();
        assert_ok(
            &format!("select_per_cell {branches} branches"),
            check_gradients(&inputs, EPS, 450 + i as u64, move |g, v: &[Var]| {
                g.select_per_cell(v, &winners).unwrap()
            }),
        );
    }
}

// ── End-to-end check ──────────────────────────────────────────────────────
//
// The architecture routes hard decisions everywhere: correspondence argmax,
// per-cell selection, relu activity, pool winners. Gradients are defined
// with those decisions held constant, so the finite-difference pass below
// replays the decisions recorded from the unperturbed forward (masks for
// relu, indices for pooling, maps for warping and selection) and checks
// every smooth op in the chain end to end. Parameters are scaled to 0.6x
// of their He init so untrained logit magnitudes stay small enough for the
// f32 forward not to drown the finite differences.

use std::cell::RefCell;

use swarmfuse::backbone;
use swarmfuse::correspond::build_normalized_volume;
use swarmfuse::fuse::{hard_select, warp_features, CorrespondenceMap};
use swarmfuse::tensor::ParamSet;
use swarmfuse::train::forward_method;

#[derive(Default)]
struct Decisions {
    relu_masks: Vec<Vec<f32>>,
    pool_indices: Vec<Vec<usize>>,
}

struct Tracer<'a> {
    record: bool,
    decisions: &'a RefCell<Decisions>,
    relu_cursor: usize,
    pool_cursor: usize,
}

impl Tracer<'_> {
    fn relu(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.record {
            let mask: Vec<f32> = g.value(x).data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            self.decisions.borrow_mut().relu_masks.push(mask);
            g.relu(x)
        } else {
            let mask = self.decisions.borrow().relu_masks[self.relu_cursor].clone();
            self.relu_cursor += 1;
            let m = g.constant(Tensor::from_vec(&g.value(x).shape().to_vec(), mask).unwrap());
            g.mul(x, m).unwrap()
        }
    }

    fn pool(&mut self, g: &mut Graph, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        if self.record {
            // First-wins argmax per window, matching the op's tie rule.
            let data = g.value(x).data();
            let mut idx = Vec::with_capacity(c * ho * wo);
            for p in 0..c {
                let plane = &data[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (oy * 2 + dy) * w + ox * 2 + dx;
                                if plane[i] > best {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                        idx.push(best_i);
                    }
                }
            }
            self.decisions.borrow_mut().pool_indices.push(idx);
            g.maxpool2x(x).unwrap()
        } else {
            let idx = self.decisions.borrow().pool_indices[self.pool_cursor].clone();
            self.pool_cursor += 1;
            let flat = g.reshape(x, &[c, h * w]).unwrap();
            let mut rows = Vec::with_capacity(c);
            for p in 0..c {
                let row = g.index_select(flat, 0, &[p]).unwrap();
                let sel = g.index_select(row, 1, &idx[p * ho * wo..(p + 1) * ho * wo]).unwrap();
                rows.push(sel);
            }
            let stacked = g.concat(&rows, 0).unwrap();
            g.reshape(stacked, &[1, c, ho, wo]).unwrap()
        }
    }
}

fn traced_forward(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &ModelConfig,
    sample: &swarmfuse::scenegen::SceneSample,
    pinned_map: &CorrespondenceMap,
    tracer: &mut Tracer<'_>,
) -> Var {
    let bb = &cfg.backbone;
    let conv = |g: &mut Graph, name: &str, x: Var| -> Var {
        let w = params.bind(g, &format!("{name}.w")).unwrap();
        let b = params.bind(g, &format!("{name}.b")).unwrap();
        g.conv2d(x, w, b, 1, 1).unwrap()
    };
    let mut encode = |g: &mut Graph, t: &mut Tracer, img: &[f32]| -> Var {
        let mut x = backbone::image_input(g, img, bb.height, bb.width).unwrap();
        for i in 0..bb.encoder_widths.len() {
            x = conv(g, &format!("enc.b{i}"), x);
            x = t.relu(g, x);
            x = t.pool(g, x);
        }
        let f = conv(g, "enc.proj", x);
        backbone::squeeze_batch(g, f).unwrap()
    };
    let own = encode(g, tracer, &sample.images[0]);
    let aux = encode(g, tracer, &sample.images[1]);
    let norm = build_normalized_volume(g, own, aux, cfg.tau, (0, 1)).unwrap();

    let channels = norm.channels();
    let spatial = g.reshape(norm.var, &[norm.h_a, norm.w_a, channels]).unwrap();
    let chw = g.permute(spatial, &[2, 0, 1]).unwrap();
    let mut x = g.reshape(chw, &[1, channels, norm.h_a, norm.w_a]).unwrap();
    for i in [1, 2] {
        x = conv(g, &format!("smooth.c{i}"), x);
        x = tracer.relu(g, x);
        x = tracer.pool(g, x);
    }
    for i in [3, 4] {
        x = g.upsample2x(x).unwrap();
        x = conv(g, &format!("smooth.c{i}"), x);
        if i == 3 {
            x = tracer.relu(g, x);
        }
    }
    let flat = g.reshape(x, &[channels, norm.cells_a()]).unwrap();
    let fibers = g.permute(flat, &[1, 0]).unwrap();
    let smoothed = g.softmax(fibers, 1).unwrap();

    let (warped, _) = warp_features(g, pinned_map, aux).unwrap();
    let fused = hard_select(g, own, &[(warped, pinned_map, 1)]).unwrap();
    let fused4 = backbone::unsqueeze_batch(g, fused.features).unwrap();

    let mut y = fused4;
    for i in 0..bb.decoder_widths.len() {
        y = conv(g, &format!("dec.b{i}"), y);
        y = tracer.relu(g, y);
        if i + 1 < bb.decoder_widths.len() {
            y = g.upsample2x(y).unwrap();
        }
    }
    y = g.upsample2x(y).unwrap();
    let logits = conv(g, "dec.out", y);

    let nl = g.value(logits).numel();
    let l1 = g.reshape(logits, &[nl]).unwrap();
    let nn = g.value(norm.var).numel();
    let l2 = g.reshape(norm.var, &[nn]).unwrap();
    let ns = g.value(smoothed).numel();
    let l3 = g.reshape(smoothed, &[ns]).unwrap();
    g.concat(&[l1, l2, l3], 0).unwrap()
}

#[test]
fn end_to_end_exchange_forward_gradient() {
    for (gen_seed, init_seed) in [(77u64, 5u64), (78, 6), (79, 7)] {
        let gen = GenConfig {
            height: 16,
            width: 16,
            world_size: 64,
            ..GenConfig::preset_defaults(Preset::Sequence, gen_seed, 1, 2)
        };
        let ds = generate_dataset(&gen).unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                height: 16,
                width: 16,
                stride: 4,
                feature_dim: 6,
                encoder_widths: vec![4, 6],
                decoder_widths: vec![6, 4],
                task: TaskHead::Segmentation,
                num_classes: 5,
            },
            tau: 1.0,
        };
        let mut model = init_model(Method::Main, &cfg, 2, init_seed).unwrap();
        model.params.scale_values(0.6);
        let sample = &ds.samples[0];

        // Routing from the unperturbed forward, held constant below.
        let mut g0 = Graph::new();
        let art = forward_method(&mut g0, &model, sample).unwrap();
        let pinned = art.fused.as_ref().unwrap().pairs[0].map.clone();

        let decisions = RefCell::new(Decisions::default());
        {
            let mut g = Graph::new();
            let mut tracer = Tracer { record: true, decisions: &decisions, relu_cursor: 0, pool_cursor: 0 };
            let _ = traced_forward(&mut g, &model.params, &cfg, sample, &pinned, &mut tracer);
        }

        let report = check_param_gradients(
            &model.params,
            &["enc.b0.w", "enc.proj.b", "dec.out.b", "smooth.c1.b"],
            EPS,
            500,
            |g, params| {
                let mut tracer = Tracer { record: false, decisions: &decisions, relu_cursor: 0, pool_cursor: 0 };
                traced_forward(g, params, &cfg, sample, &pinned, &mut tracer)
            },
        );
        assert_ok(&format!("end-to-end exchange forward (seeds {gen_seed}/{init_seed})"), report);
    }
}

#[test]
fn gradcheck_suite_is_fast_enough() {
    // The acceptance bound is five minutes for the whole suite; this canary
    // re-runs the heaviest single check and demands seconds, not minutes.
    let start = std::time::Instant::now();
    let x = random_tensor(&[2, 3, 8, 8], -1.0, 1.0, 900);
    let w = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, 901);
    let b = random_tensor(&[4], -0.2, 0.2, 902);
    let report = check_gradients(&[x, w, b], EPS, 903, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap());
    assert!(report.max_rel_err < TOL);
    assert!(start.elapsed().as_secs() < 60, "conv gradcheck took {:?}", start.elapsed());
}
