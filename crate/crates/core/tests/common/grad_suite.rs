//! Finite-difference checks for every differentiable op, a composed graph,
//! each fusion head and both backbones.

use moab::backbones::{GenomicMlp, ImageEncoder};
use moab::fusion::{FeatureVector, FusionConfig, FusionHead, FusionVariant, Modality};
use moab::tensor::{Graph, OuterKind, ParamStore, Tensor, Var};

use super::{away_from_zero, bind_from, gradcheck, normal, rng, with_params, Build, GradReport};

pub const POINTS: u64 = 10;
const MAX_COORDS: usize = 24;

pub struct CaseResult {
    pub name: String,
    pub points: usize,
    pub worst: f64,
    pub error: Option<String>,
}

fn vars(g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| g.variable(t.clone())).collect()
}

/// Runs `POINTS` random draws of one case.
fn case(name: &str, draw: impl Fn(u64) -> Vec<Tensor>, build: &Build) -> CaseResult {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let inputs = draw(point);
        match gradcheck(build, &inputs, MAX_COORDS, 1000 + point) {
            Ok(GradReport { max_rel_error, .. }) => worst = worst.max(max_rel_error),
            Err(e) => {
                return CaseResult {
                    name: name.into(),
                    points: point as usize,
                    worst,
                    error: Some(e),
                }
            }
        }
    }
    CaseResult {
        name: name.into(),
        points: POINTS as usize,
        worst,
        error: None,
    }
}

fn draw_normal(shapes: &'static [&'static [usize]], salt: u64) -> impl Fn(u64) -> Vec<Tensor> {
    move |p| {
        let mut r = rng(salt * 100 + p);
        shapes.iter().map(|s| normal(&mut r, s, 1.0)).collect()
    }
}

fn unary(name: &str, salt: u64, op: fn(&mut Graph, Var) -> Var) -> CaseResult {
    case(name, draw_normal(&[&[3, 5]], salt), &move |g, ts| {
        let v = vars(g, ts);
        (op(g, v[0]), v)
    })
}

fn op_cases() -> Vec<CaseResult> {
    let mut out = vec![
        case("matmul", draw_normal(&[&[3, 4], &[4, 2]], 1), &|g, ts| {
            let v = vars(g, ts);
            (g.matmul(v[0], v[1]).unwrap(), v)
        }),
        case("add_bias", draw_normal(&[&[3, 4], &[4]], 2), &|g, ts| {
            let v = vars(g, ts);
            (g.add_bias(v[0], v[1]).unwrap(), v)
        }),
        case("add", draw_normal(&[&[3, 4], &[3, 4]], 3), &|g, ts| {
            let v = vars(g, ts);
            (g.add(v[0], v[1]).unwrap(), v)
        }),
        case("mul", draw_normal(&[&[3, 4], &[3, 4]], 4), &|g, ts| {
            let v = vars(g, ts);
            (g.mul(v[0], v[1]).unwrap(), v)
        }),
        unary("neg", 21, |g, x| g.neg(x)),
        unary("sigmoid", 22, |g, x| g.sigmoid(x)),
        unary("softmax_rows", 23, |g, x| g.softmax_rows(x)),
        unary("sum", 24, |g, x| g.sum(x)),
        case(
            "relu",
            |p| vec![away_from_zero(&mut rng(500 + p), &[3, 4], 1e-3)],
            &|g, ts| {
                let v = vars(g, ts);
                (g.relu(v[0]), v)
            },
        ),
        case("layer_norm", draw_normal(&[&[3, 6], &[6], &[6]], 6), &|g, ts| {
            let v = vars(g, ts);
            (g.layer_norm(v[0], v[1], v[2]).unwrap(), v)
        }),
        case("dropout", draw_normal(&[&[4, 6]], 7), &|g, ts| {
            let v = vars(g, ts);
            // same seed on every call, so the mask is fixed
            let mut r = rng(77);
            (g.dropout(v[0], 0.3, true, &mut r).unwrap(), v)
        }),
        case("conv2d_1x1", draw_normal(&[&[2, 3, 4, 4], &[2, 3], &[2]], 8), &|g, ts| {
            let v = vars(g, ts);
            (g.conv2d_1x1(v[0], v[1], v[2]).unwrap(), v)
        }),
        case(
            "conv2d stride 2 pad 1",
            draw_normal(&[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]], 9),
            &|g, ts| {
                let v = vars(g, ts);
                (g.conv2d(v[0], v[1], v[2], 2, 1).unwrap(), v)
            },
        ),
        case(
            "conv2d stride 1 pad 0",
            draw_normal(&[&[1, 2, 5, 5], &[2, 2, 3, 3], &[2]], 10),
            &|g, ts| {
                let v = vars(g, ts);
                (g.conv2d(v[0], v[1], v[2], 1, 0).unwrap(), v)
            },
        ),
        case("global_avg_pool", draw_normal(&[&[2, 3, 4, 4]], 11), &|g, ts| {
            let v = vars(g, ts);
            (g.global_avg_pool(v[0]).unwrap(), v)
        }),
        case("cross_entropy", draw_normal(&[&[4, 3]], 12), &|g, ts| {
            let v = vars(g, ts);
            (g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap(), v)
        }),
        case("pad_front", draw_normal(&[&[3, 4]], 13), &|g, ts| {
            let v = vars(g, ts);
            (g.pad_front(v[0], 1.0).unwrap(), v)
        }),
        case("stack_channels", draw_normal(&[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]], 14), &|g, ts| {
            let v = vars(g, ts);
            (g.stack_channels(&v).unwrap(), v)
        }),
        case("reshape", draw_normal(&[&[2, 12]], 15), &|g, ts| {
            let v = vars(g, ts);
            (g.reshape(v[0], &[2, 3, 4]).unwrap(), v)
        }),
        case("flatten", draw_normal(&[&[2, 3, 4]], 16), &|g, ts| {
            let v = vars(g, ts);
            (g.flatten(v[0]).unwrap(), v)
        }),
        case("concat_cols", draw_normal(&[&[2, 3], &[2, 4]], 17), &|g, ts| {
            let v = vars(g, ts);
            (g.concat_cols(v[0], v[1]).unwrap(), v)
        }),
    ];
    for (name, kind) in [
        ("outer add", OuterKind::Add),
        ("outer sub", OuterKind::Sub),
        ("outer mul", OuterKind::Mul),
    ] {
        out.push(case(name, draw_normal(&[&[2, 4], &[2, 5]], 18), &move |g, ts| {
            let v = vars(g, ts);
            (g.outer(v[0], v[1], kind).unwrap(), v)
        }));
    }
    out.push(case(
        "outer div",
        |p| {
            let mut r = rng(1900 + p);
            vec![normal(&mut r, &[2, 4], 1.0), away_from_zero(&mut r, &[2, 5], 0.1)]
        },
        &|g, ts| {
            let v = vars(g, ts);
            (g.outer(v[0], v[1], OuterKind::Div { eps: 1.2e-20 }).unwrap(), v)
        },
    ));
    out.push(case(
        "composed graph",
        draw_normal(&[&[3, 4], &[4, 5], &[5], &[5], &[5], &[3, 6]], 20),
        &|g, ts| {
            let v = vars(g, ts);
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_bias(h, v[2]).unwrap();
            let h = g.sigmoid(h);
            let h = g.layer_norm(h, v[3], v[4]).unwrap();
            let p = g.pad_front(h, 1.0).unwrap();
            let o = g.outer(p, v[5], OuterKind::Mul).unwrap();
            let f = g.flatten(o).unwrap();
            let s = g.softmax_rows(f);
            let n = g.neg(s);
            (g.concat_cols(n, h).unwrap(), v)
        },
    ));
    out
}

fn head_case(variant: FusionVariant) -> CaseResult {
    let mut store = ParamStore::new();
    let cfg = FusionConfig::new(variant);
    let head = FusionHead::new(cfg, &mut store, "head", &mut rng(31)).unwrap();
    let name = format!("fusion head {variant}");
    case(
        &name,
        |p| {
            let mut r = rng(3000 + p);
            let a = normal(&mut r, &[2, 32], 1.0);
            // division needs denominators away from the pole
            let b = away_from_zero(&mut r, &[2, 32], 0.1);
            let mut all = with_params(vec![a, b], &store);
            for t in all.iter_mut().skip(2) {
                let noise = normal(&mut r, t.shape(), 0.05);
                for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
                    *x += n;
                }
            }
            all
        },
        &|g, ts| {
            let a = g.variable(ts[0].clone());
            let b = g.variable(ts[1].clone());
            let (bound, pv) = bind_from(g, &store, ts, 2);
            let fa = FeatureVector::new(g, a, Modality::Image).unwrap();
            let fb = FeatureVector::new(g, b, Modality::Genes).unwrap();
            let mut r = rng(5);
            let out = head.forward(g, &bound, &fa, &fb, true, &mut r).unwrap();
            let mut leaves = vec![a, b];
            leaves.extend(pv);
            (out.logits, leaves)
        },
    )
}

fn mlp_case() -> CaseResult {
    let mut store = ParamStore::new();
    let mlp = GenomicMlp::new(&mut store, "mlp", &mut rng(41)).unwrap();
    case(
        "genomic mlp",
        |p| with_params(vec![normal(&mut rng(4000 + p), &[3, 80], 1.0)], &store),
        &|g, ts| {
            let x = g.variable(ts[0].clone());
            let (bound, pv) = bind_from(g, &store, ts, 1);
            let mut r = rng(6);
            let e = mlp.embed(g, &bound, x, true, &mut r).unwrap();
            let mut leaves = vec![x];
            leaves.extend(pv);
            (e, leaves)
        },
    )
}

/// Smallest |pre-activation| of the encoder's two ReLUs, recomputed from
/// the stored parameters.
fn encoder_relu_margin(store: &ParamStore, ts: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (bound, _) = bind_from(&mut g, store, ts, 1);
    let p = |name: &str| bound.var(store.id(name).unwrap());
    let x = g.constant(ts[0].clone());
    let z1 = g
        .conv2d(x, p("img.conv1.weight"), p("img.conv1.bias"), 2, 1)
        .unwrap();
    let h1 = g.relu(z1);
    let z2 = g
        .conv2d(h1, p("img.conv2.weight"), p("img.conv2.bias"), 2, 1)
        .unwrap();
    [z1, z2]
        .iter()
        .flat_map(|&z| g.value(z).data().to_vec())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn encoder_case() -> CaseResult {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, "img", &mut rng(51)).unwrap();
    case(
        "image encoder",
        |p| {
            // redraw until no ReLU input sits within reach of the FD step
            let mut r = rng(5000 + p);
            loop {
                let img = normal(&mut r, &[2, 1, 32, 32], 0.5);
                let all = with_params(vec![img], &store);
                if encoder_relu_margin(&store, &all) > 1e-3 {
                    return all;
                }
            }
        },
        &|g, ts| {
            let x = g.variable(ts[0].clone());
            let (bound, pv) = bind_from(g, &store, ts, 1);
            let e = enc.embed(g, &bound, x).unwrap();
            let mut leaves = vec![x];
            leaves.extend(pv);
            (e, leaves)
        },
    )
}

pub fn run_all() -> Vec<CaseResult> {
    let mut out = op_cases();
    for v in FusionVariant::ALL {
        out.push(head_case(v));
    }
    out.push(mlp_case());
    out.push(encoder_case());
    out
}
