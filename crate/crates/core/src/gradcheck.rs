//! Central finite-difference checks of every backward rule, the CIoU loss,
//! the full objective and a tiny detector.
//!
//! Each case maps some inputs to an array, which is reduced to a scalar by
//! a fixed random weighting so every output element contributes. The error
//! of one coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
//! Stop-gradient constants are replayed at their unperturbed values, so the
//! numeric side differentiates the same function as backward.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Binary, ReduceKind, Shape, Tape, Unary, Var};
use crate::error::Result;
use crate::geometry::{ciou_loss_vars, BBox, BoxVars, LabeledBox};
use crate::loss::{total_loss, GridSpec};
use crate::model::{DetectorParams, ModelConfig};
use crate::taxonomy::{HierLossParams, Taxonomy};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Coordinates checked per input tensor; larger tensors are strided.
const MAX_COORDS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub primitive: bool,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

struct Case<'a> {
    name: String,
    primitive: bool,
    inputs: Vec<(Vec<f64>, Shape)>,
    build: Box<Build<'a>>,
}

fn evaluate(
    case: &Case,
    inputs: &[(Vec<f64>, Shape)],
    weights: Option<&[f64]>,
    fault: Option<&'static str>,
    replay: Option<Vec<Vec<f64>>>,
) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_sign_flip(op);
    }
    if let Some(r) = replay {
        tape.replay_stop_gradients(r);
    }
    let vars = inputs
        .iter()
        .map(|(d, s)| tape.variable(d.clone(), s.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let w = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    let flat = tape.reshape(out, Shape::vector(n)?)?;
    let wv = tape.constant(w, Shape::vector(n)?)?;
    let root = weighted_sum(&mut tape, flat, wv)?;
    Ok((tape, vars, root))
}

/// `Σ w_i x_i` as a matmul `[1, n] x [n, 1]`.
fn weighted_sum(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let row = tape.reshape(w, Shape::new(&[1, n])?)?;
    let col = tape.reshape(x, Shape::new(&[n, 1])?)?;
    tape.matmul(row, col)
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng, fault: Option<&'static str>) -> Result<CheckResult> {
    let mut sizing = Tape::new();
    let vars = case
        .inputs
        .iter()
        .map(|(d, s)| sizing.constant(d.clone(), s.clone()))
        .collect::<Result<Vec<_>>>()?;
    let raw_out = (case.build)(&mut sizing, &vars)?;
    let weights: Vec<f64> = (0..sizing.value(raw_out).len()).map(|_| rng.gen_range(0.5..1.5)).collect();

    let (mut tape, vars, root) = evaluate(case, &case.inputs, Some(&weights), fault, None)?;
    let frozen = tape.stop_gradient_values().to_vec();
    tape.backward(root)?;
    let value_at = |inputs: &[(Vec<f64>, Shape)]| -> Result<f64> {
        let (t, _, r) = evaluate(case, inputs, Some(&weights), None, Some(frozen.clone()))?;
        Ok(t.item(r))
    };

    let mut max_rel_err: f64 = 0.0;
    let mut coords = 0;
    for (k, (data, _)) in case.inputs.iter().enumerate() {
        let grad = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; data.len()]);
        let stride = data.len().div_ceil(MAX_COORDS);
        for i in (0..data.len()).step_by(stride) {
            let mut plus = case.inputs.clone();
            plus[k].0[i] += STEP;
            let mut minus = case.inputs.clone();
            minus[k].0[i] -= STEP;
            let numeric = (value_at(&plus)? - value_at(&minus)?) / (2.0 * STEP);
            let analytic = grad[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            max_rel_err = max_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: case.name.clone(),
        primitive: case.primitive,
        max_rel_err,
        tolerance: if case.primitive { PRIMITIVE_TOL } else { COMPOSITE_TOL },
        coords,
    })
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values in `±[0.1, 1]`, away from the kinks at 0.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims).expect("non-empty dims")
}

fn primitive<'a>(name: &str, inputs: Vec<(Vec<f64>, Shape)>, build: Box<Build<'a>>) -> Case<'a> {
    Case {
        name: name.to_string(),
        primitive: true,
        inputs,
        build,
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case<'static>> {
    let s23 = shape(&[2, 3]);
    let mut cases = Vec::new();

    let unary = [
        Unary::Neg,
        Unary::Sigmoid,
        Unary::Exp,
        Unary::Log,
        Unary::Relu,
        Unary::Square,
        Unary::Clamp { lo: -0.5, hi: 0.5 },
        Unary::Atan,
        Unary::Softplus,
    ];
    for kind in unary {
        let data = match kind {
            Unary::Log => uniform(rng, 6, 0.5, 2.0),
            Unary::Relu => signed_away_from_zero(rng, 6),
            // inside and outside the clamp range, away from its edges
            Unary::Clamp { .. } => vec![-0.9, -0.3, 0.0, 0.2, 0.4, 0.8],
            _ => uniform(rng, 6, -2.0, 2.0),
        };
        cases.push(primitive(
            kind.name(),
            vec![(data, s23.clone())],
            Box::new(move |t, v| t.unary(kind, v[0])),
        ));
    }

    for kind in [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div, Binary::Min, Binary::Max] {
        let a = uniform(rng, 6, -2.0, 2.0);
        let b: Vec<f64> = match kind {
            Binary::Div => signed_away_from_zero(rng, 6).iter().map(|x| 2.0 * x).collect(),
            // keep |a - b| >= 0.1 so min/max never switch branch
            Binary::Min | Binary::Max => a
                .iter()
                .map(|x| x + if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.1..1.0))
                .collect(),
            _ => uniform(rng, 6, -2.0, 2.0),
        };
        cases.push(primitive(
            kind.name(),
            vec![(a, s23.clone()), (b, s23.clone())],
            Box::new(move |t, v| t.binary(kind, v[0], v[1])),
        ));
    }
    cases.push(primitive(
        "mul (scalar broadcast)",
        vec![(uniform(rng, 6, -2.0, 2.0), s23.clone()), (uniform(rng, 1, -2.0, 2.0), Shape::scalar())],
        Box::new(|t, v| t.mul(v[0], v[1])),
    ));

    let targets = uniform(rng, 6, 0.0, 1.0);
    cases.push(primitive(
        "bce_with_logits",
        vec![(uniform(rng, 6, -3.0, 3.0), s23.clone())],
        Box::new(move |t, v| t.bce_with_logits(v[0], &targets)),
    ));
    cases.push(primitive(
        "scale",
        vec![(uniform(rng, 6, -2.0, 2.0), s23.clone())],
        Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
    ));
    cases.push(primitive(
        "add_scalar",
        vec![(uniform(rng, 6, -2.0, 2.0), s23.clone())],
        Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3))),
    ));
    cases.push(primitive(
        "matmul",
        vec![
            (uniform(rng, 6, -1.0, 1.0), shape(&[2, 3])),
            (uniform(rng, 12, -1.0, 1.0), shape(&[3, 4])),
        ],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    ));
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        cases.push(primitive(
            &format!("conv2d (stride {stride}, pad {pad})"),
            vec![
                (uniform(rng, 2 * 5 * 5, -1.0, 1.0), shape(&[2, 5, 5])),
                (uniform(rng, 3 * 2 * 3 * 3, -1.0, 1.0), shape(&[3, 2, 3, 3])),
            ],
            Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
        ));
    }
    cases.push(primitive(
        "bias_add",
        vec![
            (uniform(rng, 3 * 4 * 4, -1.0, 1.0), shape(&[3, 4, 4])),
            (uniform(rng, 3, -1.0, 1.0), shape(&[3])),
        ],
        Box::new(|t, v| t.bias_add(v[0], v[1])),
    ));
    // distinct values 0.05 apart so no pooling window has a near tie
    let mut pool: Vec<f64> = (0..32).map(|i| i as f64 * 0.05 - 0.8).collect();
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.gen_range(0..=i));
    }
    cases.push(primitive(
        "max_pool2",
        vec![(pool, shape(&[2, 4, 4]))],
        Box::new(|t, v| t.max_pool2(v[0])),
    ));
    for (kind, axes, label) in [
        (ReduceKind::Sum, vec![1], "reduce sum"),
        (ReduceKind::Mean, vec![0, 2], "reduce mean"),
        (ReduceKind::Sum, vec![0, 1, 2], "reduce sum (all)"),
    ] {
        cases.push(primitive(
            label,
            vec![(uniform(rng, 24, -1.0, 1.0), shape(&[2, 3, 4]))],
            Box::new(move |t, v| t.reduce(kind, v[0], &axes)),
        ));
    }
    cases.push(primitive(
        "gather",
        vec![(uniform(rng, 6, -1.0, 1.0), s23.clone())],
        Box::new(|t, v| t.gather(v[0], vec![5, 0, 0, 3], shape(&[4]))),
    ));
    cases.push(primitive(
        "reshape",
        vec![(uniform(rng, 6, -1.0, 1.0), s23)],
        Box::new(|t, v| t.reshape(v[0], shape(&[3, 2]))),
    ));
    cases
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox {
        cx: rng.gen_range(0.2..0.8),
        cy: rng.gen_range(0.2..0.8),
        w: rng.gen_range(0.1..0.4),
        h: rng.gen_range(0.1..0.4),
    }
}

fn composite_cases(rng: &mut ChaCha8Rng) -> Vec<Case<'static>> {
    let mut cases = Vec::new();

    // CIoU on overlapping, disjoint and nested pairs
    let gts: Vec<BBox> = (0..4).map(|_| random_box(rng)).collect();
    let mut preds: Vec<BBox> = gts
        .iter()
        .map(|g| BBox {
            cx: g.cx + rng.gen_range(-0.05..0.05),
            cy: g.cy + rng.gen_range(-0.05..0.05),
            w: g.w * rng.gen_range(0.7..1.3),
            h: g.h * rng.gen_range(0.7..1.3),
        })
        .collect();
    preds[1].cx = gts[1].cx + 0.6;
    preds[2] = BBox {
        w: gts[2].w * 0.5,
        h: gts[2].h * 0.4,
        ..gts[2]
    };
    preds[2].cx += 0.01;
    let field = |f: fn(&BBox) -> f64| (preds.iter().map(f).collect::<Vec<_>>(), shape(&[4]));
    let gt_boxes = gts.clone();
    cases.push(Case {
        name: "ciou".into(),
        primitive: false,
        inputs: vec![field(|b| b.cx), field(|b| b.cy), field(|b| b.w), field(|b| b.h)],
        build: Box::new(move |t, v| {
            let pred = BoxVars {
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            };
            ciou_loss_vars(t, pred, &gt_boxes)
        }),
    });

    // full objective on a random head, s=2, b=2, n_fine=4
    let grid = GridSpec::new(2, 4, vec![(0.3, 0.25), (0.45, 0.5)]).expect("valid grid");
    let taxonomy = Taxonomy::from_map(vec![0, 0, 1, 1]).expect("valid map");
    let gt = vec![
        LabeledBox {
            cls: 1,
            bbox: BBox::new(0.3, 0.35, 0.3, 0.2).expect("box"),
        },
        LabeledBox {
            cls: 2,
            bbox: BBox::new(0.7, 0.6, 0.4, 0.5).expect("box"),
        },
    ];
    let head = uniform(rng, grid.head_channels() * grid.cells(), -2.0, 2.0);
    for (label, params) in [
        ("loss normal", HierLossParams::normal()),
        ("loss class_weighted", HierLossParams::class_weighted(2.5)),
        ("loss proposed", HierLossParams::proposed(2.0, 1.0)),
    ] {
        let (grid, taxonomy, gt) = (grid.clone(), taxonomy.clone(), gt.clone());
        cases.push(Case {
            name: label.into(),
            primitive: false,
            inputs: vec![(head.clone(), shape(&[grid.head_channels(), grid.s, grid.s]))],
            build: Box::new(move |t, v| Ok(total_loss(t, v[0], &gt, &grid, &taxonomy, &params)?.root)),
        });
    }

    // tiny detector end to end
    let config = ModelConfig {
        image_size: 8,
        channels: vec![3, 4],
    };
    let dgrid = GridSpec::new(2, 4, vec![(0.3, 0.3), (0.5, 0.4)]).expect("valid grid");
    let det = DetectorParams::init(config, dgrid, rng.gen()).expect("valid model");
    let image = uniform(rng, 3 * 64, 0.0, 1.0);
    let inputs = det
        .tensors
        .iter()
        .map(|t| (t.data.clone(), shape(&t.shape)))
        .collect();
    let (dtax, dgt) = (taxonomy, gt);
    cases.push(Case {
        name: "detector".into(),
        primitive: false,
        inputs,
        build: Box::new(move |t, v| {
            let head = det.forward(t, v, &image)?;
            Ok(total_loss(t, head, &dgt, &det.grid, &dtax, &HierLossParams::proposed(2.0, 1.0))?.root)
        }),
    });
    cases
}

/// Runs every suite. `fault` negates the backward rule of the named op in
/// the analytic pass only; it exists to prove the checks can fail.
pub fn run(seed: u64, fault: Option<&'static str>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(composite_cases(&mut rng));
    cases.iter().map(|c| run_case(c, &mut rng, fault)).collect()
}
