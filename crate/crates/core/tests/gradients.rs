use crashground::contrastive::PrototypeSet;
use crashground::embed::{batch_gradient, embed_samples, EmbeddingModel, Group, ModelDims, TrainHyper, TrainSample};
use crashground::safety::SafetyLabel;
use crashground::scenario::synth::{synth_generate, SynthConfig};

fn small_dims() -> ModelDims {
    ModelDims {
        d_f: 6,
        d1: 10,
        d2: 4,
        modes: 2,
        horizon: 60,
        anchor_t: 20,
    }
}

fn batch(dims: &ModelDims) -> Vec<TrainSample> {
    let cfg = SynthConfig::with_counts([("crossing", 2), ("cut_in", 2), ("crash", 2)]);
    let scenarios = synth_generate(&cfg, 21).unwrap();
    let labels = [
        SafetyLabel::Safe,
        SafetyLabel::Safe,
        SafetyLabel::Neutral,
        SafetyLabel::Neutral,
        SafetyLabel::Unsafe,
        SafetyLabel::Unsafe,
    ];
    scenarios
        .iter()
        .zip(labels)
        .map(|(s, l)| TrainSample::new(dims, s, 1, l).unwrap())
        .collect()
}

/// Model with every group nonzero so no gradient path is trivially idle.
fn model(dims: ModelDims) -> EmbeddingModel {
    let mut m = EmbeddingModel::new(dims, 3).unwrap();
    for g in Group::ALL {
        for (k, p) in m.param_mut(g).iter_mut().enumerate() {
            if *p == 0.0 {
                *p = 0.1 * ((k as f64 + 1.0) * 1.7).sin();
            }
        }
    }
    m
}

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
// Relative error is measured against max(|numeric|, |analytic|, floor).
// Central differences on a loss of magnitude ~4e2 carry roundoff near
// eps·|L|/h ≈ 1e-8, so gradients below the floor are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

#[test]
fn analytic_gradient_matches_central_differences() {
    let dims = small_dims();
    let m = model(dims);
    let samples = batch(&dims);
    let mut protos = PrototypeSet::new(dims.d2, 0.8);
    let v = embed_samples(&m, &samples).unwrap();
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    protos.update(&v, &labels, 10.0).unwrap();
    let h = TrainHyper::default();
    let (_, g, _) = batch_gradient(&m, &samples, &protos, &h).unwrap();
    for grp in Group::ALL {
        let mut worst: f64 = 0.0;
        for i in m.layout().range(grp) {
            let mut p = m.clone();
            p.params[i] += FD_STEP;
            let lp = batch_gradient(&p, &samples, &protos, &h).unwrap().0.total;
            p.params[i] -= 2.0 * FD_STEP;
            let lm = batch_gradient(&p, &samples, &protos, &h).unwrap().0.total;
            let num = (lp - lm) / (2.0 * FD_STEP);
            let denom = num.abs().max(g[i].abs()).max(REL_FLOOR);
            worst = worst.max((num - g[i]).abs() / denom);
        }
        assert!(worst < REL_TOL, "{}: relative error {worst:e}", grp.name());
    }
}

#[test]
fn zero_lambda_leaves_projection_untrained() {
    let dims = small_dims();
    let m = model(dims);
    let samples = batch(&dims);
    let protos = PrototypeSet::new(dims.d2, 0.8);
    let h = TrainHyper {
        lambda: 0.0,
        ..TrainHyper::default()
    };
    let (loss, g, _) = batch_gradient(&m, &samples, &protos, &h).unwrap();
    assert_eq!(loss.inst, 0.0);
    assert_eq!(loss.proto, 0.0);
    for grp in [Group::WP, Group::BP] {
        assert!(g[m.layout().range(grp)].iter().all(|x| *x == 0.0), "{}", grp.name());
    }
}
