use proptest::prelude::*;

use crashground::contrastive::inst_loss;
use crashground::embed::{encode, EmbeddingModel, ModelDims};
use crashground::metrics::wasserstein_1d;
use crashground::rollout::obb_collision;
use crashground::safety::{score_agent, HeuristicConfig, SafetyLabel};
use crashground::scenario::{synth_generate, AgentDims, AgentState, Pose, Scenario, SynthConfig};

fn unit_rows(raw: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    raw.into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            let mut u: Vec<f64> = r.iter().map(|x| x / n).collect();
            if n <= 1e-6 {
                u = vec![0.0; r.len()];
                u[0] = 1.0;
            }
            u
        })
        .collect()
}

fn moved(s: &Scenario, rot: f64, tx: f64, ty: f64) -> Scenario {
    let (sr, cr) = rot.sin_cos();
    let mut out = s.clone();
    for traj in &mut out.trajectories {
        for st in &mut traj.states {
            if st.valid {
                *st = AgentState::new(cr * st.x - sr * st.y + tx, sr * st.x + cr * st.y + ty, st.heading + rot, st.speed);
            }
        }
    }
    for lane in &mut out.map.lanes {
        for p in &mut lane.points {
            *p = [cr * p[0] - sr * p[1] + tx, sr * p[0] + cr * p[1] + ty];
        }
    }
    out
}

fn corpus() -> Vec<Scenario> {
    synth_generate(
        &SynthConfig::with_counts([("crossing", 2), ("cut_in", 2), ("accelerate_into_crossing", 2), ("crash", 2)]),
        31,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Labels are ordered in d, and widening δ only moves labels toward neutral.
    #[test]
    fn label_monotone(d1 in -5.0..5.0f64, d2 in -5.0..5.0f64, delta in 0.0..3.0f64, extra in 0.0..3.0f64) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(SafetyLabel::from_diff(lo, delta).index() <= SafetyLabel::from_diff(hi, delta).index());
        let narrow = SafetyLabel::from_diff(d1, delta);
        let wide = SafetyLabel::from_diff(d1, delta + extra);
        prop_assert!(wide == SafetyLabel::Neutral || wide == narrow);
    }

    #[test]
    fn inst_loss_permutation_invariant(
        raw in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 2..10),
        label_idx in prop::collection::vec(0usize..3, 10),
        shift in 0usize..10,
        tau in 0.05..1.0f64,
    ) {
        let v = unit_rows(raw);
        let labels: Vec<SafetyLabel> = (0..v.len()).map(|i| SafetyLabel::ALL[label_idx[i]]).collect();
        let n = v.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p == (0..n).collect::<Vec<_>>() });
        let pv: Vec<Vec<f64>> = perm.iter().map(|&i| v[i].clone()).collect();
        let pl: Vec<SafetyLabel> = perm.iter().map(|&i| labels[i]).collect();
        let a = inst_loss(&v, &labels, tau).unwrap();
        let b = inst_loss(&pv, &pl, tau).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn wasserstein_is_a_metric(
        a in prop::collection::vec(-10.0..10.0f64, 1..25),
        b in prop::collection::vec(-10.0..10.0f64, 1..25),
        c in prop::collection::vec(-10.0..10.0f64, 1..25),
    ) {
        let ab = wasserstein_1d(&a, &b).unwrap();
        let ba = wasserstein_1d(&b, &a).unwrap();
        let bc = wasserstein_1d(&b, &c).unwrap();
        let ac = wasserstein_1d(&a, &c).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn obb_collision_is_symmetric(
        ax in -5.0..5.0f64, ay in -5.0..5.0f64, ah in -3.2..3.2f64,
        bx in -5.0..5.0f64, by in -5.0..5.0f64, bh in -3.2..3.2f64,
        l in 1.0..6.0f64, w in 0.5..3.0f64,
    ) {
        let d = AgentDims { length: l, width: w };
        let e = AgentDims { length: w + 1.0, width: l / 2.0 };
        let (a, b) = (Pose::new(ax, ay, ah), Pose::new(bx, by, bh));
        prop_assert_eq!(obb_collision(a, d, b, e), obb_collision(b, e, a, d));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Encoding and safety scores depend only on relative geometry.
    #[test]
    fn rigid_motion_invariance(rot in -3.1..3.1f64, tx in -500.0..500.0f64, ty in -500.0..500.0f64) {
        let dims = ModelDims { d_f: 8, d1: 12, d2: 4, modes: 2, horizon: 60, anchor_t: 20 };
        let m = EmbeddingModel::new(dims, 9).unwrap();
        let cfg = HeuristicConfig::default();
        for s in corpus() {
            let t = moved(&s, rot, tx, ty);
            let (za, zb) = (encode(&m, &s, s.adv_id).unwrap(), encode(&m, &t, t.adv_id).unwrap());
            for (x, y) in za.iter().zip(&zb) {
                prop_assert!((x - y).abs() < 1e-8, "encoding moved by {}", (x - y).abs());
            }
            let (sa, sb) = (score_agent(&s, s.adv_id, &cfg, 20).unwrap(), score_agent(&t, t.adv_id, &cfg, 20).unwrap());
            prop_assert!((sa.diff - sb.diff).abs() < 1e-8, "score difference moved by {}", (sa.diff - sb.diff).abs());
        }
    }
}
