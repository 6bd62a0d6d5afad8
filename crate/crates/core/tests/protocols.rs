//! Two-party protocols, transcripts and the audit, exercised end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use smpc_fedsim::audit::{audit_transcript, opened_values, uniformity};
use smpc_fedsim::dealer::{Dealer, MaterialPlan};
use smpc_fedsim::fedavg::secure_aggregate;
use smpc_fedsim::fss::{eval_dcf, gen_dcf};
use smpc_fedsim::model::{ModelParams, Shape3};
use smpc_fedsim::mpc::MpcParty;
use smpc_fedsim::ring::{FixedPointConfig, RingElement};
use smpc_fedsim::secure_nn::{encrypt_model, InferenceRunner};
use smpc_fedsim::sharing::{self, ShareVector};
use smpc_fedsim::simnet::{LinkModel, Links, PartyProgram, Simulation};

#[test]
fn dcf_ten_bit_sampled_thresholds() {
    let cfg = FixedPointConfig::new(10, 4).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for _ in 0..24 {
        let alpha = cfg.random(&mut rng);
        let beta = cfg.random(&mut rng);
        let (k0, k1) = gen_dcf(alpha, beta, cfg, &mut rng);
        for x in 0..1024u64 {
            let x = RingElement(x);
            let got = cfg.add(eval_dcf(&k0, x, cfg), eval_dcf(&k1, x, cfg));
            let want = if x.0 <= alpha.0 { beta } else { RingElement::ZERO };
            assert_eq!(got, want, "alpha={} x={}", alpha.0, x.0);
        }
    }
}

fn run_two<T: 'static>(
    cfg: FixedPointConfig,
    plan: &MaterialPlan,
    seed: u64,
    x: &[RingElement],
    body: fn(MpcParty, ShareVector) -> PartyProgram<'static, T>,
) -> (Vec<T>, Simulation) {
    let sim = Simulation::new(2, Links::default(), seed);
    let [p0, p1] = Dealer::new(cfg, seed).provision(plan);
    let s = sharing::share(x, 2, cfg, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
    let m0 = MpcParty::new(sim.context(0), cfg, p0).unwrap();
    let m1 = MpcParty::new(sim.context(1), cfg, p1).unwrap();
    let out = sim.run(vec![(0, body(m0, s[0].clone())), (1, body(m1, s[1].clone()))]).unwrap();
    (out, sim)
}

fn interesting_values(cfg: FixedPointConfig, rng: &mut ChaCha20Rng, n: usize) -> Vec<RingElement> {
    let edge = [0i64, 1, -1, 2, -2, i64::MAX, i64::MIN, i64::MAX - 1, i64::MIN + 1];
    let mut v: Vec<RingElement> = edge.iter().map(|&e| cfg.from_signed(e)).collect();
    while v.len() < n {
        let r = if rng.gen_bool(0.5) { rng.gen_range(-4096i64..4096) } else { rng.gen() };
        v.push(cfg.from_signed(r));
    }
    v
}

#[test]
fn secure_comparison_full_ring() {
    let cfg = FixedPointConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let ys = interesting_values(cfg, &mut rng, 400);
    let mut plan = MaterialPlan::default();
    plan.comparison(ys.len());
    let (out, sim) = run_two(cfg, &plan, 13, &ys, |mut m, y| Box::pin(async move { m.compare_leq_zero(&y).await }));
    let bits = sharing::reconstruct(&out).unwrap();
    for (y, b) in ys.iter().zip(bits) {
        assert_eq!(b.0, (cfg.signed(*y) <= 0) as u64, "y={}", cfg.signed(*y));
    }
    // One masked opening, one message each way.
    assert_eq!(sim.transcript().records.len(), 2);
}

#[test]
fn secure_relu_matches_plain() {
    let cfg = FixedPointConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let ys = interesting_values(cfg, &mut rng, 300);
    let mut plan = MaterialPlan::default();
    plan.comparison(ys.len());
    plan.triple(ys.len());
    let (out, _) = run_two(cfg, &plan, 15, &ys, |mut m, y| Box::pin(async move { m.relu(&y).await }));
    let got = sharing::reconstruct(&out).unwrap();
    for (y, r) in ys.iter().zip(got) {
        let want = if cfg.signed(*y) > 0 { *y } else { RingElement::ZERO };
        assert_eq!(r, want, "y={}", cfg.signed(*y));
    }
}

fn dense_models(n: usize, params: usize, seed: u64) -> Vec<ModelParams> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = (0..params - 1).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let layer = smpc_fedsim::model::Layer::Dense { inputs: params - 1, outputs: 1, weights: w, bias: vec![0.5] };
            ModelParams::new(Shape3::flat(params - 1), vec![layer]).unwrap()
        })
        .collect()
}

#[test]
fn aggregation_bytes_and_link_independence() {
    let cfg = FixedPointConfig::default();
    let models = dense_models(3, 1000, 16);
    let (_, fast) = secure_aggregate(&models, cfg, Links::uniform(LinkModel::six_g()), 5).unwrap();
    let (_, slow) = secure_aggregate(&models, cfg, Links::uniform(LinkModel::four_g()), 5).unwrap();
    let (_, again) = secure_aggregate(&models, cfg, Links::uniform(LinkModel::six_g()), 5).unwrap();
    assert_eq!(fast.total_sent(), 3 * 2 * 1000 * 8);
    assert_eq!(fast.content_hash(), slow.content_hash());
    assert!(slow.makespan_ns() > fast.makespan_ns());
    assert_eq!(fast.hash(), again.hash());
    let (_, reseeded) = secure_aggregate(&models, cfg, Links::uniform(LinkModel::six_g()), 6).unwrap();
    assert_ne!(fast.content_hash(), reseeded.content_hash());
}

#[test]
fn aggregation_transcript_passes_audit() {
    let cfg = FixedPointConfig::default();
    let (_, t) = secure_aggregate(&dense_models(4, 50, 17), cfg, Links::default(), 1).unwrap();
    let rep = audit_transcript(&t, cfg.element_bytes());
    assert!(rep.passed(), "{:?}", rep.violations);
    assert_eq!(rep.input_shares, 8);
}

#[test]
fn inference_transcript_passes_audit_and_openings_look_uniform() {
    let cfg = FixedPointConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    let m = ModelParams::reference_with(Shape3::new(1, 8, 8), 2, 8, 3, &mut rng);
    let [s0, s1] = encrypt_model(&m, cfg, &mut rng).unwrap();
    let sim = Simulation::new(3, Links::default(), 19);
    sim.record_payloads(true);
    let mut runner = InferenceRunner::new(sim, [&s0, &s1], 20).unwrap();
    let inputs: Vec<Vec<f64>> = (0..4).map(|_| (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    runner.run_batch(&inputs).unwrap();
    let t = runner.simulation().transcript();
    let rep = audit_transcript(&t, cfg.element_bytes());
    assert!(rep.passed(), "{:?}", rep.violations);
    assert_eq!(rep.reveals, 2 * inputs.len());
    assert!(rep.beaver_opens > 0 && rep.masked_opens > 0);

    let opened = opened_values(&t, cfg).unwrap();
    assert!(opened.len() > 5000, "{}", opened.len());
    let chi = uniformity(&opened, cfg);
    assert!(chi.passes(0.001), "{chi:?}");
}
