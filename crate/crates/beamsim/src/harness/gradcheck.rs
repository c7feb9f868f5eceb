//! The oracle suites behind the `gradcheck` CLI command: every analytical
//! gradient in the crate checked against finite differences, plus the
//! dense-vs-reverse agreement of the unrolled pullback.

use crate::channel::{make_snr_mixture, GeometryScenario, PathConfig, SystemConfig};
use crate::error::Result;
use crate::feedback::FeedbackChannelModel;
use crate::nets::{Activation, EdnConfig, EdnDims, EdnNets, Mlp, MlpSpec, Mode, NormMode};
use crate::numerics::{
    crandn_matrix, derived_rng, randn_matrix, rel_err, seeded_rng, wirtinger_fd_oracle, CMat,
    FD_STEP,
};
use crate::rate::unrolled::{unrolled_pullback, unrolled_pullback_dense};
use crate::rate::{grad_sum_rate, grad_sum_rate_mimo, refine, sum_rate, sum_rate_mimo, Beamformer};
use crate::training::{
    backward_pipeline, forward_pipeline, kd_loss, SampleGenerator, ScenarioKind,
};

/// One suite's outcome: worst relative error observed and the gate it had to
/// stay under.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

/// Runs every oracle suite; all use streams derived from `seed`.
pub fn run_gradcheck(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut suites = Vec::new();
    suites.push(miso_gradient_suite(seed)?);
    suites.push(mimo_gradient_suite(seed)?);
    suites.push(pullback_suite(seed)?);
    suites.push(dense_vs_reverse_suite(seed)?);
    suites.push(net_backward_suite(seed)?);
    suites.push(pipeline_suite(seed)?);
    Ok(suites)
}

fn miso_gradient_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = derived_rng(seed, 0x6d69, 0);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let k = 1 + trial % 3;
        let n = 4 + trial % 5;
        let rows: Vec<CMat> = (0..k).map(|_| crandn_matrix(&mut rng, 1, n, 1.0)).collect();
        let w = crandn_matrix(&mut rng, n, k, 0.5);
        let g = grad_sum_rate(&rows, &w)?;
        let fd = wirtinger_fd_oracle(|m| sum_rate(&rows, m).unwrap(), &w, FD_STEP)?;
        worst = worst.max(rel_err(&g, &fd));
    }
    Ok(SuiteResult {
        name: "sum-rate gradient (MISO) vs finite differences".into(),
        worst_rel_err: worst,
        tolerance: 1e-6,
    })
}

fn mimo_gradient_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = derived_rng(seed, 0x6d6d, 0);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let k = 1 + trial % 3;
        let m = 1 + trial % 2;
        let n = 4 + trial % 4;
        let rows: Vec<CMat> = (0..k).map(|_| crandn_matrix(&mut rng, m, n, 1.0)).collect();
        let w = crandn_matrix(&mut rng, n, k * m, 0.5);
        let g = grad_sum_rate_mimo(&rows, &w)?;
        let fd = wirtinger_fd_oracle(|mm| sum_rate_mimo(&rows, mm).unwrap(), &w, FD_STEP)?;
        worst = worst.max(rel_err(&g, &fd));
    }
    Ok(SuiteResult {
        name: "sum-rate gradient (MIMO) vs finite differences".into(),
        worst_rel_err: worst,
        tolerance: 1e-6,
    })
}

fn tiny_generator(seed: u64) -> SampleGenerator {
    SampleGenerator {
        system: SystemConfig::new(4, 1, 2, 1.0),
        geometry: GeometryScenario::SpatialDivision { psi: 0.3 },
        paths: PathConfig::default(),
        noise: make_snr_mixture(5.0, 20.0, 4).expect("valid range"),
        sigma2_h: 0.1,
        feedback: FeedbackChannelModel::additive(0.1),
        d_latent: 4,
        kind: ScenarioKind::Digital,
        seed,
    }
}

fn tiny_nets(gen: &SampleGenerator, seed: u64) -> Result<EdnNets> {
    let dims = EdnDims {
        k: gen.system.k,
        m: gen.system.m,
        n_cols: gen.system.n,
        n_bf: gen.system.n,
        d_latent: gen.d_latent,
    };
    let cfg = EdnConfig {
        enc_hidden: vec![10],
        beamdec_hidden: vec![12],
        chandec_hidden: vec![10],
        dropout: 0.0,
        ..EdnConfig::default()
    };
    EdnNets::init(dims, &cfg, NormMode::Digital, &mut seeded_rng(seed))
}

fn pullback_suite(seed: u64) -> Result<SuiteResult> {
    let gen = tiny_generator(seed);
    let nets = tiny_nets(&gen, seed ^ 0x70)?;
    let mut worst = 0.0f64;
    for (ai, &alpha) in [0.0, 0.5, 1.0].iter().enumerate() {
        for (qi, &q_t) in [0usize, 1, 3].iter().enumerate() {
            let sample = gen.draw(0x7075, (ai * 3 + qi) as u64)?;
            let eta = 0.02;
            let inter = forward_pipeline(&nets, &sample, 1.0, q_t, eta, Mode::Eval, None)?;
            let w_final = inter.trace.final_beamformer();
            let gamma_q = grad_sum_rate(&sample.h, w_final)?.map(|z| z * (-alpha))
                + (w_final - &sample.teacher).map(|z| z * (2.0 * (1.0 - alpha)));
            let pulled = unrolled_pullback(&sample.h, &inter.trace, &gamma_q)?;
            let h_list = sample.h.clone();
            let teacher = sample.teacher.clone();
            let fd = wirtinger_fd_oracle(
                |w0| {
                    let b = Beamformer::new(w0.clone(), 1.0).unwrap();
                    let t = refine(&b, &h_list, eta, q_t, false).unwrap();
                    let wf = t.final_beamformer();
                    kd_loss(
                        alpha,
                        sum_rate(&h_list, wf).unwrap(),
                        (wf - &teacher).norm_squared(),
                    )
                },
                inter.w0(),
                1e-5,
            )?;
            worst = worst.max(rel_err(&pulled, &fd));
        }
    }
    Ok(SuiteResult {
        name: "unrolled pullback vs end-to-end finite differences".into(),
        worst_rel_err: worst,
        tolerance: 1e-5,
    })
}

fn dense_vs_reverse_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = derived_rng(seed, 0x6476, 0);
    let mut worst = 0.0f64;
    for q in [1usize, 2, 3] {
        let (n, k) = (4, 2);
        let rows: Vec<CMat> = (0..k).map(|_| crandn_matrix(&mut rng, 1, n, 1.0)).collect();
        let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, n, k, 1.0), 1.0)?;
        let trace = refine(&w0, &rows, 0.02, q, false)?;
        let g = crandn_matrix(&mut rng, n, k, 1.0);
        let a = unrolled_pullback(&rows, &trace, &g)?;
        let b = unrolled_pullback_dense(&rows, &trace, &g)?;
        worst = worst.max(rel_err(&a, &b));
    }
    Ok(SuiteResult {
        name: "unrolled pullback: dense block Jacobians vs reverse accumulation".into(),
        worst_rel_err: worst,
        tolerance: 1e-8,
    })
}

fn net_backward_suite(seed: u64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let specs = [
        MlpSpec::chain(
            &[8, 10, 4],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Tanh,
            false,
            0.0,
        ),
        MlpSpec::chain(
            &[8, 12, 16],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Identity,
            false,
            0.0,
        ),
        MlpSpec::chain(
            &[4, 10, 8],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Identity,
            true,
            0.0,
        ),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = derived_rng(seed, 0x6e62, i as u64);
        let mut mlp = Mlp::init(spec, &mut rng)?;
        let batch = 5;
        let x = randn_matrix(&mut rng, spec.in_dim(), batch, 1.0);
        let target = randn_matrix(&mut rng, spec.out_dim(), batch, 1.0);
        let mode = if spec.layers.iter().any(|l| l.batchnorm) {
            Mode::Train
        } else {
            Mode::Eval
        };
        let tape = mlp.forward_tape(&x, mode, None)?;
        let upstream = tape.output() - &target;
        let (grads, _) = mlp.backward(&tape, &upstream)?;
        let h = 1e-6;
        for li in 0..mlp.layers.len() {
            for idx in [0usize, mlp.layers[li].weight.len() - 1] {
                let orig = mlp.layers[li].weight[idx];
                mlp.layers[li].weight[idx] = orig + h;
                let tp = mlp.forward_tape(&x, mode, None)?;
                let lp = 0.5 * (tp.output() - &target).norm_squared();
                mlp.layers[li].weight[idx] = orig - h;
                let tm = mlp.forward_tape(&x, mode, None)?;
                let lm = 0.5 * (tm.output() - &target).norm_squared();
                mlp.layers[li].weight[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.weights[li][idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1.0));
            }
        }
    }
    Ok(SuiteResult {
        name: "network backward passes vs finite differences".into(),
        worst_rel_err: worst,
        tolerance: 1e-6,
    })
}

fn pipeline_suite(seed: u64) -> Result<SuiteResult> {
    let gen = tiny_generator(seed ^ 0x9);
    let nets = tiny_nets(&gen, seed ^ 0x91)?;
    let sample = gen.draw(0x7069, 0)?;
    let (alpha, q_t, eta, p) = (0.5, 2, 0.02, 1.0);
    let inter = forward_pipeline(&nets, &sample, p, q_t, eta, Mode::Eval, None)?;
    let (enc_g, dec_g) = backward_pipeline(&nets, &sample, &inter, alpha, p)?;
    let mut nets_mut = nets.clone();
    let h = 1e-4;
    let mut worst = 0.0f64;
    fn slot(n: &mut EdnNets, which: usize, layer: usize, idx: usize) -> &mut f64 {
        if which == 0 {
            &mut n.encoder.layers[layer].weight[idx]
        } else {
            &mut n.beam_decoder.layers[layer].weight[idx]
        }
    }
    let mut probe = |nets_mut: &mut EdnNets,
                     which: usize,
                     layer: usize,
                     idx: usize,
                     analytic: f64|
     -> Result<()> {
        let orig = *slot(nets_mut, which, layer, idx);
        *slot(nets_mut, which, layer, idx) = orig + h;
        let ip = forward_pipeline(nets_mut, &sample, p, q_t, eta, Mode::Eval, None)?;
        let lp = kd_loss(alpha, ip.r_sum, ip.l_sup);
        *slot(nets_mut, which, layer, idx) = orig - h;
        let im = forward_pipeline(nets_mut, &sample, p, q_t, eta, Mode::Eval, None)?;
        let lm = kd_loss(alpha, im.r_sum, im.l_sup);
        *slot(nets_mut, which, layer, idx) = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6));
        Ok(())
    };
    probe(&mut nets_mut, 0, 0, 2, enc_g.weights[0][2])?;
    probe(&mut nets_mut, 0, 1, 1, enc_g.weights[1][1])?;
    probe(&mut nets_mut, 1, 0, 3, dec_g.weights[0][3])?;
    probe(&mut nets_mut, 1, 1, 4, dec_g.weights[1][4])?;
    Ok(SuiteResult {
        name: "training pipeline parameter gradients vs finite differences".into(),
        worst_rel_err: worst,
        tolerance: 1e-5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_at_seed_zero() {
        let suites = run_gradcheck(0).unwrap();
        assert_eq!(suites.len(), 6);
        for s in &suites {
            assert!(
                s.passed(),
                "{}: worst {} > tol {}",
                s.name,
                s.worst_rel_err,
                s.tolerance
            );
        }
    }
}
