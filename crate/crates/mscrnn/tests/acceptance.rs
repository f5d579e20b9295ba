//! Release gate: one test per acceptance criterion, each printing a single
//! pass/fail line (visible with `-- --nocapture`). Criteria 3-6 share one
//! trained pipeline, built once.

use mscrnn::baseline::{
    calibrate_threshold, m_of_n_detect, unwrap_phase, window_displacements, DetectorConfig,
};
use mscrnn::cascade::{
    joint_batch_grad, msc_infer, train_msc, Decision, MSCModel, MscConfig,
};
use mscrnn::emi::{
    dataset_instances, mi_relabel, scan_consecutive, split_instances, train_emi, EMIModel,
    EmiConfig, InstanceSet, LowerDecision, LowerLossMode,
};
use mscrnn::fastgrnn::{forward, init_params, Readout};
use mscrnn::metrics::evaluate;
use mscrnn::numerics::{finite_diff_grad, softmax};
use mscrnn::quant::{
    agreement_report, dequantize_cell, float_ref_cell_step, quant_cell_step, quant_msc_infer,
    quantize_cell, quantize_model, quantize_q15, H_SCALE_EXP,
};
use mscrnn::radar::{
    gen_clutter, gen_source, splitmix64, window_dataset, GenConfig, IQSeries, Label, SourceKind,
    Split, WindowedDataset,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn criterion<F: FnOnce() + std::panic::UnwindSafe>(number: usize, name: &str, body: F) {
    let result = std::panic::catch_unwind(body);
    println!(
        "criterion {} ({}): {}",
        number,
        name,
        if result.is_ok() { "pass" } else { "fail" }
    );
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

// ---------------------------------------------------------------------------
// Shared pipeline for criteria 3-6: synthetic 3-class dataset, full training.

struct Pipeline {
    model: MSCModel,
    test_sets: Vec<InstanceSet>,
    dataset: WindowedDataset,
    train_seconds: f64,
}

fn synth_series(
    n_clutter: usize,
    n_human: usize,
    n_nonhuman: usize,
    duration_s: f64,
    seed: u64,
) -> Vec<IQSeries> {
    let cfg = GenConfig::default();
    let mut state = seed;
    let mut out = Vec::new();
    for _ in 0..n_clutter {
        out.push(gen_clutter(duration_s, splitmix64(&mut state), &cfg).unwrap());
    }
    for _ in 0..n_human {
        out.push(gen_source(SourceKind::Human, duration_s, splitmix64(&mut state), &cfg).unwrap());
    }
    for _ in 0..n_nonhuman {
        out.push(
            gen_source(SourceKind::NonHuman, duration_s, splitmix64(&mut state), &cfg).unwrap(),
        );
    }
    out
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let series = synth_series(60, 30, 30, 20.0, 0xACCE_0001);
        let cfg = MscConfig::default();
        let dataset = window_dataset(
            &series,
            1.0,
            (0.6, 0.2, 0.2),
            cfg.lower.omega,
            cfg.lower.stride,
            0xACCE_0002,
        )
        .unwrap();
        assert!(dataset.windows.len() >= 2000, "need a 2,000+ window corpus");
        let train_sets = split_instances(&dataset, Split::Train).unwrap();
        let started = Instant::now();
        let (model, _history) = train_msc(&train_sets, &cfg, 0xACCE_0003).unwrap();
        let train_seconds = started.elapsed().as_secs_f64();
        let test_sets = split_instances(&dataset, Split::Test).unwrap();
        Pipeline {
            model,
            test_sets,
            dataset,
            train_seconds,
        }
    })
}

// ---------------------------------------------------------------------------
// 1. BPTT gradients vs central finite differences on random small cascades.

fn random_cascade(rng: &mut ChaCha8Rng) -> (MSCModel, Vec<InstanceSet>, Vec<Option<usize>>) {
    let d = rng.gen_range(1..=4usize);
    let dl = rng.gen_range(1..=8usize);
    let du = rng.gen_range(1..=8usize);
    let classes = rng.gen_range(2..=3usize);
    let t = rng.gen_range(2..=10usize);
    let n_inst = rng.gen_range(2..=3usize);
    let k = rng.gen_range(1..=n_inst);
    let lower_rank = if rng.gen_bool(0.5) {
        Some(rng.gen_range(1..=d.min(dl)))
    } else {
        None
    };
    let upper_rank = if rng.gen_bool(0.5) {
        Some(rng.gen_range(1..=dl.min(du)))
    } else {
        None
    };
    let seed: u64 = rng.gen();
    let model = MSCModel {
        lower: EMIModel {
            cell: init_params(d, dl, lower_rank, seed).unwrap(),
            readout: Readout::init(2, dl, seed ^ 1),
            k,
            p_hat: 0.5,
        },
        upper_cell: init_params(dl, du, upper_rank, seed ^ 2).unwrap(),
        upper_readout: Readout::init(classes, du, seed ^ 3),
    };
    let mut window = |label: Label, origin: usize| InstanceSet {
        instances: (0..n_inst)
            .map(|_| {
                (0..t)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect(),
        window_label: label,
        origin,
    };
    let data = vec![window(Label::Clutter, 0), window(Label::Human, 1)];
    let span = rng.gen_range(0..=n_inst - k);
    (model, data, vec![None, Some(span)])
}

#[test]
fn acceptance_1_gradient_correctness() {
    criterion(1, "BPTT gradients match finite differences", || {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_1001);
        for trial in 0..50 {
            let (model, data, spans) = random_cascade(&mut rng);
            let idxs = [0usize, 1];
            let mode = if trial % 2 == 0 {
                LowerLossMode::FinalStep
            } else {
                LowerLossMode::EveryStep
            };
            let (_, analytic) = joint_batch_grad(&model, &data, &spans, &idxs, mode).unwrap();
            let theta = model.flatten();
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.unflatten_from(p);
                joint_batch_grad(&m, &data, &spans, &idxs, mode).unwrap().0
            };
            let numeric = finite_diff_grad(&f, &theta, 1e-5).unwrap();
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                assert!(
                    rel <= 1e-4,
                    "trial {} param {}: analytic {} vs numeric {} (rel {})",
                    trial,
                    i,
                    a,
                    n,
                    rel
                );
            }
        }
        let elapsed = started.elapsed().as_secs_f64();
        assert!(elapsed < 60.0, "gradient check took {:.1} s", elapsed);
    });
}

// ---------------------------------------------------------------------------
// 2. mi_relabel vs exhaustive span search.

fn brute_force_span(probs: &[f64], k: usize) -> usize {
    let mut best_s = 0;
    let mut best = f64::NEG_INFINITY;
    for s in 0..=probs.len() - k {
        let sum: f64 = probs[s..s + k].iter().sum();
        if sum > best {
            best = sum;
            best_s = s;
        }
    }
    best_s
}

#[test]
fn acceptance_2_relabel_oracle() {
    criterion(2, "mi_relabel equals exhaustive span search", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_2001);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=20usize);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            for k in 1..=n {
                assert_eq!(
                    mi_relabel(&probs, k).unwrap(),
                    brute_force_span(&probs, k),
                    "probs {:?} k {}",
                    probs,
                    k
                );
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 3. End-to-end training quality on the held-out split.

#[test]
fn acceptance_3_end_to_end_training() {
    criterion(3, "3-class pipeline accuracy on held-out split", || {
        let p = pipeline();
        assert!(
            p.train_seconds < 900.0,
            "training took {:.0} s (budget 900)",
            p.train_seconds
        );
        let m = evaluate(&p.model, &p.test_sets).unwrap();
        assert!(
            m.accuracy >= 0.95,
            "held-out accuracy {:.4} < 0.95\n{}",
            m.accuracy,
            m.render_table()
        );
        assert!(
            m.clutter_recall() >= 0.99,
            "clutter recall {:.4} < 0.99\n{}",
            m.clutter_recall(),
            m.render_table()
        );
    });
}

// ---------------------------------------------------------------------------
// 4. Gating audit on a 10,000-window stream at clutter fraction 0.97.

#[test]
fn acceptance_4_cascade_gating() {
    criterion(4, "upper tier gated off on clutter", || {
        let p = pipeline();
        // 97 x 100 s clutter + 2 x 15 x 10 s sources = 10,000 one-second windows.
        let mut series = synth_series(97, 0, 0, 100.0, 0xACCE_4001);
        series.extend(synth_series(0, 15, 15, 10.0, 0xACCE_4002));
        let ds = window_dataset(
            &series,
            1.0,
            (0.98, 0.01, 0.01),
            p.dataset.omega,
            p.dataset.stride,
            0xACCE_4003,
        )
        .unwrap();
        let sets = dataset_instances(&ds).unwrap();
        assert_eq!(sets.len(), 10_000);
        let true_source_fraction = sets
            .iter()
            .filter(|s| !s.window_label.is_clutter())
            .count() as f64
            / sets.len() as f64;
        let mut invoked = 0usize;
        for set in &sets {
            let trace = msc_infer(&p.model, &set.instances).unwrap();
            if trace.decision == Decision::Clutter {
                assert_eq!(trace.flops_upper, 0, "upper FLOPs on a clutter decision");
                assert!(!trace.upper_invoked);
            }
            invoked += trace.upper_invoked as usize;
        }
        let rate = invoked as f64 / sets.len() as f64;
        assert!(
            rate <= true_source_fraction + 0.02,
            "upper invoked on {:.4} of windows, true source fraction {:.4}",
            rate,
            true_source_fraction
        );
    });
}

// ---------------------------------------------------------------------------
// 5. Cost model: closed-form figure and trace consistency.

#[test]
fn acceptance_5_cost_model() {
    criterion(5, "expected cost formula and trace consistency", || {
        let expected = mscrnn::cost::expected_flops_per_window(8_000.0, 35_000.0, 0.97);
        assert_eq!(expected, 9_050.0);
        assert!((expected - 9_000.0).abs() / 9_000.0 < 0.2);

        // Instrumented traces vs the analytic formula with measured stats.
        let p = pipeline();
        let n_inst = (p.dataset.window_len - p.dataset.omega) / p.dataset.stride + 1;
        let dims = p
            .model
            .dims(p.dataset.window_len, p.dataset.omega, n_inst);
        let mut consumed = 0.0;
        let mut deferred = 0.0;
        let mut invocations = 0usize;
        let mut measured = 0.0;
        for set in &p.test_sets {
            let t = msc_infer(&p.model, &set.instances).unwrap();
            measured += (t.flops_lower + t.flops_upper) as f64;
            consumed += t.lower_instances_consumed as f64;
            if t.upper_invoked {
                deferred += (n_inst - t.lower_instances_consumed) as f64;
                invocations += 1;
            }
        }
        let n = p.test_sets.len() as f64;
        measured /= n;
        let stats = mscrnn::cost::EarlyExitStats {
            mean_instances_consumed: consumed / n,
            mean_deferred_instances: deferred / invocations.max(1) as f64,
        };
        let c = 1.0 - invocations as f64 / n;
        let report = mscrnn::cost::expected_cost(&dims, c, Some(stats)).unwrap();
        let rel = (report.expected_flops_per_window - measured).abs() / measured;
        assert!(
            rel < 0.05,
            "analytic {:.0} vs measured {:.0} FLOPs/window (rel {:.3})",
            report.expected_flops_per_window,
            measured,
            rel
        );
    });
}

// ---------------------------------------------------------------------------
// 6. Quantization fidelity and bit-exactness.

#[test]
fn acceptance_6_quantization_fidelity() {
    criterion(6, "Q15 engine agreement and repeatability", || {
        let p = pipeline();
        let q = quantize_model(&p.model).unwrap();
        let report = agreement_report(&p.model, &q, &p.test_sets).unwrap();
        assert!(
            report.label_agreement >= 0.99,
            "label agreement {:.4} < 0.99",
            report.label_agreement
        );
        // Rounding error in isolation: the integer cell tracks a float
        // reference that uses the same piecewise-linear nonlinearities to
        // within 2^-10 per hidden coordinate on random cells and inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_6001);
        for rank in [None, Some(2)] {
            for seed in 0..10u64 {
                let cell = init_params(4, 8, rank, 0xACCE_6100 + seed).unwrap();
                let qc = quantize_cell(&cell).unwrap();
                let ref_cell = dequantize_cell(&qc);
                let mut qh = vec![0i16; 8];
                let mut fh = vec![0.0f64; 8];
                for _ in 0..24 {
                    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let qx = quantize_q15(&x, vec![4]).unwrap();
                    let xd = qx.dequantize();
                    qh = quant_cell_step(&qc, &qx.data, qx.scale_exp, &qh).unwrap();
                    fh = float_ref_cell_step(&ref_cell, &xd, &fh);
                    for (qi, fi) in qh.iter().zip(&fh) {
                        let qv = *qi as f64 * (H_SCALE_EXP as f64).exp2() / 32768.0;
                        assert!(
                            (qv - fi).abs() <= 2f64.powi(-10),
                            "integer-vs-reference deviation {:.3e} > 2^-10",
                            (qv - fi).abs()
                        );
                    }
                }
            }
        }
        let run = || -> Vec<_> {
            p.test_sets
                .iter()
                .map(|s| quant_msc_infer(&q, &s.instances).unwrap())
                .collect()
        };
        assert_eq!(run(), run(), "quantized inference must be bit-identical");
    });
}

// ---------------------------------------------------------------------------
// 7. Baseline detector: threshold arithmetic, calibrated FA rate, miss trend.

#[test]
fn acceptance_7_baseline_detector() {
    criterion(7, "phase-unwrap baseline calibration", || {
        // M-of-N scaling of the 0.3 m threshold (rounded to 0.22 m elsewhere).
        let det = DetectorConfig {
            window_len_s: 0.5,
            threshold_m: 0.3,
            m: 3,
            n: 4,
        };
        assert_eq!(det.per_window_threshold(), 0.3 * 3.0 / 4.0);
        assert!((det.per_window_threshold() - 0.225).abs() < 1e-15);

        // Calibrated threshold holds over >= 1e6 Monte-Carlo clutter windows.
        let gen_cfg = GenConfig::default();
        let window_len_s = 0.5;
        let sub_len = (window_len_s * mscrnn::radar::SAMPLE_RATE_HZ) as usize;
        let target_fa_per_s = 1.0 / 3600.0;
        let chunk_s = 2_000.0;
        let chunks = 250usize; // 250 x 2000 s x 2 windows/s = 1e6 windows
        let mut state = 0xACCE_7001u64;
        let mut calib: Vec<f64> = Vec::new();
        let mut threshold = None;
        let mut exceed = 0usize;
        let mut total = 0usize;
        for _ in 0..chunks {
            let series = gen_clutter(chunk_s, splitmix64(&mut state), &gen_cfg).unwrap();
            let disp = window_displacements(&unwrap_phase(&series).unwrap(), sub_len);
            if threshold.is_none() {
                calib.extend(&disp);
                if calib.len() >= 100_000 {
                    let t = calibrate_threshold(&calib, target_fa_per_s, window_len_s).unwrap();
                    // The calibration windows count toward the Monte-Carlo
                    // total as well.
                    exceed += calib.iter().filter(|d| **d > t).count();
                    total += calib.len();
                    threshold = Some(t);
                }
            } else if let Some(t) = threshold {
                exceed += disp.iter().filter(|d| **d > t).count();
                total += disp.len();
            }
        }
        assert!(total >= 1_000_000, "only {} windows measured", total);
        let empirical = exceed as f64 / (total as f64 * window_len_s);
        assert!(
            empirical <= 2.0 * target_fa_per_s,
            "empirical FA {:.3e}/s vs target {:.3e}/s over {} windows",
            empirical,
            target_fa_per_s,
            total
        );

        // Miss probability non-increasing in displacement duration.
        let det = DetectorConfig {
            window_len_s,
            threshold_m: threshold.unwrap(),
            m: 3,
            n: 4,
        };
        let mut state = 0xACCE_7002u64;
        let mut prev_miss = 1.0f64;
        for duration_s in [1.0, 2.0, 4.0, 6.0] {
            let mut misses = 0usize;
            let trials = 40;
            for _ in 0..trials {
                let s = gen_source(
                    SourceKind::Human,
                    duration_s,
                    splitmix64(&mut state),
                    &gen_cfg,
                )
                .unwrap();
                let disp = window_displacements(&unwrap_phase(&s).unwrap(), sub_len);
                let fired = m_of_n_detect(&disp, &det).unwrap().iter().any(|f| *f);
                misses += !fired as usize;
            }
            let miss = misses as f64 / trials as f64;
            assert!(
                miss <= prev_miss + 1e-12,
                "miss rate rose from {:.3} to {:.3} at {} s",
                prev_miss,
                miss,
                duration_s
            );
            prev_miss = miss;
        }
        assert_eq!(prev_miss, 0.0, "longest bursts must always be detected");
    });
}

// ---------------------------------------------------------------------------
// 8. Spot checks of the module property suites.

#[test]
fn acceptance_8_property_suites() {
    criterion(8, "module invariants hold", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_8001);

        // Softmax normalization.
        for _ in 0..200 {
            let n = rng.gen_range(1..=8usize);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let p = softmax(&v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|x| *x >= 0.0));
        }

        // Q15 round trip within one ulp of the chosen scale.
        for _ in 0..200 {
            let n = rng.gen_range(1..=32usize);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-7.9..7.9)).collect();
            let t = mscrnn::quant::quantize_q15(&v, vec![n]).unwrap();
            let ulp = 2f64.powi(t.scale_exp as i32 - 15);
            for (a, b) in v.iter().zip(t.dequantize()) {
                assert!((a - b).abs() <= ulp, "{} vs {} at ulp {}", a, b, ulp);
            }
        }

        // Early-exit scan is monotone in the decision threshold.
        for _ in 0..500 {
            let n = rng.gen_range(1..=16usize);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let k = rng.gen_range(1..=n);
            let p_lo = rng.gen_range(0.0..1.0);
            let p_hi = rng.gen_range(p_lo..1.0);
            if scan_consecutive(&probs, p_hi, k).decision == LowerDecision::Source {
                assert_eq!(
                    scan_consecutive(&probs, p_lo, k).decision,
                    LowerDecision::Source
                );
            }
        }

        // Hidden state stays in [-1, 1] when zeta + nu <= 1 and |h0| <= 1.
        for trial in 0..20 {
            let mut p = init_params(3, 4, None, trial).unwrap();
            p.zeta_raw = rng.gen_range(-2.0..0.0);
            p.nu_raw = rng.gen_range(-6.0..-2.0);
            assert!(p.zeta() + p.nu() <= 1.0);
            let xs: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let h0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (states, _) = forward(&p, &xs, &h0).unwrap();
            for h in &states {
                assert!(h.iter().all(|v| v.abs() <= 1.0 + 1e-12));
            }
        }

        // Training is deterministic under a fixed seed.
        let series = synth_series(4, 4, 0, 5.0, 0xACCE_8002);
        let cfg = EmiConfig {
            rounds: 2,
            epochs_per_round: 2,
            hidden_dim: 4,
            omega: 64,
            stride: 64,
            k: 2,
            batch_size: 8,
            ..EmiConfig::default()
        };
        let ds = window_dataset(&series, 1.0, (0.8, 0.1, 0.1), 64, 64, 9).unwrap();
        let sets = split_instances(&ds, Split::Train).unwrap();
        let (a, _) = train_emi(&sets, &cfg, 31).unwrap();
        let (b, _) = train_emi(&sets, &cfg, 31).unwrap();
        let bits = |m: &EMIModel| -> Vec<u64> { m.flatten().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    });
}
