//! Self-verification batteries: every decoder and every analytic gradient
//! is checked against an independent brute-force oracle, with one PASS or
//! FAIL line per battery and the failing seed in every failure message.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::decoding::{
    exhaustive_decode, greedy_decode, semantic_beam_search, BeamConfig, StreamingSession,
};
use crate::losses::{
    combined_grid_loss, combined_loss_bruteforce, random_grid, rnnt_loss, rnnt_loss_bruteforce,
    total_loss, LossWeights, SlotMode,
};
use crate::metrics::{relative_reduction, semer, slot_chunks};
use crate::model::{init_params, FusionMode, ModelConfig, ModelParams};
use crate::numerics::{finite_diff_check, NamedTensors, Tensor};

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Debug hook: negate every analytic gradient before the finite
    /// difference comparison. The gradient battery must then fail, which
    /// demonstrates the check has teeth.
    pub flip_gradient_sign: bool,
}

type BatteryFn = fn(&SelftestOptions) -> Result<String, String>;

const BATTERIES: &[(&str, BatteryFn)] = &[
    ("transducer loss vs path enumeration", transducer_battery),
    ("combined lattice loss vs enumeration", combined_battery),
    ("analytic gradients vs finite differences", gradient_battery),
    ("unit beam equals greedy bitwise", unit_beam_battery),
    ("saturating beam equals exhaustive argmax", exhaustive_battery),
    ("streaming equals one-shot decoding", streaming_battery),
    ("metric arithmetic", metrics_battery),
];

/// Runs every battery, writing one `PASS`/`FAIL` line each plus a summary
/// line. Returns whether all batteries passed.
pub fn run_all(opts: &SelftestOptions, w: &mut impl Write) -> io::Result<bool> {
    let mut failures = 0;
    for (name, battery) in BATTERIES {
        match battery(opts) {
            Ok(detail) => writeln!(w, "PASS {name} ({detail})")?,
            Err(detail) => {
                failures += 1;
                writeln!(w, "FAIL {name}: {detail}")?;
            }
        }
    }
    if failures == 0 {
        writeln!(w, "selftest: all {} batteries passed", BATTERIES.len())?;
    } else {
        writeln!(
            w,
            "selftest: {failures} of {} batteries FAILED",
            BATTERIES.len()
        )?;
    }
    Ok(failures == 0)
}

fn transducer_battery(_: &SelftestOptions) -> Result<String, String> {
    let cases = 60;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_len = rng.random_range(1..=4);
        let u_len = rng.random_range(0..=4);
        let vocab = rng.random_range(2..=5);
        let grid = random_grid(t_len, u_len, vocab, &mut rng);
        let targets: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..vocab)).collect();
        let fast = rnnt_loss(&grid, &targets).map_err(|e| format!("seed {seed}: {e}"))?;
        let brute =
            rnnt_loss_bruteforce(&grid, &targets).map_err(|e| format!("seed {seed}: {e}"))?;
        if (fast - brute).abs() >= 1e-9 {
            return Err(format!(
                "seed {seed}: recurrence {fast} vs enumeration {brute}"
            ));
        }
    }
    Ok(format!("{cases} random grids, |gap| < 1e-9"))
}

fn combined_battery(_: &SelftestOptions) -> Result<String, String> {
    let cases = 40;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let t_len = rng.random_range(1..=3);
        let u_len = rng.random_range(0..=3);
        let n_wp = rng.random_range(2..=4);
        let n_slot = rng.random_range(1..=3);
        let wp_grid = random_grid(t_len, u_len, n_wp, &mut rng);
        let slot_grid = random_grid(t_len, u_len, n_slot, &mut rng);
        let tokens: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..n_wp)).collect();
        let slots: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..n_slot)).collect();
        let fast = combined_grid_loss(&wp_grid, &slot_grid, &tokens, &slots)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let brute = combined_loss_bruteforce(&wp_grid, &slot_grid, &tokens, &slots)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        if (fast - brute).abs() >= 1e-9 {
            return Err(format!(
                "seed {seed}: recurrence {fast} vs enumeration {brute}"
            ));
        }

        // A wp grid of zeros adds nothing to any move, so the combined
        // loss must reduce to the slot loss alone.
        let zero_wp = Tensor::zeros(wp_grid.shape().to_vec());
        let reduced = combined_grid_loss(&zero_wp, &slot_grid, &tokens, &slots)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let slot_only =
            rnnt_loss(&slot_grid, &slots).map_err(|e| format!("seed {seed}: {e}"))?;
        if (reduced - slot_only).abs() >= 1e-12 {
            return Err(format!(
                "seed {seed}: degenerate reduction {reduced} vs slot-only {slot_only}"
            ));
        }
    }
    Ok(format!("{cases} grid pairs plus degenerate reductions"))
}

/// Tiny full-model configuration used by the gradient battery.
fn grad_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 6,
        enc_layers: 1,
        enc_hidden: 5,
        enc_out: 4,
        wp_embed: 3,
        wp_hidden: 4,
        wp_out: 4,
        slot_embed: 2,
        slot_hidden: 3,
        slot_out: 4,
        joint_hidden: 5,
        intent_hidden: 4,
        fusion_mode: FusionMode::Add,
        n_wp: 5,
        n_slot: 3,
        n_intent: 4,
    }
}

/// Raw features the pipeline collapses to exactly `t_len` frames of width 6.
fn grad_features(t_len: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![3 * t_len, 2],
        (0..6 * t_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("counted values")
}

fn gradient_battery(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = grad_config();
    let params = init_params(&cfg, 42).map_err(|e| e.to_string())?;
    let batch = vec![
        Utterance {
            features: grad_features(2, 7),
            tokens: vec![1, 3],
            slots: vec![0, 2],
            intent: 1,
        },
        Utterance {
            features: grad_features(3, 8),
            tokens: vec![4],
            slots: vec![1],
            intent: 3,
        },
    ];
    let weights = LossWeights {
        wp: 1.0,
        slot: 0.7,
        intent: 1.3,
    };
    let mut worst_err = 0.0f64;
    for mode in [SlotMode::Ce, SlotMode::RnntAlign] {
        let mut losses =
            total_loss(&params, &batch, &weights, mode).map_err(|e| e.to_string())?;
        if opts.flip_gradient_sign {
            losses.grads.scale_in_place(-1.0);
        }
        let f = |tensors: &NamedTensors| -> Result<f64, String> {
            let probe = ModelParams {
                config: cfg.clone(),
                tensors: tensors.clone(),
            };
            total_loss(&probe, &batch, &weights, mode)
                .map(|l| l.total)
                .map_err(|e| e.to_string())
        };
        let report = finite_diff_check(f, &params.tensors, &losses.grads, 12, 1e-5, 5)?;
        let err = report.max_rel_err();
        worst_err = worst_err.max(err);
        if err >= 1e-4 {
            let worst = report.worst().expect("probes ran");
            return Err(format!(
                "mode {mode}: rel err {err:.3e} at {}[{}] (analytic {}, numeric {})",
                worst.name, worst.index, worst.analytic, worst.numeric
            ));
        }
    }
    Ok(format!(
        "both slot modes, 12 probes each, max rel err {worst_err:.3e}"
    ))
}

fn decode_config(n_wp: usize, n_slot: usize) -> ModelConfig {
    ModelConfig {
        feat_dim: 4,
        enc_layers: 1,
        enc_hidden: 4,
        enc_out: 3,
        wp_embed: 3,
        wp_hidden: 4,
        wp_out: 3,
        slot_embed: 2,
        slot_hidden: 3,
        slot_out: 3,
        joint_hidden: 4,
        intent_hidden: 3,
        fusion_mode: FusionMode::Add,
        n_wp,
        n_slot,
        n_intent: 3,
    }
}

fn decode_features(t_len: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![t_len, 4],
        (0..t_len * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("counted values")
}

/// Scaled-up random weights so decodes are decisive rather than
/// near-uniform.
fn decode_model(seed: u64, n_wp: usize, n_slot: usize) -> Result<ModelParams, String> {
    let mut params = init_params(&decode_config(n_wp, n_slot), seed).map_err(|e| e.to_string())?;
    for (_, t) in params.tensors.iter_mut() {
        for v in t.values_mut() {
            *v *= 3.0;
        }
    }
    Ok(params)
}

fn unit_beam_battery(_: &SelftestOptions) -> Result<String, String> {
    let unit = BeamConfig {
        b_wp: 1,
        b_slot: 1,
        b_local: 1,
        b_beam: 1,
        max_emits_per_frame: BeamConfig::default().max_emits_per_frame,
    };
    let cases = 25;
    for seed in 0..cases {
        let params = decode_model(seed, 5, 3)?;
        let features = decode_features(1 + (seed as usize % 5), 50 + seed);
        let greedy = greedy_decode(&params, &features).map_err(|e| format!("seed {seed}: {e}"))?;
        let beam = semantic_beam_search(&params, &features, &unit)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let (g, b) = (&greedy.n_best[0], &beam.n_best[0]);
        if g.tokens != b.tokens || g.slots != b.slots || g.score.to_bits() != b.score.to_bits() {
            return Err(format!(
                "seed {seed}: greedy ({:?}, {:?}, {}) vs beam ({:?}, {:?}, {})",
                g.tokens, g.slots, g.score, b.tokens, b.slots, b.score
            ));
        }
    }
    Ok(format!("{cases} random models, sequences and scores bitwise"))
}

fn exhaustive_battery(_: &SelftestOptions) -> Result<String, String> {
    let cases = 25;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let n_wp = rng.random_range(2..=3);
        let n_slot = rng.random_range(1..=2);
        let (t_len, cap) = if rng.random_bool(0.5) { (2, 1) } else { (1, 2) };
        let params = decode_model(300 + seed, n_wp, n_slot)?;
        let features = decode_features(t_len, 400 + seed);
        let saturating = BeamConfig {
            b_wp: n_wp,
            b_slot: n_slot,
            b_local: n_wp * n_slot + 1,
            b_beam: 1 << 12,
            max_emits_per_frame: cap,
        };
        let beam = semantic_beam_search(&params, &features, &saturating)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let oracle = exhaustive_decode(&params, &features, t_len * cap, cap)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let top = &beam.n_best[0];
        if top.tokens != oracle.tokens || top.slots != oracle.slots {
            return Err(format!(
                "seed {seed}: beam ({:?}, {:?}) vs oracle ({:?}, {:?})",
                top.tokens, top.slots, oracle.tokens, oracle.slots
            ));
        }
        if (top.score - oracle.score).abs() >= 1e-9 {
            return Err(format!(
                "seed {seed}: beam score {} vs oracle {}",
                top.score, oracle.score
            ));
        }
    }
    Ok(format!("{cases} tiny instances, argmax and score agree"))
}

fn streaming_battery(_: &SelftestOptions) -> Result<String, String> {
    let cases = 10;
    let config = BeamConfig::default();
    for seed in 0..cases {
        let params = decode_model(500 + seed, 5, 3)?;
        let t_len = 4 + (seed as usize % 3);
        let features = decode_features(t_len, 600 + seed);
        let one_shot = semantic_beam_search(&params, &features, &config)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        for trial in 0..3 {
            let mut stream = StreamingSession::new(&params, config)
                .map_err(|e| format!("seed {seed}: {e}"))?;
            let mut sent = 0;
            while sent < t_len {
                let take = rng.random_range(1..=t_len - sent);
                let chunk = Tensor::new(
                    vec![take, 4],
                    features.values()[sent * 4..(sent + take) * 4].to_vec(),
                )
                .expect("counted values");
                stream
                    .push_frames(&chunk)
                    .map_err(|e| format!("seed {seed}: {e}"))?;
                sent += take;
            }
            let streamed = stream
                .finalize()
                .map_err(|e| format!("seed {seed}: {e}"))?;
            let same = one_shot.n_best.len() == streamed.n_best.len()
                && one_shot.n_best.iter().zip(&streamed.n_best).all(|(a, b)| {
                    a.tokens == b.tokens
                        && a.slots == b.slots
                        && a.score.to_bits() == b.score.to_bits()
                });
            if !same {
                return Err(format!("seed {seed} trial {trial}: n-best lists differ"));
            }
        }
    }
    Ok(format!("{cases} utterances x 3 chunkings, n-best bitwise"))
}

fn metrics_battery(_: &SelftestOptions) -> Result<String, String> {
    for (baseline, candidate, expected, tol) in
        [(0.61, 0.55, 9.8, 0.05), (0.91, 0.84, 7.7, 0.05)]
    {
        let got = relative_reduction(baseline, candidate).map_err(|e| e.to_string())?;
        if (got - expected).abs() >= tol {
            return Err(format!(
                "relative reduction of ({baseline}, {candidate}) = {got}, expected {expected} +/- {tol}"
            ));
        }
    }

    // One substituted slot value: same tag, different filler.
    let other = 0;
    let refs = (&[1usize, 2, 3], &[other, 1, 1]);
    let hyps = (&[1usize, 2, 4], &[other, 1, 1]);
    let (rate, counts) =
        semer(refs.0, refs.1, 0, hyps.0, hyps.1, 0, other).map_err(|e| e.to_string())?;
    if counts.substitution != 1 || counts.correct != 0 || rate != 1.0 {
        return Err(format!("slot substitution case mis-scored: {counts:?}"));
    }

    // Perfect hypothesis: no error anywhere, one correct chunk.
    let (rate, counts) =
        semer(refs.0, refs.1, 0, refs.0, refs.1, 0, other).map_err(|e| e.to_string())?;
    if counts.has_error() || counts.correct != 1 || rate != 0.0 {
        return Err(format!("exact match mis-scored: {counts:?}"));
    }

    // Adjacent equal tags merge into one chunk; a gap splits them.
    let merged = slot_chunks(&[1, 2, 3], &[1, 1, 2], other).map_err(|e| e.to_string())?;
    let split = slot_chunks(&[1, 2, 3], &[1, other, 1], other).map_err(|e| e.to_string())?;
    if merged.len() != 2 || split.len() != 2 {
        return Err(format!(
            "chunking off: merged {} chunks, split {} chunks",
            merged.len(),
            split.len()
        ));
    }
    Ok("reduction and slot-chunk hand cases".to_string())
}
