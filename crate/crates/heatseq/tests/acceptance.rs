//! End-to-end acceptance gate. Each criterion prints one PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`); the test
//! fails if any criterion fails.

use heatseq::encodings::{sinusoidal_pe, MaskKind};
use heatseq::fdsolver::{case_seed, cfl_max_timestep, euler_step, simulate, Trajectory};
use heatseq::formats::{
    load_checkpoint, load_trajectories, save_checkpoint, save_trajectories,
};
use heatseq::geometry::PlateGeometry;
use heatseq::inference::{autoregressive_rollout, evaluate_test_set, rollout_with};
use heatseq::losses::{physics_loss, physics_residual, total_loss, LossWeights};
use heatseq::model::{
    forward_reference, forward_tape, init_params, stage_params, Activation, ModelConfig,
};
use heatseq::scenario::{
    boundary_frame, sample_base_case, BoundarySpec, CaseSpec, ScenarioMode, CFL_SAFETY_FACTOR,
    DEFAULT_BETA_RANGE,
};
use heatseq::tape::Tape;
use heatseq::training::{
    base_schedule, challenge2_schedule, make_batch, train, TrainSettings,
};
use heatseq::losses::total_loss_tape;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Report {
    lines: Vec<String>,
    failures: usize,
}

impl Report {
    fn new() -> Self {
        Report { lines: Vec::new(), failures: 0 }
    }

    fn record(&mut self, number: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let line = format!("criterion {number:2} ({name}): {verdict} — {detail}");
        println!("{line}");
        if !pass {
            self.failures += 1;
        }
        self.lines.push(line);
    }
}

fn geom(n: usize) -> PlateGeometry {
    PlateGeometry::new(n, n).unwrap()
}

fn base_case(seed: u64, g: PlateGeometry) -> CaseSpec {
    sample_base_case(seed, g, DEFAULT_BETA_RANGE).unwrap()
}

fn sample_split(split_seed: u64, count: usize, g: PlateGeometry, seq_len: usize, stride: usize) -> Vec<Trajectory> {
    (0..count)
        .map(|i| simulate(&base_case(case_seed(split_seed, i), g), seq_len, stride).unwrap())
        .collect()
}

fn random_field(g: &PlateGeometry, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((g.ny, g.nx), |_| rng.gen_range(0.0..1.0))
}

/// Scale for the overfit/generalization fixtures: 8x8 grid, 24 frames,
/// d_e = 64, 4 heads, 3 encoder layers, block n_visible = 3.
fn fixture_config(mask_kind: MaskKind) -> ModelConfig {
    ModelConfig {
        ny: 8,
        nx: 8,
        seq_len: 24,
        embed_dim: 64,
        num_heads: 4,
        num_encoder_layers: 3,
        mlp_dim: 512,
        start_predicting_from: 3,
        mask_kind,
        activation: Activation::Relu,
        pe_scale: None,
    }
}

/// Loss weights used for the trained fixtures. The data term alone drives
/// the overfit; the visible prefix gets a mild extra weight because the
/// sharp initial transient otherwise dominates the error budget.
fn fixture_weights() -> LossWeights {
    LossWeights { lambda_pi: 0.0, lambda_bc: 0.0, lambda_ic: 0.5, ..LossWeights::default() }
}

fn fixture_settings() -> TrainSettings {
    TrainSettings { batch_size: 1, epochs: 500, seed: 0 }
}

const FIXTURE_STRIDE: usize = 32;

fn criterion_1(report: &mut Report) {
    let start = Instant::now();
    let g = geom(17);
    let beta = 1.0;
    let case = CaseSpec {
        geometry: g,
        boundary: BoundarySpec::uniform(&g, 1.0, 0.0, 0.0, 0.0),
        theta_init: 0.0,
        beta,
        dtau: CFL_SAFETY_FACTOR * cfl_max_timestep(&g, beta).unwrap(),
    };
    let traj = simulate(&case, 2001, 1).unwrap();
    let last = traj.frames.index_axis(Axis(0), traj.seq_len() - 1);
    let center = last[[8, 8]];
    let secs = start.elapsed().as_secs_f64();
    let pass = traj.steadiness < 1e-7 && (center - 0.25).abs() <= 0.01 && secs < 5.0;
    report.record(
        1,
        "solver oracle",
        pass,
        format!(
            "center {center:.4} (want 0.25±0.01), steadiness {:.2e}, {secs:.2}s",
            traj.steadiness
        ),
    );
}

fn criterion_2(report: &mut Report) {
    let start = Instant::now();
    let g = geom(9);
    let case = base_case(42, g);
    let traj = simulate(&case, 50, 1).unwrap();
    let pred = traj
        .frames
        .clone()
        .into_dyn()
        .into_shape_with_order(IxDyn(&[1, 50, 9, 9]))
        .unwrap();
    let loss = physics_loss(&pred, &[case.beta], &[case.dtau], &g, 1e-8).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = loss < 1e-12 && secs < 1.0;
    report.record(
        2,
        "residual keystone",
        pass,
        format!("physics loss on solver data {loss:.2e} (want < 1e-12), {secs:.2}s"),
    );
}

/// Independent per-node oracle for the explicit-Euler update.
fn euler_oracle(frame: &Array2<f64>, case: &CaseSpec) -> Array2<f64> {
    let g = &case.geometry;
    let (inv_dx2, inv_dy2) = (1.0 / (g.dxi * g.dxi), 1.0 / (g.deta * g.deta));
    let mut next = frame.clone();
    for i in 1..g.ny - 1 {
        for j in 1..g.nx - 1 {
            let c = frame[[i, j]];
            let lap = (frame[[i + 1, j]] - 2.0 * c + frame[[i - 1, j]]) * inv_dy2
                + (frame[[i, j + 1]] - 2.0 * c + frame[[i, j - 1]]) * inv_dx2;
            next[[i, j]] = c + case.dtau * case.beta * lap;
        }
    }
    boundary_frame(case).apply(&mut next);
    next
}

/// Independent per-node oracle for the forward-in-time residual.
fn residual_oracle(
    pred: &ArrayD<f64>,
    beta: &[f64],
    dtau: &[f64],
    g: &PlateGeometry,
) -> ArrayD<f64> {
    let (b, t) = (pred.shape()[0], pred.shape()[1]);
    let (inv_dx2, inv_dy2) = (1.0 / (g.dxi * g.dxi), 1.0 / (g.deta * g.deta));
    let mut out = ArrayD::zeros(IxDyn(&[b, t - 1, g.ny - 2, g.nx - 2]));
    for bi in 0..b {
        for n in 0..t - 1 {
            for i in 1..g.ny - 1 {
                for j in 1..g.nx - 1 {
                    let c = pred[[bi, n, i, j]];
                    let lap = (pred[[bi, n, i + 1, j]] - 2.0 * c + pred[[bi, n, i - 1, j]])
                        * inv_dy2
                        + (pred[[bi, n, i, j + 1]] - 2.0 * c + pred[[bi, n, i, j - 1]]) * inv_dx2;
                    out[[bi, n, i - 1, j - 1]] = (pred[[bi, n + 1, i, j]] - c) / dtau[bi]
                        - beta[bi] * lap;
                }
            }
        }
    }
    out
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn criterion_3(report: &mut Report) {
    let g = geom(9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut ok = true;
    for k in 0..100 {
        let case = base_case(case_seed(7, k), g);
        let mut frame = random_field(&g, &mut rng);
        boundary_frame(&case).apply(&mut frame);
        let step = euler_step(&frame, &case).unwrap();
        let oracle = euler_oracle(&frame, &case);
        for (a, b) in step.iter().zip(oracle.iter()) {
            worst = worst.max((a - b).abs());
            ok &= rel_close(*a, *b);
        }

        let pred = ArrayD::from_shape_fn(IxDyn(&[1, 4, g.ny, g.nx]), |_| rng.gen_range(0.0..1.0));
        let res = physics_residual(&pred, &[case.beta], &[case.dtau], &g).unwrap();
        let res_oracle = residual_oracle(&pred, &[case.beta], &[case.dtau], &g);
        for (a, b) in res.iter().zip(res_oracle.iter()) {
            worst = worst.max((a - b).abs());
            ok &= rel_close(*a, *b);
        }
    }
    report.record(
        3,
        "stencil equivalence",
        ok,
        format!("100 random frames, worst |step/residual - oracle| {worst:.2e}"),
    );
}

fn criterion_4(report: &mut Report) {
    let mut ok = true;
    let mut checked = 0usize;
    let mut detail = String::new();
    for mask_kind in [MaskKind::Block, MaskKind::Causal] {
        let config = ModelConfig {
            ny: 8,
            nx: 8,
            seq_len: 12,
            embed_dim: 32,
            num_heads: 4,
            num_encoder_layers: 2,
            mlp_dim: 64,
            start_predicting_from: 3,
            mask_kind,
            activation: Activation::Gelu,
            pe_scale: None,
        };
        let params = init_params(&config, 4).unwrap();
        let mask = config.mask().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let src = ArrayD::from_shape_fn(IxDyn(&[1, 12, 8, 8]), |_| rng.gen_range(0.0..1.0));
        let alpha = Array1::from_elem(1, 1.2);
        let base = forward_reference(&params, &config, &src, &alpha, &mask).unwrap();
        for j in 0..config.seq_len {
            let mut pert = src.clone();
            pert.index_axis_mut(Axis(1), j).mapv_inplace(|v| v + 0.37);
            let out = forward_reference(&params, &config, &pert, &alpha, &mask).unwrap();
            for i in 0..config.seq_len {
                let may_change = !mask.is_hidden(i, j) || i == j;
                let changed = base
                    .index_axis(Axis(1), i)
                    .iter()
                    .zip(out.index_axis(Axis(1), i).iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits());
                checked += 1;
                if !may_change && changed {
                    ok = false;
                    detail = format!("{mask_kind} mask: hidden frame {j} leaked into position {i}");
                }
            }
        }
    }
    if ok {
        detail = format!("{checked} (i,j,mask) cases, hidden perturbations bit-exactly inert");
    }
    report.record(4, "mask independence", ok, detail);
}

fn criterion_5(report: &mut Report) {
    let start = Instant::now();
    let config = ModelConfig {
        ny: 4,
        nx: 4,
        seq_len: 6,
        embed_dim: 8,
        num_heads: 2,
        num_encoder_layers: 1,
        mlp_dim: 12,
        start_predicting_from: 2,
        mask_kind: MaskKind::Block,
        activation: Activation::Gelu,
        pe_scale: None,
    };
    let g = geom(4);
    let trajs: Vec<Trajectory> = (0..2)
        .map(|i| simulate(&base_case(case_seed(5, i), g), 6, 1).unwrap())
        .collect();
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let batch = make_batch(&refs).unwrap();
    let weights = LossWeights::default(); // all lambdas 1
    let mask = config.mask().unwrap();

    let mut params = init_params(&config, 5).unwrap();
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, &params);
    let pred = forward_tape(&mut tape, &staged, &config, &batch.src, &batch.alpha, &mask).unwrap();
    let tl = total_loss_tape(
        &mut tape,
        pred,
        &batch.src,
        &batch.cases,
        &batch.effective_dtau,
        config.start_predicting_from,
        &weights,
    )
    .unwrap();
    let all = tape.backward(tl.total);
    let analytic: Vec<ArrayD<f64>> = staged
        .ids
        .iter()
        .map(|&id| all[id].clone().unwrap_or_else(|| ArrayD::zeros(tape.value(id).raw_dim())))
        .collect();

    // Central finite differences through the independent reference forward.
    let eval = |params: &heatseq::model::ModelParams| -> f64 {
        let out = forward_reference(params, &config, &batch.src, &batch.alpha, &mask).unwrap();
        total_loss(
            &out,
            &batch.src,
            &batch.cases,
            &batch.effective_dtau,
            config.start_predicting_from,
            &weights,
        )
        .unwrap()
        .total
    };
    let h = 1e-5;
    let gmax = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut max_rel = 0.0f64;
    let mut n_params = 0usize;
    let n_tensors = params.tensors().len();
    for k in 0..n_tensors {
        let len = params.tensors()[k].1.len();
        for idx in 0..len {
            let orig = params.tensors()[k].1.as_slice().unwrap()[idx];
            params.tensors_mut()[k].1.as_slice_mut().unwrap()[idx] = orig + h;
            let plus = eval(&params);
            params.tensors_mut()[k].1.as_slice_mut().unwrap()[idx] = orig - h;
            let minus = eval(&params);
            params.tensors_mut()[k].1.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[k].as_slice().unwrap()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6 * gmax);
            max_rel = max_rel.max(rel);
            n_params += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = max_rel < 1e-4 && secs < 120.0;
    report.record(
        5,
        "gradient check",
        pass,
        format!("{n_params} parameters, max relative error {max_rel:.2e} (want < 1e-4), {secs:.1}s"),
    );
}

struct TrainedFixtures {
    overfit_pass: bool,
    overfit_detail: String,
    block_model: heatseq::model::ModelParams,
    block_final_train_total: f64,
    causal_model: heatseq::model::ModelParams,
    test_set: Vec<Trajectory>,
}

fn train_fixtures() -> TrainedFixtures {
    let g = geom(8);
    let weights = fixture_weights();
    let settings = fixture_settings();
    let schedule = base_schedule().compressed(settings.epochs).unwrap();

    // Criterion 6: overfit 8 cases.
    let start = Instant::now();
    let overfit_set = sample_split(0, 8, g, 24, FIXTURE_STRIDE);
    let config = fixture_config(MaskKind::Block);
    let (_, history) = train(&overfit_set, &[], &config, &weights, &schedule, &settings).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let first = history.records[1].train.total; // epoch 2
    let last = history.records.last().unwrap();
    let drop = first / last.train.total;
    let overfit_pass = last.train.mse < 1e-4 && drop >= 1e3 && secs < 900.0;
    let overfit_detail = format!(
        "train MSE {:.2e} (want < 1e-4), total loss drop {:.2e}x from epoch 2 (want >= 1e3), {secs:.0}s",
        last.train.mse, drop
    );

    // Criteria 7/8: 64/16/8 base cases at the same scale, block and causal.
    // 200 epochs (of the allowed <= 500): with 8x the data per epoch, the
    // full 500-epoch budget overfits past the 10x generalization bound.
    let mut gen_settings = fixture_settings();
    gen_settings.epochs = 200;
    let gen_schedule = base_schedule().compressed(gen_settings.epochs).unwrap();
    let train_set = sample_split(0, 64, g, 24, FIXTURE_STRIDE);
    let val_set = sample_split(1, 16, g, 24, FIXTURE_STRIDE);
    let test_set = sample_split(2, 8, g, 24, FIXTURE_STRIDE);
    let (block_model, block_history) = train(
        &train_set,
        &val_set,
        &config,
        &weights,
        &gen_schedule,
        &gen_settings,
    )
    .unwrap();
    let causal_config = fixture_config(MaskKind::Causal);
    let (causal_model, _) = train(
        &train_set,
        &val_set,
        &causal_config,
        &weights,
        &gen_schedule,
        &gen_settings,
    )
    .unwrap();

    TrainedFixtures {
        overfit_pass,
        overfit_detail,
        block_model,
        block_final_train_total: block_history.records.last().unwrap().train.total,
        causal_model,
        test_set,
    }
}

fn criterion_7(report: &mut Report, fixtures: &TrainedFixtures) {
    let config = fixture_config(MaskKind::Block);
    let (_, mean) = evaluate_test_set(
        &fixtures.block_model,
        &config,
        &fixtures.test_set,
        &fixture_weights(),
    )
    .unwrap();
    let bound = 10.0 * fixtures.block_final_train_total;
    let pass = mean <= bound && mean <= 1e-2;
    report.record(
        7,
        "generalization smoke",
        pass,
        format!(
            "mean test loss {mean:.2e} (want <= 10x train {bound:.2e} and <= 1e-2)"
        ),
    );
}

fn criterion_8(report: &mut Report, fixtures: &TrainedFixtures) {
    let config = fixture_config(MaskKind::Causal);
    // Oracle fixed point: a model that emits the input shifted one frame
    // forward reproduces ground truth exactly.
    let refs: Vec<&Trajectory> = fixtures.test_set.iter().collect();
    let batch = make_batch(&refs).unwrap();
    let shift_forward = |src: &ArrayD<f64>, _alpha: &Array1<f64>| -> heatseq::Result<ArrayD<f64>> {
        let t = src.shape()[1];
        let mut out = src.clone();
        for ti in 0..t - 1 {
            let next = src.index_axis(Axis(1), ti + 1).to_owned();
            out.index_axis_mut(Axis(1), ti).assign(&next);
        }
        Ok(out)
    };
    let oracle = rollout_with(&config, &batch, shift_forward).unwrap();
    let oracle_zero = oracle.aggregate_loss == 0.0;

    let rollout = autoregressive_rollout(&fixtures.causal_model, &config, &batch).unwrap();
    let (b, t) = rollout.per_frame_mse.dim();
    let finite = rollout.per_frame_mse.iter().all(|v| v.is_finite());
    let n = config.start_predicting_from;
    let mean_frame = |fi: usize| -> f64 {
        (0..b).map(|bi| rollout.per_frame_mse[[bi, fi]]).sum::<f64>() / b as f64
    };
    let first = mean_frame(n);
    let last = mean_frame(t - 1);
    let pass = oracle_zero && finite && last <= 5.0 * first;
    report.record(
        8,
        "autoregressive soundness",
        pass,
        format!(
            "shift-oracle loss {:.1e} (want 0), final-frame MSE {last:.2e} vs first {first:.2e} (ratio {:.2}, want <= 5)",
            oracle.aggregate_loss,
            last / first
        ),
    );
}

fn criterion_9(report: &mut Report) {
    // Reference table of the first 16 positions for a 4-dim encoding,
    // columns in descending index order (i = 3, 2, 1, 0).
    let table: [(usize, [f64; 4]); 4] = [
        (0, [1.0000, 0.0000, 1.0000, 0.0000]),
        (1, [0.9999, 0.0099, 0.5403, 0.8415]),
        (2, [0.9998, 0.0199, -0.4161, 0.9093]),
        (15, [0.9887, 0.1494, -0.7597, 0.6503]),
    ];
    let pe = sinusoidal_pe(16, 4, 1.0).unwrap();
    let mut ok = true;
    let mut worst = 0.0f64;
    for (pos, row) in table {
        for (c, want) in row.iter().enumerate() {
            let got = pe.table[[pos, 3 - c]];
            worst = worst.max((got - want).abs());
            // The published table mixes truncation and rounding at 4 decimals.
            ok &= (got - want).abs() <= 1.05e-4;
        }
    }
    report.record(
        9,
        "positional-encoding values",
        ok,
        format!("positions 0,1,2,15 vs published 4-place table, worst diff {worst:.2e}"),
    );
}

fn criterion_10(report: &mut Report) {
    let base = base_schedule();
    let base_rows: [(usize, usize, f64); 7] = [
        (1, 1, 0.0),
        (2, 2, 1e-5),
        (3, 3, 1e-4),
        (4, 4, 5e-4),
        (5, 30, 1e-3),
        (31, 40, 5e-4),
        (41, 100, 1e-4),
    ];
    let ch2 = challenge2_schedule();
    let ch2_rows: [(usize, usize, f64); 7] = [
        (1, 1, 0.0),
        (2, 2, 1e-5),
        (3, 3, 1e-4),
        (4, 4, 5e-4),
        (41, 100, 1e-4),
        (101, 200, 5e-5),
        (201, 300, 1e-5),
    ];
    let mut ok = true;
    for (lo, hi, rate) in base_rows {
        for e in lo..=hi {
            ok &= base.lr_at_epoch(e).unwrap() == rate;
        }
    }
    for (lo, hi, rate) in ch2_rows {
        for e in lo..=hi {
            ok &= ch2.lr_at_epoch(e).unwrap() == rate;
        }
    }
    report.record(
        10,
        "schedule fidelity",
        ok,
        "every published row of both schedules matches exactly".to_string(),
    );
}

fn criterion_11(report: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let g = geom(6);
    let trajs: Vec<Trajectory> = (0..3)
        .map(|i| simulate(&base_case(case_seed(11, i), g), 8, 2).unwrap())
        .collect();
    let d1 = dir.path().join("a.htfd");
    let d2 = dir.path().join("b.htfd");
    save_trajectories(&d1, ScenarioMode::Base, &trajs).unwrap();
    let (mode, loaded) = load_trajectories(&d1).unwrap();
    save_trajectories(&d2, mode, &loaded).unwrap();
    let dataset_ok = std::fs::read(&d1).unwrap() == std::fs::read(&d2).unwrap();

    let config = ModelConfig {
        ny: 6,
        nx: 6,
        seq_len: 8,
        embed_dim: 16,
        num_heads: 2,
        num_encoder_layers: 2,
        mlp_dim: 24,
        start_predicting_from: 2,
        mask_kind: MaskKind::Block,
        activation: Activation::Gelu,
        pe_scale: None,
    };
    let params = init_params(&config, 19).unwrap();
    let mask = config.mask().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let src = ArrayD::from_shape_fn(IxDyn(&[1, 8, 6, 6]), |_| rng.gen_range(0.0..1.0));
    let alpha = Array1::from_elem(1, 0.9);
    let before = forward_reference(&params, &config, &src, &alpha, &mask).unwrap();

    let c1 = dir.path().join("a.htck");
    let c2 = dir.path().join("b.htck");
    let extra = std::collections::BTreeMap::new();
    save_checkpoint(&c1, &params, &config, &extra).unwrap();
    let (loaded_params, loaded_config, _) = load_checkpoint(&c1).unwrap();
    save_checkpoint(&c2, &loaded_params, &loaded_config, &extra).unwrap();
    let checkpoint_ok = std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap();

    let after = forward_reference(&loaded_params, &loaded_config, &src, &alpha, &mask).unwrap();
    let forward_ok = before
        .iter()
        .zip(after.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let pass = dataset_ok && checkpoint_ok && forward_ok;
    report.record(
        11,
        "format roundtrips",
        pass,
        format!(
            "dataset bytes identical: {dataset_ok}, checkpoint bytes identical: {checkpoint_ok}, forward bit-exact: {forward_ok}"
        ),
    );
}

#[test]
fn acceptance() {
    let mut report = Report::new();
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    criterion_5(&mut report);

    let fixtures = train_fixtures();
    report.record(6, "overfit capability", fixtures.overfit_pass, fixtures.overfit_detail.clone());
    criterion_7(&mut report, &fixtures);
    criterion_8(&mut report, &fixtures);

    criterion_9(&mut report);
    criterion_10(&mut report);
    criterion_11(&mut report);

    assert!(
        report.failures == 0,
        "{} acceptance criteria failed:\n{}",
        report.failures,
        report.lines.join("\n")
    );
}
