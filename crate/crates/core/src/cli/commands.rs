use std::fmt::Write as _;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::reproduce::{all_match, render_csv, render_table, reproduce_rows};
use super::{CommandOutput, Format, EXIT_MISMATCH, EXIT_OK};
use crate::error::{GemError, Result};
use crate::metrics::{
    compute_all, flops_per_token, session_cost, CostReport, MetricRow, PlatformProfile, SessionCost, METRIC_CSV_HEADER,
};
use crate::model::{
    evaluate, forgetting_experiment, AdamW, EpochStats, ForgettingReport, GemModel, SyntheticTask,
};
use crate::quant::{empirical_quant_mse, hybrid_memory, memory_bytes, quant_noise_model, PrecisionMap, Quantizer, MB};
use crate::router::{domain_histogram, domain_name, route_sequence, RouteTarget, RouterEncoder};
use crate::scar::{cluster_sizes, dense_ops, kmeans_cosine, masked_attention_with, reduction, scar_ops};

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",") + "\n";
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn render(fmt: Format, report_json: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    match fmt {
        Format::Json => report_json.to_string(),
        Format::Csv => csv(header, rows),
        Format::Table => table(header, rows),
    }
}

pub fn reproduce(fmt: Format) -> Result<CommandOutput> {
    let rows = reproduce_rows()?;
    let report = json(&rows)?;
    let stdout = match fmt {
        Format::Json => report.clone(),
        Format::Csv => render_csv(&rows),
        Format::Table => render_table(&rows),
    };
    Ok(CommandOutput {
        stdout,
        files: vec![("reproduce.json".into(), report), ("reproduce.csv".into(), render_csv(&rows))],
        exit_code: if all_match(&rows) { EXIT_OK } else { EXIT_MISMATCH },
    })
}

#[derive(Debug, Serialize)]
struct RouteRecord {
    token_index: usize,
    token: u32,
    max_prob: f64,
    target: String,
    pathway: usize,
}

#[derive(Debug, Serialize)]
struct HistogramEntry {
    pathway: String,
    count: usize,
}

pub fn route(cfg: &ExperimentConfig, fmt: Format) -> Result<CommandOutput> {
    let mut rc = cfg.route.router.clone();
    rc.seed = cfg.seed;
    let domains = rc.domains;
    let tau = rc.tau;
    let encoder = RouterEncoder::new(rc)?;
    let tokens = &cfg.route.tokens;
    let decisions = route_sequence(tokens, tau, &encoder)?;
    let records: Vec<RouteRecord> = decisions
        .iter()
        .map(|d| {
            let (target, pathway) = match d.target {
                RouteTarget::Domain(i) => (domain_name(i), i),
                RouteTarget::General => ("general".to_string(), domains),
            };
            RouteRecord { token_index: d.token_index, token: tokens[d.token_index], max_prob: d.max_prob, target, pathway }
        })
        .collect();
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let hist: Vec<HistogramEntry> = domain_histogram(&decisions, domains)
        .into_iter()
        .map(|(pathway, count)| HistogramEntry { pathway, count })
        .collect();
    let mut dat = String::from("# pathway_index count  (name)\n");
    for (i, h) in hist.iter().enumerate() {
        let _ = writeln!(dat, "{i} {}  # {}", h.count, h.pathway);
    }
    let header = ["token_index", "token", "max_prob", "target"];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.token_index.to_string(), r.token.to_string(), format!("{}", r.max_prob), r.target.clone()])
        .collect();
    Ok(CommandOutput {
        stdout: render(fmt, &jsonl, &header, &rows),
        files: vec![
            ("routing.jsonl".into(), jsonl.clone()),
            ("route_histogram.json".into(), json(&hist)?),
            ("route_histogram.dat".into(), dat),
        ],
        exit_code: EXIT_OK,
    })
}

#[derive(Debug, Serialize)]
struct SweepRow {
    k: u64,
    scar_ops: u64,
    dense_ops: u64,
    reduction_vs_dense: f64,
    reduction_vs_reference_k: f64,
}

fn sweep(n: u64, reference_k: u64, ks: &[u64]) -> Result<Vec<SweepRow>> {
    let base = scar_ops(n, reference_k);
    ks.iter()
        .map(|&k| {
            let ops = scar_ops(n, k);
            Ok(SweepRow {
                k,
                scar_ops: ops,
                dense_ops: dense_ops(n),
                reduction_vs_dense: reduction(dense_ops(n), ops)?,
                reduction_vs_reference_k: reduction(base, ops)?,
            })
        })
        .collect()
}

fn sweep_rows(s: &[SweepRow]) -> Vec<Vec<String>> {
    s.iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.scar_ops.to_string(),
                r.dense_ops.to_string(),
                format!("{}", r.reduction_vs_dense),
                format!("{}", r.reduction_vs_reference_k),
            ]
        })
        .collect()
}

const SWEEP_HEADER: [&str; 5] = ["k", "scar_ops", "dense_ops", "reduction_vs_dense", "reduction_vs_reference_k"];

fn sweep_dat(s: &[SweepRow]) -> String {
    let mut dat = String::from("# k reduction_vs_dense\n");
    for r in s {
        let _ = writeln!(dat, "{} {}", r.k, r.reduction_vs_dense);
    }
    dat
}

#[derive(Debug, Serialize)]
struct ScarReport {
    source: String,
    n: usize,
    k: usize,
    dim: usize,
    scar_ops: u64,
    dense_ops: u64,
    reduction: f64,
    mask_density: f64,
    /// `Σ size² / n²`, counted from the cluster sizes.
    density_from_cluster_sizes: f64,
    cluster_sizes: Vec<usize>,
    objective: f64,
    objective_history: Vec<f64>,
    iterations_run: usize,
    converged: bool,
    max_row_sum_error: f64,
    max_off_mask_weight: f64,
    sweep: Vec<SweepRow>,
}

fn load_embeddings(path: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let n = rows.len();
    if n == 0 {
        return Err(GemError::config("scar.embeddings", "file holds no rows"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) || d == 0 {
        return Err(GemError::config("scar.embeddings", "rows must be non-empty and of equal length"));
    }
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("shape checked"))
}

pub fn scar(cfg: &ExperimentConfig, fmt: Format) -> Result<CommandOutput> {
    let s = &cfg.scar;
    let (points, source) = match &s.embeddings {
        Some(path) => (load_embeddings(path)?, path.clone()),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let pts = Array2::from_shape_simple_fn((s.n, s.dim), || StandardNormal.sample(&mut rng));
            (pts, "synthetic".to_string())
        }
    };
    let (n, dim) = points.dim();
    if s.k > n {
        return Err(GemError::TooManyClusters { k: s.k, n });
    }
    let plan = kmeans_cosine(points.view(), s.k, s.max_iters, cfg.seed)?;
    let mask = plan.mask();
    let att = masked_attention_with(points.view(), points.view(), points.view(), &mask, s.mask_mode)?;
    let mut max_row_sum_error: f64 = 0.0;
    let mut max_off_mask_weight: f64 = 0.0;
    for (i, row) in att.weights.outer_iter().enumerate() {
        max_row_sum_error = max_row_sum_error.max((row.sum() - 1.0).abs());
        for (j, &w) in row.iter().enumerate() {
            if !mask.get(i, j) {
                max_off_mask_weight = max_off_mask_weight.max(w);
            }
        }
    }
    let sizes = cluster_sizes(&plan.assignments, plan.k);
    let ks: Vec<u64> = s.sweep_k.iter().filter(|&&k| k <= n).map(|&k| k as u64).collect();
    let report = ScarReport {
        source,
        n,
        k: s.k,
        dim,
        scar_ops: scar_ops(n as u64, s.k as u64),
        dense_ops: dense_ops(n as u64),
        reduction: reduction(dense_ops(n as u64), scar_ops(n as u64, s.k as u64))?,
        mask_density: mask.density(),
        density_from_cluster_sizes: sizes.iter().map(|&c| (c * c) as f64).sum::<f64>() / (n * n) as f64,
        cluster_sizes: sizes,
        objective: plan.objective,
        objective_history: plan.objective_history.clone(),
        iterations_run: plan.iterations_run,
        converged: plan.converged,
        max_row_sum_error,
        max_off_mask_weight,
        sweep: sweep(n as u64, s.k as u64, &ks)?,
    };
    let body = json(&report)?;
    let mut objective_dat = String::from("# iteration objective\n");
    for (i, o) in report.objective_history.iter().enumerate() {
        let _ = writeln!(objective_dat, "{} {o}", i + 1);
    }
    let stdout = match fmt {
        Format::Json => body.clone(),
        Format::Csv => csv(&SWEEP_HEADER, &sweep_rows(&report.sweep)),
        Format::Table => {
            let summary = vec![
                vec!["n".to_string(), n.to_string()],
                vec!["k".to_string(), s.k.to_string()],
                vec!["scar_ops".to_string(), report.scar_ops.to_string()],
                vec!["dense_ops".to_string(), report.dense_ops.to_string()],
                vec!["reduction".to_string(), format!("{}", report.reduction)],
                vec!["mask_density".to_string(), format!("{}", report.mask_density)],
                vec!["iterations".to_string(), report.iterations_run.to_string()],
                vec!["converged".to_string(), report.converged.to_string()],
            ];
            table(&["quantity", "value"], &summary) + "\n" + &table(&SWEEP_HEADER, &sweep_rows(&report.sweep))
        }
    };
    Ok(CommandOutput {
        stdout,
        files: vec![
            ("scar.json".into(), body),
            ("mask.pbm".into(), mask.to_pbm()),
            ("scar_sweep.dat".into(), sweep_dat(&report.sweep)),
            ("kmeans_objective.dat".into(), objective_dat),
        ],
        exit_code: EXIT_OK,
    })
}

#[derive(Debug, Serialize)]
struct QuantRow {
    bits: u32,
    levels: u64,
    step: f64,
    empirical_mse: f64,
    /// `Δ² / 12` for uniform inputs on `[−1, 1]`.
    uniform_noise_mse: f64,
    relative_error: f64,
    /// Modelled perturbation `σ² / b²`.
    noise_model: f64,
}

#[derive(Debug, Serialize)]
struct MemoryRow {
    class: String,
    params: u64,
    bits: u32,
    megabytes: f64,
}

#[derive(Debug, Serialize)]
struct QuantizeReport {
    sample_count: usize,
    seed: u64,
    sigma: f64,
    rows: Vec<QuantRow>,
    memory: Vec<MemoryRow>,
    hybrid_memory_mb: f64,
}

pub fn quantize(cfg: &ExperimentConfig, fmt: Format) -> Result<CommandOutput> {
    let q = &cfg.quantize;
    let rows = q
        .bits
        .par_iter()
        .map(|&bits| {
            let quant = Quantizer::new(bits, 1.0)?;
            let step = quant.step();
            let mse = empirical_quant_mse(bits, q.sample_count, cfg.seed)?;
            let theory = step * step / 12.0;
            Ok(QuantRow {
                bits,
                levels: quant.levels(),
                step,
                empirical_mse: mse,
                uniform_noise_mse: theory,
                relative_error: (mse - theory).abs() / theory,
                noise_model: quant_noise_model(q.sigma, bits)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let memory = memory_rows(&q.precision_map)?;
    let report = QuantizeReport {
        sample_count: q.sample_count,
        seed: cfg.seed,
        sigma: q.sigma,
        rows,
        memory,
        hybrid_memory_mb: hybrid_memory(&q.precision_map)? / MB,
    };
    let body = json(&report)?;
    let mut dat = String::from("# bits empirical_mse\n");
    for r in &report.rows {
        let _ = writeln!(dat, "{} {}", r.bits, r.empirical_mse);
    }
    let header = ["bits", "levels", "step", "empirical_mse", "uniform_noise_mse", "relative_error", "noise_model"];
    let table_rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.bits.to_string(),
                r.levels.to_string(),
                format!("{:.6e}", r.step),
                format!("{:.6e}", r.empirical_mse),
                format!("{:.6e}", r.uniform_noise_mse),
                format!("{:.4}", r.relative_error),
                format!("{:.6}", r.noise_model),
            ]
        })
        .collect();
    let mut stdout = render(fmt, &body, &header, &table_rows);
    if fmt == Format::Table {
        let mem: Vec<Vec<String>> = report
            .memory
            .iter()
            .map(|m| vec![m.class.clone(), m.params.to_string(), m.bits.to_string(), format!("{}", m.megabytes)])
            .collect();
        stdout.push('\n');
        stdout.push_str(&table(&["class", "params", "bits", "MB"], &mem));
        let _ = writeln!(stdout, "hybrid memory: {} MB", report.hybrid_memory_mb);
    }
    Ok(CommandOutput {
        stdout,
        files: vec![("quantize.json".into(), body), ("quant_mse.dat".into(), dat)],
        exit_code: EXIT_OK,
    })
}

fn memory_rows(pm: &PrecisionMap) -> Result<Vec<MemoryRow>> {
    pm.entries
        .iter()
        .map(|e| {
            Ok(MemoryRow {
                class: e.class.to_string(),
                params: e.params,
                bits: e.bits,
                megabytes: memory_bytes(e.params, e.bits)? / MB,
            })
        })
        .collect()
}

pub fn metrics(cfg: &ExperimentConfig, fmt: Format) -> Result<CommandOutput> {
    let rows: Vec<MetricRow> = compute_all(&cfg.metrics.records)?;
    let body = json(&rows)?;
    let mut csv_body = format!("{METRIC_CSV_HEADER}\n");
    for r in &rows {
        csv_body.push_str(&r.csv_line());
        csv_body.push('\n');
    }
    let stdout = match fmt {
        Format::Json => body.clone(),
        Format::Csv => csv_body.clone(),
        Format::Table => {
            let t: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.model.clone(),
                        format!("{:.2}", r.in_domain),
                        format!("{:.2}", r.out_domain_avg),
                        format!("{:.4}", r.gg),
                        format!("{:.4}", r.cdtr),
                        format!("{:.4}", r.dsi),
                        r.domain_pair.clone(),
                    ]
                })
                .collect();
            table(&["model", "in_domain", "out_domain_avg", "gg", "cdtr", "dsi", "domain_pair"], &t)
        }
    };
    Ok(CommandOutput {
        stdout,
        files: vec![("metrics.json".into(), body), ("metrics.csv".into(), csv_body)],
        exit_code: EXIT_OK,
    })
}

#[derive(Debug, Serialize)]
struct CostOutput {
    platform: PlatformProfile,
    layers: u64,
    hidden: u64,
    params: u64,
    bits: u32,
    report: CostReport,
    session_tokens: u64,
    session: SessionCost,
    /// `flops_per_token / peak_flops`, the compute-bound latency floor.
    compute_bound_latency_s: f64,
    ram_fraction: f64,
    scar_n: u64,
    scar_sweep: Vec<SweepRow>,
}

pub fn cost(cfg: &ExperimentConfig, fmt: Format) -> Result<CommandOutput> {
    let c = &cfg.cost;
    let platform = c.resolve_platform()?;
    let flops = flops_per_token(c.layers, c.hidden);
    let power = c.power_w.unwrap_or(platform.typical_power_watts);
    let report = CostReport::new(flops, c.latency_s_per_token, power, memory_bytes(c.params, c.bits)?);
    let out = CostOutput {
        compute_bound_latency_s: flops as f64 / platform.peak_flops,
        ram_fraction: report.memory_bytes / platform.ram_bytes,
        session: session_cost(c.session_tokens, report.latency_s_per_token, report.energy_j_per_token),
        session_tokens: c.session_tokens,
        scar_sweep: sweep(c.scar_n, c.scar_k, &c.sweep_k)?,
        scar_n: c.scar_n,
        platform,
        layers: c.layers,
        hidden: c.hidden,
        params: c.params,
        bits: c.bits,
        report,
    };
    let body = json(&out)?;
    let stdout = match fmt {
        Format::Json => body.clone(),
        Format::Csv => {
            let r = &out.report;
            csv(
                &["platform", "flops_per_token", "latency_s_per_token", "power_w", "energy_j_per_token", "memory_bytes", "session_latency_s", "session_energy_j"],
                &[vec![
                    out.platform.name.clone(),
                    r.flops_per_token.to_string(),
                    format!("{}", r.latency_s_per_token),
                    format!("{}", r.power_w),
                    format!("{}", r.energy_j_per_token),
                    format!("{}", r.memory_bytes),
                    format!("{}", out.session.total_latency_s),
                    format!("{}", out.session.total_energy_j),
                ]],
            )
        }
        Format::Table => {
            let r = &out.report;
            let rows = vec![
                vec!["platform".into(), out.platform.name.clone()],
                vec!["flops_per_token".into(), r.flops_per_token.to_string()],
                vec!["latency_s_per_token".into(), format!("{}", r.latency_s_per_token)],
                vec!["power_w".into(), format!("{}", r.power_w)],
                vec!["energy_j_per_token".into(), format!("{}", r.energy_j_per_token)],
                vec!["memory_mb".into(), format!("{}", r.memory_bytes / MB)],
                vec!["session_tokens".into(), out.session_tokens.to_string()],
                vec!["session_latency_s".into(), format!("{}", out.session.total_latency_s)],
                vec!["session_energy_j".into(), format!("{}", out.session.total_energy_j)],
                vec!["compute_bound_latency_s".into(), format!("{:e}", out.compute_bound_latency_s)],
            ];
            table(&["quantity", "value"], &rows) + "\n" + &table(&SWEEP_HEADER, &sweep_rows(&out.scar_sweep))
        }
    };
    Ok(CommandOutput {
        stdout,
        files: vec![("cost.json".into(), body), ("scar_sweep.dat".into(), sweep_dat(&out.scar_sweep))],
        exit_code: EXIT_OK,
    })
}

#[derive(Debug, Serialize)]
struct TrainReport {
    seed: u64,
    domain: usize,
    samples: usize,
    trainable_params: u64,
    precision_map: PrecisionMap,
    accuracy_before: f64,
    accuracy_after: f64,
    history: Vec<EpochStats>,
}

const EPOCH_HEADER: [&str; 6] = ["epoch", "task_loss", "quant_penalty", "kd_loss", "total_loss", "train_accuracy"];

pub fn train(cfg: &ExperimentConfig, fmt: Format) -> Result<CommandOutput> {
    cfg.validate()?;
    let t = &cfg.train;
    let task = SyntheticTask::generate(t.domain, &t.task, cfg.seed)?;
    let mut model = GemModel::new(crate::model::GemConfig { seed: cfg.seed, ..t.model.clone() })?;
    let tc = crate::model::TrainConfig { seed: cfg.seed, ..t.train.clone() };
    let accuracy_before = evaluate(&model, &task.samples)?;
    let mut opt = AdamW::new(&model);
    let history = crate::model::train(&mut model, &mut opt, &task, &tc, None)?;
    let report = TrainReport {
        seed: cfg.seed,
        domain: t.domain,
        samples: task.len(),
        trainable_params: model.trainable_param_count(),
        precision_map: model.precision_map(),
        accuracy_before,
        accuracy_after: evaluate(&model, &task.samples)?,
        history,
    };
    let body = json(&report)?;
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|h| {
            vec![
                (h.epoch + 1).to_string(),
                format!("{}", h.task_loss),
                format!("{}", h.quant_penalty),
                format!("{}", h.kd_loss),
                format!("{}", h.total_loss),
                format!("{}", h.train_accuracy),
            ]
        })
        .collect();
    let mut dat = String::from("# epoch total_loss\n");
    for h in &report.history {
        let _ = writeln!(dat, "{} {}", h.epoch + 1, h.total_loss);
    }
    let mut stdout = render(fmt, &body, &EPOCH_HEADER, &rows);
    if fmt == Format::Table {
        let _ = writeln!(stdout, "accuracy: {} -> {}", report.accuracy_before, report.accuracy_after);
    }
    Ok(CommandOutput {
        stdout,
        files: vec![
            ("train.json".into(), body),
            ("train_curve.csv".into(), csv(&EPOCH_HEADER, &rows)),
            ("train_loss.dat".into(), dat),
            ("model.json".into(), json(&model.checkpoint())?),
        ],
        exit_code: EXIT_OK,
    })
}

#[derive(Debug, Serialize)]
struct ForgetRun {
    seed: u64,
    report: ForgettingReport,
}

#[derive(Debug, Serialize)]
struct ForgetSummary {
    runs: usize,
    kd_at_least_plain: usize,
    mean_retention_advantage: f64,
    mean_general_acc_before: f64,
    mean_general_acc_after_plain: f64,
    mean_general_acc_after_kd: f64,
}

#[derive(Debug, Serialize)]
struct ForgetOutput {
    base_domain: usize,
    new_domain: usize,
    summary: ForgetSummary,
    runs: Vec<ForgetRun>,
}

pub fn forget(cfg: &ExperimentConfig, fmt: Format) -> Result<CommandOutput> {
    let f = &cfg.forget;
    let runs = (0..f.runs)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let base = SyntheticTask::generate(f.base_domain, &f.task, seed)?;
            let new = SyntheticTask::generate(f.new_domain, &f.task, seed)?;
            let mut setup = f.setup.clone();
            setup.model.seed = seed;
            setup.base_train.seed = seed;
            setup.finetune.seed = seed.wrapping_add(1);
            Ok(ForgetRun { seed, report: forgetting_experiment(&base, &new, &setup)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let mean = |g: fn(&ForgettingReport) -> f64| runs.iter().map(|r| g(&r.report)).sum::<f64>() / n;
    let summary = ForgetSummary {
        runs: runs.len(),
        kd_at_least_plain: runs
            .iter()
            .filter(|r| r.report.general_acc_after_kd >= r.report.general_acc_after_plain)
            .count(),
        mean_retention_advantage: mean(|r| r.retention_advantage),
        mean_general_acc_before: mean(|r| r.general_acc_before),
        mean_general_acc_after_plain: mean(|r| r.general_acc_after_plain),
        mean_general_acc_after_kd: mean(|r| r.general_acc_after_kd),
    };
    let out = ForgetOutput { base_domain: f.base_domain, new_domain: f.new_domain, summary, runs };
    let body = json(&out)?;

    let curve_header = ["run_seed", "epoch", "plain_base_acc", "kd_base_acc", "plain_new_acc", "kd_new_acc"];
    let mut curve_rows = Vec::new();
    let mut dat = String::from("# epoch plain_base_acc kd_base_acc (first run)\n");
    for (idx, run) in out.runs.iter().enumerate() {
        let r = &run.report;
        curve_rows.push(vec![
            run.seed.to_string(),
            "0".into(),
            format!("{}", r.general_acc_before),
            format!("{}", r.general_acc_before),
            format!("{}", r.new_acc_before),
            format!("{}", r.new_acc_before),
        ]);
        if idx == 0 {
            let _ = writeln!(dat, "0 {} {}", r.general_acc_before, r.general_acc_before);
        }
        for (p, k) in r.plain.curve.iter().zip(&r.kd.curve) {
            curve_rows.push(vec![
                run.seed.to_string(),
                p.epoch.to_string(),
                format!("{}", p.base_acc),
                format!("{}", k.base_acc),
                format!("{}", p.new_acc),
                format!("{}", k.new_acc),
            ]);
            if idx == 0 {
                let _ = writeln!(dat, "{} {} {}", p.epoch, p.base_acc, k.base_acc);
            }
        }
    }
    let summary_header = ["run_seed", "base_before", "base_after_plain", "base_after_kd", "new_after_plain", "new_after_kd", "retention_advantage"];
    let summary_rows: Vec<Vec<String>> = out
        .runs
        .iter()
        .map(|run| {
            let r = &run.report;
            vec![
                run.seed.to_string(),
                format!("{:.4}", r.general_acc_before),
                format!("{:.4}", r.general_acc_after_plain),
                format!("{:.4}", r.general_acc_after_kd),
                format!("{:.4}", r.new_task_acc_plain),
                format!("{:.4}", r.new_task_acc_kd),
                format!("{:.4}", r.retention_advantage),
            ]
        })
        .collect();
    let stdout = match fmt {
        Format::Json => body.clone(),
        Format::Csv => csv(&summary_header, &summary_rows),
        Format::Table => {
            let mut s = table(&summary_header, &summary_rows);
            let _ = writeln!(
                s,
                "distillation >= plain in {} of {} runs; mean retention advantage {:.4}",
                out.summary.kd_at_least_plain, out.summary.runs, out.summary.mean_retention_advantage
            );
            s
        }
    };
    Ok(CommandOutput {
        stdout,
        files: vec![
            ("forget.json".into(), body),
            ("forget_curves.csv".into(), csv(&curve_header, &curve_rows)),
            ("forget_base_acc.dat".into(), dat),
        ],
        exit_code: EXIT_OK,
    })
}
