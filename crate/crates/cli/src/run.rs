//! One runner per subcommand. Runners compute; writing files is left to `output`.

use std::path::PathBuf;

use factrfm::datasets::{
    gen_modular_addition, gen_separation, gen_sparse_parity, gen_teacher_regression, load_csv_tabular, load_idx_images,
    SparseParityConfig, TaskMeta,
};
use factrfm::diagnostics::{
    circulant_baseline, circulant_score, min_norm_quadratic, representation_error, run_deep_linear_sweep,
    run_separation_experiment, support_concentration, tau_vs_kprime, DeepLinearConfig,
};
use factrfm::nn::{self, correlation_report, feature_estimates, feature_target, MlpModel};
use factrfm::rfm::rfm_fit;
use factrfm::symlinalg::{read_matrix_csv, sym_eig};
use factrfm::{Dataset, Error, FeatureMatrix, Result, SymMatrix};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{
    DeepLinearExperiment, DiagnoseExperiment, Experiment, NnData, NnFactExperiment, RfmExperiment, RfmTask,
    SeparationExperiment, TauKprimeExperiment,
};

/// Everything a run produces.
pub struct Outcome {
    pub results: Value,
    pub trace_csv: String,
    pub matrices: Vec<(String, DMatrix<f64>)>,
    /// Other files relative to the output directory.
    pub extra: Vec<(PathBuf, String)>,
}

pub fn run(experiment: &Experiment) -> Result<Outcome> {
    match experiment {
        Experiment::Rfm(e) => run_rfm(e),
        Experiment::NnFact(e) => run_nn_fact(e),
        Experiment::Separation(e) => run_separation(e),
        Experiment::DeepLinear(e) => run_deep_linear(e),
        Experiment::TauKprime(e) => run_tau_kprime(e),
        Experiment::Diagnose(e) => run_diagnose(e),
    }
}

fn load_task(task: &RfmTask, seed: u64) -> Result<(Dataset, Dataset)> {
    match task {
        RfmTask::Parity {
            d,
            k,
            n,
            n_test,
            encoding,
        } => {
            let mut cfg = SparseParityConfig::new(*n, *d, *k, seed);
            cfg.n_test = *n_test;
            cfg.encoding = *encoding;
            gen_sparse_parity(&cfg)
        }
        RfmTask::ModularAddition {
            modulus,
            train_fraction,
        } => gen_modular_addition(*modulus, *train_fraction, seed),
        RfmTask::Csv {
            path,
            options,
            train_fraction,
        } => load_csv_tabular(path, options)?.split(*train_fraction, seed),
    }
}

fn fmt_opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

fn run_rfm(e: &RfmExperiment) -> Result<Outcome> {
    let (train, test) = load_task(&e.task, e.seed)?;
    let fit = rfm_fit(&train.x, &train.y, Some((&test.x, &test.y)), &e.algorithm)?;
    let last = fit.final_record();
    let mut results = json!({
        "command": "rfm",
        "status": "ok",
        "task": e.task.kind(),
        "nTrain": train.len(),
        "nTest": test.len(),
        "iterations": last.iteration,
        "trainLoss": last.train_loss,
        "trainAccuracy": last.train_accuracy,
        "testLoss": fmt_opt(last.test_loss),
        "testAccuracy": fmt_opt(last.test_accuracy),
    });
    let extra_metrics = task_scores(&train.meta, &fit.feature_matrix, e.seed)?;
    merge_into(&mut results, extra_metrics);
    Ok(Outcome {
        results,
        trace_csv: fit.trace.to_csv(),
        matrices: vec![("M".into(), fit.feature_matrix.as_matrix().clone())],
        extra: vec![],
    })
}

/// Structure scores that make sense for the task behind `meta`.
fn task_scores(meta: &TaskMeta, m: &FeatureMatrix, seed: u64) -> Result<Value> {
    Ok(match meta {
        TaskMeta::SparseParity { support, .. } => json!({
            "support": support,
            "supportConcentration": support_concentration(m, support)?,
        }),
        TaskMeta::ModularAddition { modulus, .. } => {
            let (mean, sd) = circulant_baseline(m.dim(), *modulus, 20, seed)?;
            json!({
                "circulantScore": circulant_score(m, *modulus)?,
                "circulantBaseline": mean,
                "circulantBaselineSd": sd,
            })
        }
        _ => json!({}),
    })
}

fn merge_into(target: &mut Value, extra: Value) {
    if let (Value::Object(t), Value::Object(x)) = (target, extra) {
        t.extend(x);
    }
}

fn load_nn_data(data: &NnData, seed: u64) -> Result<Dataset> {
    match data {
        NnData::Teacher {
            n,
            input_dim,
            outputs,
            teacher_hidden,
        } => gen_teacher_regression(*n, *input_dim, *outputs, *teacher_hidden, seed),
        NnData::Idx { images, labels, limit } => load_idx_images(images, labels, *limit),
        NnData::Csv { path, options } => load_csv_tabular(path, options),
    }
}

fn run_nn_fact(e: &NnFactExperiment) -> Result<Outcome> {
    let data = load_nn_data(&e.data, e.seed)?;
    let mut dims = vec![data.input_dim()];
    dims.extend(&e.model.hidden);
    dims.push(data.output_dim());
    let model = MlpModel::init(&dims, e.model.activation, e.model.bias, e.seed)?;
    let trained = nn::train(model, &data.x, &data.y, data.weights.as_ref(), &e.algorithm)?;
    let lambda = e.algorithm.weight_decay;
    let layers: Vec<usize> = match &e.layers {
        Some(l) => l.clone(),
        None => (0..trained.model.depth()).collect(),
    };
    let mut rows = Vec::new();
    let mut matrices = Vec::new();
    for &layer in &layers {
        let estimates = feature_estimates(&trained.model, &data.x, &data.y, data.weights.as_ref(), lambda, layer)?;
        rows.extend(correlation_report(&trained.model, &estimates));
        matrices.push((format!("layer{layer}_WtW"), feature_target(&trained.model, layer, false)));
        matrices.push((format!("layer{layer}_WWt"), feature_target(&trained.model, layer, true)));
        for est in &estimates {
            matrices.push((format!("layer{layer}_{}", est.kind.name()), est.matrix.clone()));
        }
    }
    let results = json!({
        "command": "nn-fact",
        "status": "ok",
        "data": e.data.kind(),
        "n": data.len(),
        "dims": dims,
        "stop": trained.stop,
        "steps": trained.steps,
        "finalLoss": trained.final_loss,
        "finalObjective": trained.final_objective,
        "finalGradNorm": trained.final_grad_norm,
        "correlations": rows,
    });
    let checkpoint = serde_json::to_string_pretty(&trained.model)?;
    Ok(Outcome {
        results,
        trace_csv: trained.curve_csv(),
        matrices,
        extra: vec![("model.json".into(), checkpoint)],
    })
}

fn run_separation(e: &SeparationExperiment) -> Result<Outcome> {
    let report = run_separation_experiment(&e.task, e.width, &e.algorithm, e.nfa_power, e.seed)?;
    let mut trace = String::from("step,objective,cosFact,cosAgop,corrFact,corrAgop\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for s in &report.history {
        trace.push_str(&format!(
            "{},{:?},{},{},{},{}\n",
            s.step,
            s.objective,
            opt(s.cos_fact),
            opt(s.cos_agop),
            opt(s.corr_fact),
            opt(s.corr_agop)
        ));
    }
    let results = json!({
        "command": "separation",
        "status": "ok",
        "width": report.width,
        "nfaPower": report.nfa_power,
        "steps": report.steps,
        "cosFact": report.final_snapshot.cos_fact,
        "cosAgop": report.final_snapshot.cos_agop,
        "final": report.final_snapshot,
        "best": report.best_snapshot,
        "finalLoss": report.final_loss,
        "finalObjective": report.final_objective,
        "finalGradNorm": report.final_grad_norm,
        "lossBound": report.loss_bound,
        "degenerate": report.degenerate,
    });
    let model = &report.model;
    let w = model.weight(0);
    let mut matrices = vec![("WtW".to_string(), w.transpose() * w)];
    let data = gen_separation(&e.task)?;
    if let Ok(est) = feature_estimates(model, &data.x, &data.y, data.weights.as_ref(), e.task.weight_decay, 0) {
        for est in est {
            matrices.push((est.kind.name().to_string(), est.matrix));
        }
    }
    Ok(Outcome {
        results,
        trace_csv: trace,
        matrices,
        extra: vec![("model.json".into(), serde_json::to_string_pretty(model)?)],
    })
}

fn run_deep_linear(e: &DeepLinearExperiment) -> Result<Outcome> {
    let cfg = DeepLinearConfig {
        depths: e.task.depths.clone(),
        input_dim: e.task.input_dim,
        output_dim: e.task.output_dim,
        hidden: e.task.hidden,
        n: e.task.n,
        seed: e.seed,
    };
    let rows = run_deep_linear_sweep(&cfg, &e.algorithm)?;
    let mut trace = String::from("depth,cosFact,cosAgopInvDepth,cosAgopHalf,factRelativeError,balancedness,finalLoss,finalGradNorm,steps\n");
    for r in &rows {
        trace.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}\n",
            r.depth,
            r.cos_fact,
            r.cos_agop_inv_depth,
            r.cos_agop_half,
            r.fact_relative_error,
            r.balancedness,
            r.final_loss,
            r.final_grad_norm,
            r.steps
        ));
    }
    Ok(Outcome {
        results: json!({ "command": "deep-linear", "status": "ok", "rows": rows }),
        trace_csv: trace,
        matrices: vec![],
        extra: vec![],
    })
}

fn run_tau_kprime(e: &TauKprimeExperiment) -> Result<Outcome> {
    let (train, test) = load_task(&e.task, e.seed)?;
    let fit = rfm_fit(&train.x, &train.y, Some((&test.x, &test.y)), &e.algorithm)?;
    let report = tau_vs_kprime(&train.x, &fit.feature_matrix, &fit.dual.alpha, &e.algorithm.kernel, e.max_pairs, e.seed)?;
    let last = fit.final_record();
    let results = json!({
        "command": "tau-kprime",
        "status": "ok",
        "task": e.task.kind(),
        "pairs": report.pairs.len(),
        "slope": report.slope,
        "rSquared": report.r_squared,
        "trainAccuracy": last.train_accuracy,
        "testAccuracy": fmt_opt(last.test_accuracy),
    });
    Ok(Outcome {
        results,
        trace_csv: fit.trace.to_csv(),
        matrices: vec![("M".into(), fit.feature_matrix.as_matrix().clone())],
        extra: vec![("tau_kprime.csv".into(), report.to_csv())],
    })
}

fn run_diagnose(e: &DiagnoseExperiment) -> Result<Outcome> {
    let mut results = json!({ "command": "diagnose", "status": "ok" });
    let mut trace = String::from("metric,value\n");
    let mut matrices = Vec::new();
    let record = |results: &mut Value, trace: &mut String, key: &str, value: f64| {
        trace.push_str(&format!("{key},{value:?}\n"));
        merge_into(results, json!({ key: value }));
    };
    if let Some(path) = &e.matrix {
        let raw = read_matrix_csv(path)?;
        let sym = SymMatrix::new(raw)?;
        let eig = sym_eig(&sym)?;
        results["dim"] = json!(sym.dim());
        record(&mut results, &mut trace, "minEigenvalue", eig.min_eigenvalue());
        record(&mut results, &mut trace, "maxEigenvalue", eig.max_eigenvalue());
        let m = FeatureMatrix::new(sym)?;
        if let Some(block) = e.block {
            let (mean, sd) = circulant_baseline(m.dim(), block, e.baseline_trials, e.seed)?;
            record(&mut results, &mut trace, "circulantScore", circulant_score(&m, block)?);
            record(&mut results, &mut trace, "circulantBaseline", mean);
            record(&mut results, &mut trace, "circulantBaselineSd", sd);
        }
        if let Some(support) = &e.support {
            if support.iter().any(|&i| i >= m.dim()) {
                return Err(Error::InvalidConfig(format!("support index out of range for dimension {}", m.dim())));
            }
            record(&mut results, &mut trace, "supportConcentration", support_concentration(&m, support)?);
        }
    }
    if let Some(path) = &e.min_norm {
        let q = SymMatrix::new(read_matrix_csv(path)?)?;
        let sol = min_norm_quadratic(&q, q.dim())?;
        let a = nalgebra::DVector::from_column_slice(&sol.a);
        let w = sol.weight_matrix();
        record(&mut results, &mut trace, "minNormCost", sol.cost);
        results["activeNeurons"] = json!(sol.active_neurons);
        record(&mut results, &mut trace, "representationError", representation_error(&q, &a, &w));
        matrices.push(("minNormW".into(), w));
        matrices.push(("minNormA".into(), DMatrix::from_column_slice(sol.a.len(), 1, &sol.a)));
    }
    Ok(Outcome {
        results,
        trace_csv: trace,
        matrices,
        extra: vec![],
    })
}
