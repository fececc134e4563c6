use approx::assert_relative_eq;
use gem_core::model::{
    evaluate, forgetting_experiment, train_step, AdamW, ForgettingSetup, GemConfig, GemModel, SyntheticTask,
    TaskSpec, TrainConfig,
};
use gem_core::quant::qakp_loss;

type Mat = Vec<Vec<f64>>;

fn get(model: &GemModel, name: &str) -> Mat {
    let p = model.param(name).unwrap_or_else(|| panic!("no parameter {name}"));
    p.value.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Dense single-pathway transformer over `tokens`: residual attention then a
/// residual tanh feed-forward layer per block, mean-pooled linear head.
fn plain_transformer_logits(model: &GemModel, tokens: &[u32]) -> Vec<f64> {
    let cfg = model.config();
    let emb = get(model, "embedding");
    let mut h: Mat = tokens.iter().map(|&t| emb[t as usize].clone()).collect();
    let n = tokens.len();
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
    for l in 0..cfg.pathway_layers {
        let w = |t: &str| get(model, &format!("pathway.general.block{l}.{t}"));
        let (q, k, v) = (matmul(&h, &w("wq")), matmul(&h, &w("wk")), matmul(&h, &w("wv")));
        let mut ctx = vec![vec![0.0; cfg.embed_dim]; n];
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for j in 0..n {
                let a = (s[j] - m).exp() / z;
                for c in 0..cfg.embed_dim {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
        let att = matmul(&ctx, &w("wo"));
        let u: Mat = h.iter().zip(&att).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect()).collect();
        let b1 = &w("b1")[0];
        let b2 = &w("b2")[0];
        let g: Mat = matmul(&u, &w("w1"))
            .into_iter()
            .map(|r| r.iter().zip(b1).map(|(a, b)| (a + b).tanh()).collect())
            .collect();
        let f = matmul(&g, &w("w2"));
        h = (0..n)
            .map(|i| (0..cfg.embed_dim).map(|c| u[i][c] + f[i][c] + b2[c]).collect())
            .collect();
    }
    let logits = matmul(&h, &get(model, "head.w"));
    let hb = &get(model, "head.b")[0];
    (0..cfg.num_classes)
        .map(|c| logits.iter().map(|r| r[c] + hb[c]).sum::<f64>() / n as f64)
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    x.iter().map(|v| (v - m).exp() / z).collect()
}

const TOKENS: [u32; 8] = [3, 17, 42, 5, 63, 0, 29, 11];

#[test]
fn general_only_routing_with_one_cluster_is_a_plain_transformer() {
    for seed in [0, 9] {
        let cfg = GemConfig { quantize: false, tau: 1.0, scar_k: 1, seed, ..GemConfig::default() };
        let mut model = GemModel::new(cfg).unwrap();
        model.tie_pathways_to_general();
        let out = model.forward(&TOKENS).unwrap();
        assert!(out.routing.iter().all(|r| r.target == gem_core::router::RouteTarget::General));
        let want = softmax(&plain_transformer_logits(&model, &TOKENS));
        for (g, w) in out.sequence_probs.iter().zip(&want) {
            assert_relative_eq!(*g, *w, epsilon = 1e-9);
        }
    }
}

#[test]
fn default_forward_pass_is_a_stable_snapshot() {
    let model = GemModel::new(GemConfig::default()).unwrap();
    let a = model.forward(&TOKENS).unwrap();
    let b = GemModel::new(GemConfig::default()).unwrap().forward(&TOKENS).unwrap();
    assert_eq!(a.sequence_probs, b.sequence_probs);
    assert_relative_eq!(a.sequence_probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    for row in a.token_probs.rows() {
        assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
    }
    for (g, w) in a.sequence_probs.iter().zip(GOLDEN_SEQUENCE_PROBS) {
        assert_relative_eq!(*g, w, max_relative = 1e-9);
    }
}

// Recorded from the default quantized toy model.
const GOLDEN_SEQUENCE_PROBS: [f64; 16] = [
    0.048587834967675776,
    0.04605350763783966,
    0.25866270094262495,
    0.03906879078156495,
    0.01463139351843974,
    0.007647318652885415,
    0.012448707244716374,
    0.29034773565638106,
    0.01695226267048793,
    0.019757419103845247,
    0.07871412465122346,
    0.07362233343450185,
    0.023411224343669074,
    0.016750093671653407,
    0.049445098997733576,
    0.003899453724757525,
];

fn small_task(domain: usize, seed: u64) -> SyntheticTask {
    SyntheticTask::generate(domain, &TaskSpec { sample_count: 64, ..TaskSpec::default() }, seed).unwrap()
}

#[test]
fn fifty_steps_halve_the_task_loss() {
    let task = small_task(3, 1);
    let batch = &task.samples[..32];
    let mut model = GemModel::new(GemConfig { quantize: false, ..GemConfig::default() }).unwrap();
    let mut opt = AdamW::new(&model);
    let cfg = TrainConfig { learning_rate: 1e-2, ..TrainConfig::default() };
    let first = train_step(&mut model, &mut opt, batch, &cfg, None).unwrap().task_loss;
    for _ in 0..49 {
        train_step(&mut model, &mut opt, batch, &cfg, None).unwrap();
    }
    let zero = TrainConfig { learning_rate: 0.0, ..cfg };
    let last = train_step(&mut model, &mut opt, batch, &zero, None).unwrap().task_loss;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn without_penalty_or_distillation_the_loss_is_the_task_loss() {
    let task = small_task(0, 2);
    let mut model = GemModel::new(GemConfig::default()).unwrap();
    let mut opt = AdamW::new(&model);
    let cfg = TrainConfig { learning_rate: 0.0, lambda_quant: 0.0, kd_enabled: false, ..TrainConfig::default() };
    let parts = train_step(&mut model, &mut opt, &task.samples, &cfg, None).unwrap();
    assert!(parts.quant_penalty > 0.0);
    assert_eq!(qakp_loss(&parts).unwrap(), parts.task_loss);
}

#[test]
fn fine_tuning_on_the_same_task_keeps_its_accuracy() {
    let task = small_task(0, 4);
    let mut setup = ForgettingSetup::reference(4);
    setup.base_train.epochs = 4;
    setup.finetune.epochs = 2;
    let r = forgetting_experiment(&task, &task, &setup).unwrap();
    assert!(r.general_acc_before >= 0.9, "base accuracy {}", r.general_acc_before);
    assert!(r.general_acc_after_plain >= r.general_acc_before - 0.05);
    assert!(r.general_acc_after_kd >= r.general_acc_before - 0.05);
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = GemModel::new(GemConfig { seed: 3, ..GemConfig::default() }).unwrap();
    model.save_json(&path).unwrap();
    let back = GemModel::load_json(&path).unwrap();
    let task = small_task(1, 3);
    assert_eq!(evaluate(&model, &task.samples).unwrap(), evaluate(&back, &task.samples).unwrap());
    assert_eq!(model.forward(&TOKENS).unwrap().sequence_probs, back.forward(&TOKENS).unwrap().sequence_probs);
}
