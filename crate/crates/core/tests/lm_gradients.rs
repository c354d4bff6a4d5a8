use decipher_core::lm::{
    clm_batch, corrupt, plain_batch, training_step, AdamConfig, AdamState, Batch, Group, Masking, ModelConfig,
    ModelParams, TrainableFlags,
};

fn small_config(tie: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ff_dim: 16,
        max_seq: 12,
        vocab_size: 20,
        tie_embeddings: tie,
        eval_layers: vec![0, 1, 2],
        init_std: 0.3,
    }
}

fn sentences() -> Vec<Vec<u32>> {
    vec![vec![5, 6, 7, 8, 9], vec![15, 16, 17], vec![6, 8, 5, 7]]
}

fn refs(s: &[Vec<u32>]) -> Vec<&[u32]> {
    s.iter().map(|v| v.as_slice()).collect()
}

/// Central differences on every parameter, compared against backprop.
fn check_gradient(params: &ModelParams<f64>, batch: &Batch) {
    let (_, grad) = params.loss_and_grad(batch).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for i in 0..p.num_params() {
        let orig = p.data[i];
        p.data[i] = orig + h;
        let up = p.loss(batch).unwrap();
        p.data[i] = orig - h;
        let down = p.loss(batch).unwrap();
        p.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = numeric.abs().max(grad[i].abs()).max(1e-6);
        let rel = (numeric - grad[i]).abs() / denom;
        if (numeric - grad[i]).abs() > 1e-7 {
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn causal_gradient_matches_finite_differences() {
    let p: ModelParams<f64> = ModelParams::init(small_config(true), 10, 3).unwrap();
    let s = sentences();
    check_gradient(&p, &clm_batch(&refs(&s), 12));
}

#[test]
fn masked_gradient_matches_finite_differences() {
    let p: ModelParams<f64> = ModelParams::init(small_config(true), 10, 4).unwrap();
    let s = sentences();
    let b = corrupt(&plain_batch(&refs(&s), 12), &Masking::with_ratio(0.4), 10, 20, 9).unwrap();
    check_gradient(&p, &b);
}

#[test]
fn untied_head_and_restricted_output_gradients() {
    let p: ModelParams<f64> = ModelParams::init(small_config(false), 10, 5).unwrap();
    let s = vec![vec![15u32, 16, 17, 18], vec![19, 15]];
    let mut b = corrupt(&plain_batch(&refs(&s), 12), &Masking::with_ratio(0.5), 10, 20, 2).unwrap();
    b.output_range = Some(10..20);
    check_gradient(&p, &b);
}

#[test]
fn frozen_groups_never_move() {
    let mut p: ModelParams<f32> = ModelParams::init(ModelConfig::tiny(30), 15, 1).unwrap();
    p.trainable = TrainableFlags::TARGET_ONLY;
    let before = p.clone();
    let s = vec![vec![20u32, 21, 22, 23], vec![24, 25, 20]];
    let b = clm_batch(&refs(&s), 32);
    let mut st = AdamState::new(p.num_params());
    for _ in 0..5 {
        training_step(&mut p, &b, &mut st, &AdamConfig::default(), 1e-2, None).unwrap();
    }
    assert_eq!(p.group(Group::SourceEmbeddings), before.group(Group::SourceEmbeddings));
    assert_eq!(p.group(Group::Contextual), before.group(Group::Contextual));
    assert_ne!(p.group(Group::TargetEmbeddings), before.group(Group::TargetEmbeddings));
}

#[test]
fn relabeling_vocabulary_leaves_loss_unchanged() {
    let p: ModelParams<f64> = ModelParams::init(small_config(true), 10, 8).unwrap();
    let s = sentences();
    let loss = p.loss(&clm_batch(&refs(&s), 12)).unwrap();

    // Swap ids 5 and 16 in the embedding table and in the data.
    let swap = |t: u32| match t {
        5 => 16,
        16 => 5,
        x => x,
    };
    let d = p.config.hidden;
    let mut q = p.clone();
    for k in 0..d {
        q.data.swap(5 * d + k, 16 * d + k);
    }
    let relabeled: Vec<Vec<u32>> = s.iter().map(|v| v.iter().map(|&t| swap(t)).collect()).collect();
    let loss2 = q.loss(&clm_batch(&refs(&relabeled), 12)).unwrap();
    assert!((loss - loss2).abs() < 1e-12, "{loss} vs {loss2}");
}
