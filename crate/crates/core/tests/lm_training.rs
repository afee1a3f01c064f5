use srlab_core::lm::{
    generate_corpus, per_token_ce, train_lm, CeScope, Corpus, CorpusSpec, LmCheckpoint, LmConfig,
    LmTrainConfig,
};

fn run(
    config: &LmConfig,
    tc: &LmTrainConfig,
    sequences: usize,
    rules: usize,
) -> (Vec<LmCheckpoint>, Vec<Vec<u32>>) {
    let spec =
        CorpusSpec::with_random_rules(config.vocab_size, config.seq_len, sequences, rules, 7);
    let corpus = generate_corpus(&spec).unwrap();
    let held_out = (sequences / 6).min(500);
    let n_train = (sequences - held_out) * config.seq_len;
    let train = Corpus {
        vocab_size: corpus.vocab_size,
        sequence_length: corpus.sequence_length,
        tokens: corpus.tokens[..n_train].to_vec(),
        firings: corpus.firings[..n_train].to_vec(),
    };
    let eval: Vec<Vec<u32>> = (sequences - held_out..sequences)
        .map(|i| corpus.sequence(i).to_vec())
        .collect();
    (train_lm(config, &train, &eval, tc).unwrap(), eval)
}

fn check_learning(cks: &[LmCheckpoint]) {
    let ce: Vec<f64> = cks.iter().map(|c| c.ce_on_eval).collect();
    assert_eq!(ce.len(), 8);
    assert!(ce[7] < 0.8 * ce[0], "{ce:?}");
    let non_increasing = ce.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(non_increasing >= 6, "{ce:?}");
}

#[test]
fn smoke_scale_run_learns() {
    let config = LmConfig {
        vocab_size: 64,
        layers: 2,
        d_model: 32,
        d_mlp: 128,
        heads: 2,
        seq_len: 32,
        hook_layer: 0,
    };
    let tc = LmTrainConfig {
        steps: 600,
        warmup_steps: 50,
        ..LmTrainConfig::default()
    };
    let (cks, eval) = run(&config, &tc, 1200, 24);
    check_learning(&cks);

    let last = &cks[7];
    let ce = per_token_ce(&last.model, &eval, CeScope::AllTokens).unwrap();
    assert!((ce.overall - last.ce_on_eval).abs() < 1e-4);
    let doubled: Vec<Vec<u32>> = eval.iter().chain(&eval).cloned().collect();
    let again = per_token_ce(&last.model, &doubled, CeScope::AllTokens).unwrap();
    assert_eq!(
        again.per_prompt[..eval.len()],
        again.per_prompt[eval.len()..]
    );
    assert_eq!(again.per_prompt[..eval.len()], ce.per_prompt[..]);
}

#[test]
#[ignore = "about an hour on one core; trains the default-size model"]
fn default_config_run_learns() {
    let tc = LmTrainConfig::default();
    // One pass over fresh sequences; a few thousand repeated ones overfit.
    let (cks, _) = run(
        &LmConfig::default(),
        &tc,
        tc.steps * tc.batch_size + 500,
        64,
    );
    check_learning(&cks);
}
