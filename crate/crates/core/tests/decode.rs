use treespec_core::engine::{generate_baseline, generate_speculative, DecodeConfig, Mode};
use treespec_core::harness::{execute, gen_prompts, summarize, DecoderKind, RunConfig};
use treespec_core::{Model, ModelConfig, Precision};

#[test]
fn single_precision_decoding_is_lossless() {
    let cfg = ModelConfig {
        precision: Precision::Single,
        ..ModelConfig::teacher(9)
    };
    let teacher: Model<f32> = Model::new(cfg.clone()).unwrap();
    let drafter: Model<f32> = Model::new(ModelConfig::early_exit(&cfg, 1)).unwrap();
    for mode in [Mode::Reference, Mode::Performance] {
        let decode = DecodeConfig {
            max_new_tokens: 40,
            mode,
            ..Default::default()
        };
        for p in gen_prompts(3, 8, (4, 12), 64).unwrap() {
            let base = generate_baseline(&teacher, &p.tokens, &decode).unwrap();
            let spec = generate_speculative(&teacher, &drafter, &p.tokens, &decode).unwrap();
            assert_eq!(base.tokens, spec.tokens, "prompt {} in {mode:?}", p.id);
        }
    }
}

#[test]
fn mixed_precision_run_pairs_every_prompt() {
    let mut cfg = RunConfig {
        prompt_count: 6,
        world_size: 2,
        ..Default::default()
    };
    cfg.drafter.precision = Precision::Single;
    cfg.decode.max_new_tokens = 24;
    let prompts = gen_prompts(cfg.seed, cfg.prompt_count, cfg.prompt_len, 64).unwrap();
    let (traces, failures) = execute(&cfg, &prompts).unwrap();
    assert!(failures.is_empty());
    for pair in traces.chunks(2) {
        assert_eq!(
            (pair[0].decoder, pair[1].decoder),
            (DecoderKind::Baseline, DecoderKind::Speculative)
        );
        assert_eq!(pair[0].output, pair[1].output);
    }
    let report = summarize(&traces).unwrap();
    assert_eq!(report.metric("speedup").unwrap().count, 6);
    let tps = report.tokens_per_teacher_step.unwrap();
    assert!((tps - (1.0 + report.metric("accept_l").unwrap().mean)).abs() < 1e-12);
}
