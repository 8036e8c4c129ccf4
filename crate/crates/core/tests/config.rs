use molakd::config::TeacherConfig;
use molakd::data::Dataset;
use molakd::{Stage, TrainConfig};
use proptest::prelude::*;

fn teacher() -> impl Strategy<Value = TeacherConfig> {
    (1usize..16, 1usize..32, 1usize..4, prop::option::of(any::<u64>())).prop_map(|(grid, channels, unshuffle, seed)| {
        TeacherConfig {
            seed,
            ..TeacherConfig::new(grid, channels, unshuffle)
        }
    })
}

fn config() -> impl Strategy<Value = TrainConfig> {
    (
        (1usize..64, 1usize..256, 1usize..6, prop::option::of(1usize..64)),
        prop::collection::vec(teacher(), 1..5),
        (0.0f64..2.0, 0.0f64..1.0, 1e-6f64..1.0, 1u64..10_000),
        (any::<bool>(), any::<u64>(), 2usize..100, prop::option::of(1usize..64)),
        (any::<bool>(), prop::option::of("[a-z/]{1,12}")),
    )
        .prop_map(|((tokens, width, depth, rank), teachers, (l1, l2, lr, steps), (fine, seed, vocab, lm), (wall, out))| {
            TrainConfig {
                tokens,
                width,
                depth,
                rank,
                teachers,
                lambda1: l1,
                lambda2: l2,
                lr,
                steps,
                stage: if fine { Stage::Finetune } else { Stage::Pretrain },
                seed,
                vocab,
                lm_width: lm,
                record_wall_time: wall,
                output_dir: out,
                ..TrainConfig::default()
            }
        })
}

proptest! {
    #[test]
    fn parse_serialize_parse_is_identity(cfg in config()) {
        let text = cfg.to_json();
        let back = TrainConfig::from_json_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn samples_are_seeded_and_in_range(seed in any::<u64>(), index in 0usize..64) {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let data = Dataset::from_config(&cfg);
        let s = data.sample(index);
        prop_assert_eq!(&s, &data.sample(index));
        prop_assert_eq!(s.instruction.len(), cfg.instruction_len);
        prop_assert_eq!(s.response.len(), cfg.response_len);
        prop_assert!(s.instruction.iter().chain(&s.response).all(|&t| t < cfg.vocab));
        prop_assert_eq!(s.image.shape(), &[cfg.image_size, cfg.image_size, cfg.image_channels]);
    }
}

#[test]
fn documented_defaults() {
    let cfg = TrainConfig::default();
    cfg.validate().unwrap();
    assert_eq!((cfg.lambda1, cfg.lambda2), (0.5, 0.05));
    assert_eq!(cfg.general_adapters, 3);
    assert_eq!((cfg.tokens, cfg.width, cfg.depth, cfg.num_teachers()), (16, 32, 2, 3));
    assert_eq!(cfg.resolved_rank(), 8);
    assert_eq!(TrainConfig { width: 128, ..cfg.clone() }.resolved_rank(), 32);
    assert_eq!(cfg.lr, 1e-3);
    let partial = TrainConfig::from_json_str(r#"{"steps": 7}"#).unwrap();
    assert_eq!(partial, TrainConfig { steps: 7, ..TrainConfig::default() });
}

#[test]
fn validation_names_the_field() {
    let cases: Vec<(TrainConfig, &str)> = vec![
        (TrainConfig { rank: Some(32), ..TrainConfig::default() }, "rank"),
        (TrainConfig { heads: 2, ..TrainConfig::default() }, "heads"),
        (TrainConfig { tokens: 15, ..TrainConfig::default() }, "tokens"),
        (TrainConfig { teachers: vec![], ..TrainConfig::default() }, "teachers"),
        (TrainConfig { lambda2: -1.0, ..TrainConfig::default() }, "lambda2"),
        (TrainConfig { steps: 0, ..TrainConfig::default() }, "steps"),
    ];
    for (cfg, field) in cases {
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains(field), "{field}: {err}");
    }
}
