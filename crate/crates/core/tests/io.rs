mod common;

use common::random_images;
use hyneter::harness::sweep::{run_sweep, Factor, SweepBase};
use hyneter::harness::{TaskConfig, TrainConfig};
use hyneter::io::{emit_csv, load_checkpoint, parse_config, save_checkpoint};
use hyneter::{Hyneter, ModelConfig, Variant};

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let original = Hyneter::build(Variant::Micro.config(), 11).unwrap();
    save_checkpoint(&original, &a).unwrap();

    let mut restored = Hyneter::build(Variant::Micro.config(), 12).unwrap();
    load_checkpoint(&mut restored, &a).unwrap();
    save_checkpoint(&restored, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let images = random_images(3, 32, 4);
    let (maps_a, logits_a) = original.infer(&images).unwrap();
    let (maps_b, logits_b) = restored.infer(&images).unwrap();
    assert!(logits_a.bit_eq(&logits_b));
    assert!(maps_a.iter().zip(&maps_b).all(|(x, y)| x.bit_eq(y)));
}

#[test]
fn truncated_checkpoint_leaves_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Hyneter::build(Variant::Micro.config(), 1).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();

    let mut model = Hyneter::build(Variant::Micro.config(), 2).unwrap();
    let before = model.params().clone();
    assert!(load_checkpoint(&mut model, &path).is_err());
    assert!(model.params().bit_eq(&before));
}

#[test]
fn loading_into_a_different_variant_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Hyneter::build(Variant::Micro.config(), 1).unwrap(), &path).unwrap();
    let other = ModelConfig { d: 32, heads: [1, 1, 2, 4], ..Variant::Micro.config() };
    let mut model = Hyneter::build(other, 0).unwrap();
    let before = model.params().clone();
    let err = load_checkpoint(&mut model, &path).unwrap_err().to_string();
    assert!(err.contains('`'), "{err}");
    assert!(model.params().bit_eq(&before));
}

#[test]
fn missing_file_is_an_error() {
    let mut model = Hyneter::build(Variant::Micro.config(), 0).unwrap();
    assert!(load_checkpoint(&mut model, "/nonexistent/x.ckpt").is_err());
}

#[test]
fn config_documents_parse() {
    let (m, t) = parse_config(r#"{"variant": "micro", "delta": 1.5, "train": {"steps": 10}}"#).unwrap();
    assert_eq!(m.delta, 1.5);
    assert_eq!(m.d, 16);
    assert_eq!(t.steps, 10);
    assert_eq!(t.batch, TrainConfig::default().batch);

    let (m, _) = parse_config(r#"{"d": 8, "cnn_layers": [1,1,0,0], "transformer_blocks": [1,1,1,1], "image_size": 32}"#).unwrap();
    assert_eq!(m.d, 8);
    assert!(Hyneter::build(m, 0).is_ok());

    for bad in [r#"{"variant": "huge"}"#, r#"{"variant": "micro", "window": "7"}"#, "{", r#"{"variant": "micro", "train": {"batch": 0}}"#] {
        assert!(parse_config(bad).is_err(), "{bad}");
    }
}

fn sweep_bytes(dir: &std::path::Path, name: &str) -> Vec<u8> {
    let base = SweepBase {
        model: Variant::Micro.config(),
        task: TaskConfig { num_samples: 24, ..Default::default() },
        train: TrainConfig { steps: 3, batch: 8, eval_every: 0, ..Default::default() },
        seed: 5,
    };
    let records = run_sweep(Factor::Cl, &[1.0, 0.0], &base).unwrap();
    let path = dir.join(name);
    emit_csv(&records, &path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn sweep_csv_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = sweep_bytes(dir.path(), "a.csv");
    let b = sweep_bytes(dir.path(), "b.csv");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("factor,value,param_count,"));
    assert!(!text.contains('\r'));
    let rows: Vec<_> = text.lines().skip(1).collect();
    assert!(rows[0].starts_with("CL,0.000000,") && rows[1].starts_with("CL,1.000000,"));
}
