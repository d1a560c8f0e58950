use std::path::Path;

use fewgen::io::{
    load_backbone, load_checkpoint, load_classifier, load_dataset, load_prefixes, load_weight_net, read_losses_csv, save_backbone,
    save_classifier, save_prefixes, save_weight_net, write_dataset, write_losses_csv, write_stage2_csv, write_trace_csv,
};
use fewgen::CliError;
use fewgen_core::classifier::{Classifier, EnsembleTrace, Stage2Step};
use fewgen_core::lm::{Backbone, LabeledSequence, ModelConfig, PrefixBank, Vocabulary};
use fewgen_core::task::{make_synthetic_task, SyntheticTaskSpec, TaskMode};
use fewgen_core::tuning::{StepLosses, WeightNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig { vocab_size: 64, d_model: 8, n_layers: 1, n_heads: 2, prefix_len: 3, max_len: 40 }
}

fn pair_task() -> Vec<LabeledSequence> {
    let spec = SyntheticTaskSpec { mode: TaskMode::Pair, ..SyntheticTaskSpec::default() };
    make_synthetic_task(&spec, 3, 3, 3, 0, 5).unwrap().train
}

#[test]
fn dataset_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(64).unwrap();
    for (name, data) in [
        ("single", make_synthetic_task(&SyntheticTaskSpec::default(), 4, 4, 4, 0, 1).unwrap().test),
        ("pair", pair_task()),
    ] {
        let a = dir.path().join(format!("{name}.jsonl"));
        write_dataset(&a, &data, &vocab, "test").unwrap();
        let loaded = load_dataset(&a, &vocab, 2).unwrap();
        assert_eq!(loaded, data);
        let b = dir.path().join(format!("{name}2.jsonl"));
        write_dataset(&b, &loaded, &vocab, "test").unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn generated_records_carry_source_and_pair_fields() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(64).unwrap();
    let p = dir.path().join("g.jsonl");
    write_dataset(&p, &[LabeledSequence::pair(7, &[4, 5], &[6], 1)], &vocab, "generated").unwrap();
    let line = std::fs::read_to_string(&p).unwrap();
    assert_eq!(line, "{\"text\":[\"t4\",\"t5\"],\"text2\":[\"t6\"],\"label\":1,\"source\":\"generated\",\"id\":7}\n");
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    assert!(load_dataset(&p, &Vocabulary::synthetic(64).unwrap(), 2).unwrap().is_empty());
}

fn parse_error(path: &Path, body: &str) -> CliError {
    std::fs::write(path, body).unwrap();
    load_dataset(path, &Vocabulary::synthetic(64).unwrap(), 2).unwrap_err()
}

#[test]
fn bad_records_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let good = "{\"text\":[\"t4\"],\"label\":0}\n";

    let e = parse_error(&p, &format!("{good}{{\"text\":[\"t4\"],\"label\":2,\"id\":99}}\n"));
    assert!(matches!(&e, CliError::Parse { line: 2, message, .. } if message.contains("99")), "{e}");

    let e = parse_error(&p, &format!("{good}{good}{{\"text\":[\"nope\"],\"label\":0}}\n"));
    assert!(matches!(&e, CliError::Parse { line: 3, message, .. } if message.contains("nope")), "{e}");

    let e = parse_error(&p, "{\"text\":\n");
    assert!(matches!(e, CliError::Parse { line: 1, .. }));
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn ids_default_to_line_index() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("noid.jsonl");
    std::fs::write(&p, "{\"text\":[\"t4\"],\"label\":0}\n\n{\"text\":[\"t5\"],\"label\":1}\n").unwrap();
    let d = load_dataset(&p, &Vocabulary::synthetic(64).unwrap(), 2).unwrap();
    assert_eq!(d.iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 2]);
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(64).unwrap();
    let bb = Backbone::init(small_model(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let p = dir.path().join("bb.ckpt");
    save_backbone(&p, &bb, &vocab).unwrap();
    let (back, v) = load_backbone(&p).unwrap();
    assert_eq!(back, bb);
    assert_eq!(v, vocab);

    let bank = PrefixBank::random(&bb, 2, true, &mut rng).unwrap();
    let p = dir.path().join("prefixes.ckpt");
    save_prefixes(&p, &bank, bb.config(), &vocab).unwrap();
    assert_eq!(load_prefixes(&p).unwrap(), bank);

    let net = WeightNet::init(5, &mut rng).unwrap();
    let p = dir.path().join("net.ckpt");
    save_weight_net(&p, &net, bb.config(), &vocab).unwrap();
    assert_eq!(load_weight_net(&p).unwrap().params(), net.params());

    let clf = Classifier::from_backbone(&bb, 3, &mut rng).unwrap();
    let p = dir.path().join("clf.ckpt");
    save_classifier(&p, &clf, &vocab).unwrap();
    let (back, _) = load_classifier(&p).unwrap();
    assert_eq!(back.params(), clf.params());
    assert_eq!(back.num_labels(), 3);
}

#[test]
fn checkpoint_layout_is_header_then_little_endian_values() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(64).unwrap();
    let bb = Backbone::init(small_model(), 3).unwrap();
    let p = dir.path().join("bb.ckpt");
    save_backbone(&p, &bb, &vocab).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
    assert_eq!(header["kind"], "backbone");
    assert_eq!(header["vocab"].as_array().unwrap().len(), 64);
    let values: Vec<f64> =
        bytes[8 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let expected: Vec<f64> = bb.params().iter().flat_map(|p| p.tensor.data().to_vec()).collect();
    assert_eq!(values, expected);
}

#[test]
fn wrong_kind_or_truncation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(64).unwrap();
    let bb = Backbone::init(small_model(), 3).unwrap();
    let p = dir.path().join("bb.ckpt");
    save_backbone(&p, &bb, &vocab).unwrap();
    assert!(load_prefixes(&p).is_err());
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&p).is_err());
}

#[test]
fn loss_history_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("losses.csv");
    let h = vec![
        StepLosses { step: 0, wgen: 1.25, gen: 1.5, disc: -0.5 },
        StepLosses { step: 1, wgen: 0.1 + 0.2, gen: 1.0 / 3.0, disc: -0.499_999_999_999 },
    ];
    write_losses_csv(&p, &h).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("step,L_w-gen,L_gen,L_disc\n0,1.25,1.5,-0.5\n"));
    assert_eq!(read_losses_csv(&p).unwrap(), h);
}

#[test]
fn stage2_and_trace_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s2.csv");
    write_stage2_csv(&p, &[Stage2Step { step: 0, loss: 0.5, retained: 10 }, Stage2Step { step: 1, loss: f64::NAN, retained: 0 }])
        .unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,loss,retained\n0,0.5,10\n1,,0\n");
    let p = dir.path().join("trace.csv");
    write_trace_csv(&p, &[EnsembleTrace { sample_id: 3, t: 2, z_bar: vec![0.25, 0.75], retained: false }], 2).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "sample_id,t,z0,z1,retained\n3,2,0.25,0.75,false\n");
}
