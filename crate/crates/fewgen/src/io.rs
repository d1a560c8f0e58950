//! Dataset, checkpoint and history files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use fewgen_core::classifier::{Classifier, EnsembleTrace, Stage2Step};
use fewgen_core::lm::{Backbone, LabeledSequence, ModelConfig, PrefixBank, Vocabulary};
use fewgen_core::numerics::{ParameterSet, Tensor};
use fewgen_core::tuning::{StepLosses, TokenWeights, WeightNet};
use serde::{Deserialize, Serialize};

use crate::config::ModelSection;
use crate::error::CliError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text2: Option<Vec<String>>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
}

fn names(vocab: &Vocabulary, tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|&t| vocab.token(t).unwrap_or("<unk>").to_string()).collect()
}

/// Writes one JSON record per line: `text` (and `text2` for pairs) as token names,
/// `label`, `source` and the sequence id.
pub fn write_dataset(path: &Path, data: &[LabeledSequence], vocab: &Vocabulary, source: &str) -> Result<(), CliError> {
    let mut out = String::new();
    for seq in data {
        let (text, text2) = if seq.is_pair() {
            (names(vocab, seq.first()), Some(names(vocab, seq.second())))
        } else {
            (names(vocab, &seq.tokens), None)
        };
        let rec = Record { text, text2, label: seq.label, source: Some(source.to_string()), id: Some(seq.id) };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Reads a dataset written by [`write_dataset`] (or by hand). Records without an id
/// get their zero-based line index. Blank lines are skipped.
pub fn load_dataset(path: &Path, vocab: &Vocabulary, num_labels: usize) -> Result<Vec<LabeledSequence>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CliError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        let id = rec.id.unwrap_or(i as u64);
        if rec.label >= num_labels {
            return Err(err(format!("record {id} has label {} but there are only {num_labels} labels", rec.label)));
        }
        let lookup = |toks: &[String]| -> Result<Vec<usize>, CliError> {
            toks.iter()
                .map(|t| vocab.lookup(t).ok_or_else(|| err(format!("record {id} has unknown token `{t}`"))))
                .collect()
        };
        let text = lookup(&rec.text)?;
        let seq = match rec.text2 {
            Some(t2) => LabeledSequence::pair(id, &text, &lookup(&t2)?, rec.label),
            None => LabeledSequence::single(id, text, rec.label),
        };
        if seq.tokens.is_empty() {
            return Err(err(format!("record {id} is empty")));
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    model: ModelSection,
    vocab: Vec<String>,
    num_labels: usize,
    infix: bool,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "fewgen-checkpoint-v1";

/// A parameter set with the configuration needed to rebuild the model around it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    /// Label count for prefix banks and classifiers, zero otherwise.
    pub num_labels: usize,
    pub infix: bool,
    pub params: ParameterSet,
}

/// Layout: header length as a little-endian `u64`, the JSON header, then every
/// tensor's values as little-endian `f64` in header order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let header = Header {
        format: FORMAT.into(),
        kind: ckpt.kind.clone(),
        model: ModelSection::from(&ckpt.model),
        vocab: ckpt.vocab.tokens().to_vec(),
        num_labels: ckpt.num_labels,
        infix: ckpt.infix,
        tensors: ckpt
            .params
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), trainable: p.trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + json.len() + 8 * ckpt.params.flat_len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in ckpt.params.iter() {
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bad = |m: String| CliError::format(path, m);
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| CliError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(bad("truncated checkpoint".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unsupported checkpoint format `{}`", header.format)));
    }
    let mut data = &bytes[8 + hlen..];
    let mut params = ParameterSet::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad(format!("truncated tensor `{}`", t.name)));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        data = &data[8 * n..];
        let tensor = Tensor::new(t.shape.clone(), values).map_err(|e| bad(e.to_string()))?;
        params.insert(&t.name, tensor, t.trainable).map_err(|e| bad(e.to_string()))?;
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    let vocab = Vocabulary::new(header.vocab).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint {
        kind: header.kind,
        model: header.model.to_config(),
        vocab,
        num_labels: header.num_labels,
        infix: header.infix,
        params,
    })
}

fn expect_kind(path: &Path, ckpt: &Checkpoint, kind: &str) -> Result<(), CliError> {
    if ckpt.kind != kind {
        return Err(CliError::format(path, format!("expected a {kind} checkpoint, found {}", ckpt.kind)));
    }
    Ok(())
}

pub fn save_backbone(path: &Path, backbone: &Backbone, vocab: &Vocabulary) -> Result<(), CliError> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: "backbone".into(),
            model: *backbone.config(),
            vocab: vocab.clone(),
            num_labels: 0,
            infix: false,
            params: backbone.params().clone(),
        },
    )
}

pub fn load_backbone(path: &Path) -> Result<(Backbone, Vocabulary), CliError> {
    let c = load_checkpoint(path)?;
    expect_kind(path, &c, "backbone")?;
    let bb = Backbone::from_params(c.model, c.params).map_err(|e| CliError::format(path, e.to_string()))?;
    Ok((bb, c.vocab))
}

pub fn save_prefixes(path: &Path, bank: &PrefixBank, model: &ModelConfig, vocab: &Vocabulary) -> Result<(), CliError> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: "prefixes".into(),
            model: *model,
            vocab: vocab.clone(),
            num_labels: bank.num_labels(),
            infix: bank.has_infix(),
            params: bank.params().clone(),
        },
    )
}

pub fn load_prefixes(path: &Path) -> Result<PrefixBank, CliError> {
    let c = load_checkpoint(path)?;
    expect_kind(path, &c, "prefixes")?;
    PrefixBank::from_params(c.num_labels, c.model.n_layers, c.model.prefix_len, c.model.d_model, c.infix, c.params)
        .map_err(|e| CliError::format(path, e.to_string()))
}

pub fn save_weight_net(path: &Path, net: &WeightNet, model: &ModelConfig, vocab: &Vocabulary) -> Result<(), CliError> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: "weight-net".into(),
            model: *model,
            vocab: vocab.clone(),
            num_labels: 0,
            infix: false,
            params: net.params().clone(),
        },
    )
}

pub fn load_weight_net(path: &Path) -> Result<WeightNet, CliError> {
    let c = load_checkpoint(path)?;
    expect_kind(path, &c, "weight-net")?;
    WeightNet::from_params(c.params).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn save_classifier(path: &Path, clf: &Classifier, vocab: &Vocabulary) -> Result<(), CliError> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: "classifier".into(),
            model: *clf.config(),
            vocab: vocab.clone(),
            num_labels: clf.num_labels(),
            infix: false,
            params: clf.params().clone(),
        },
    )
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, Vocabulary), CliError> {
    let c = load_checkpoint(path)?;
    expect_kind(path, &c, "classifier")?;
    let clf = Classifier::from_params(c.model, c.num_labels, c.params).map_err(|e| CliError::format(path, e.to_string()))?;
    Ok((clf, c.vocab))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::format(path, e.to_string())
}

fn finish(path: &Path, w: csv::Writer<BufWriter<File>>) -> Result<(), CliError> {
    let mut inner = w.into_inner().map_err(|e| CliError::format(path, e.to_string()))?;
    inner.flush().map_err(|e| CliError::io(path, e))
}

/// `step,L_w-gen,L_gen,L_disc`, one row per tuning step.
pub fn write_losses_csv(path: &Path, history: &[StepLosses]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "L_w-gen", "L_gen", "L_disc"]).map_err(csv_err(path))?;
    for h in history {
        w.write_record([h.step.to_string(), h.wgen.to_string(), h.gen.to_string(), h.disc.to_string()])
            .map_err(csv_err(path))?;
    }
    finish(path, w)
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<StepLosses>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let err = |m: String| CliError::Parse { path: path.to_path_buf(), line: i + 2, message: m };
        let num = |k: usize| -> Result<f64, CliError> {
            rec.get(k).ok_or_else(|| err("missing column".into()))?.parse().map_err(|e| err(format!("{e}")))
        };
        out.push(StepLosses { step: num(0)? as usize, wgen: num(1)?, gen: num(2)?, disc: num(3)? });
    }
    Ok(out)
}

/// `step,loss,retained` for stage 2; skipped steps have an empty loss.
pub fn write_stage2_csv(path: &Path, history: &[Stage2Step]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "loss", "retained"]).map_err(csv_err(path))?;
    for h in history {
        let loss = if h.loss.is_finite() { h.loss.to_string() } else { String::new() };
        w.write_record([h.step.to_string(), loss, h.retained.to_string()]).map_err(csv_err(path))?;
    }
    finish(path, w)
}

/// `sample_id,t,z0,..,z{L-1},retained` after every refresh.
pub fn write_trace_csv(path: &Path, trace: &[EnsembleTrace], num_labels: usize) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let mut head = vec!["sample_id".to_string(), "t".to_string()];
    head.extend((0..num_labels).map(|l| format!("z{l}")));
    head.push("retained".into());
    w.write_record(&head).map_err(csv_err(path))?;
    for e in trace {
        let mut row = vec![e.sample_id.to_string(), e.t.to_string()];
        row.extend(e.z_bar.iter().map(|z| z.to_string()));
        row.push(e.retained.to_string());
        w.write_record(&row).map_err(csv_err(path))?;
    }
    finish(path, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDump {
    pub sequence_id: u64,
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub disc_values: Vec<f64>,
}

pub fn weight_dumps(weights: &[TokenWeights], vocab: &Vocabulary) -> Vec<WeightDump> {
    weights
        .iter()
        .map(|w| WeightDump {
            sequence_id: w.sequence_id,
            tokens: names(vocab, &w.tokens),
            weights: w.weights.clone(),
            disc_values: w.disc_values.clone(),
        })
        .collect()
}
