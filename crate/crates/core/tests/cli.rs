use std::path::Path;
use std::process::Command;

use ladderdiff::cli::commands::{
    cmd_bench, cmd_effnfe, cmd_eval, cmd_gen_shapes, cmd_sample, cmd_train, jsonl, Reference, SampleSource,
};
use ladderdiff::cli::config::RunConfig;
use ladderdiff::cli::files::{load_tensor, save_tensor, Checkpoint};
use ladderdiff::numerics::Tensor;
use serde_json::Value;

const SMALL: &str = "\
ladder = 8, 4
base_channels = 4
channel_mults = 1, 1
blocks_per_level = 1
embed_dim = 8
dataset_count = 32
steps = 4
batch = 4
checkpoint_every = 2
";

const MIXTURE: &str = "\
ladder = 8, 4, 2
channel_mults = 1, 1, 1
base_channels = 4
embed_dim = 8
blocks_per_level = 1
steps_stage1 = 6
steps_stage2 = 8
steps_stage3 = 8
mixture_components = 2
mixture_weight_comp1 = 1
mixture_mean_comp1 = -0.3
mixture_weight_comp2 = 1
mixture_mean_comp2 = 0.4
mixture_variance_comp2 = 0.1
";

fn parse_lines(bytes: &[u8]) -> Vec<Value> {
    std::str::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    parse_lines(&std::fs::read(path).unwrap())
}

#[test]
fn jsonl_records_carry_schema_and_kind() {
    let line = jsonl("nfe", &serde_json::json!({"stage": 1})).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["kind"], "nfe");
    assert!(jsonl("nfe", &3).is_err());
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(SMALL).unwrap();
    cfg.train_steps = 0;
    let mut out = Vec::new();
    let s = cmd_train(&cfg, dir.path(), None, false, &mut out).unwrap();
    assert_eq!(s.steps, 0);
    let ckpt = Checkpoint::<f32>::load(&dir.path().join("checkpoint.ldif")).unwrap();
    assert_eq!(ckpt.step, 0);
    assert!(ckpt.params.iter().all(|(_, e)| e.step == 0));
    assert!(std::fs::read(dir.path().join("train.jsonl")).unwrap().is_empty());
}

#[test]
fn training_is_reproducible_and_resumable() {
    let cfg = RunConfig::parse(SMALL).unwrap();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut sink = Vec::new();
    cmd_train(&cfg, a.path(), None, false, &mut sink).unwrap();
    cmd_train(&cfg, b.path(), None, false, &mut sink).unwrap();
    let bytes_a = std::fs::read(a.path().join("checkpoint.ldif")).unwrap();
    assert_eq!(bytes_a, std::fs::read(b.path().join("checkpoint.ldif")).unwrap());

    let log = read_jsonl(&a.path().join("train.jsonl"));
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|r| r["schema"] == 1 && r["kind"] == "train" && r["losses"].as_array().unwrap().len() == 2));

    // two steps, then resume to four
    let mut half = cfg.clone();
    half.train_steps = 2;
    cmd_train(&half, c.path(), None, false, &mut sink).unwrap();
    let resume = c.path().join("checkpoint.ldif");
    let moved = c.path().join("half.ldif");
    std::fs::rename(&resume, &moved).unwrap();
    cmd_train(&cfg, c.path(), Some(&moved), false, &mut sink).unwrap();
    assert_eq!(std::fs::read(c.path().join("checkpoint.ldif")).unwrap(), bytes_a);
}

#[test]
fn config_mismatch_is_refused_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(SMALL).unwrap();
    cfg.train_steps = 0;
    cmd_train(&cfg, dir.path(), None, false, &mut Vec::new()).unwrap();
    let ckpt = dir.path().join("checkpoint.ldif");

    let mut other = RunConfig::parse(SMALL).unwrap();
    other.net.sigma_data = 0.6;
    other.loss.sigma_data = 0.6;
    let out = dir.path().join("s");
    assert!(cmd_sample(&other, SampleSource::Checkpoint(&ckpt), 2, 2, &out, false, &mut Vec::new()).is_err());
    assert!(!out.exists());
    cmd_sample(&other, SampleSource::Checkpoint(&ckpt), 2, 2, &out, true, &mut Vec::new()).unwrap();
}

#[test]
fn single_sample_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(SMALL).unwrap();
    cfg.train_steps = 1;
    cmd_train(&cfg, dir.path(), None, false, &mut Vec::new()).unwrap();
    let ckpt = dir.path().join("checkpoint.ldif");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_sample(&cfg, SampleSource::Checkpoint(&ckpt), 1, 1, &a, false, &mut Vec::new()).unwrap();
    cmd_sample(&cfg, SampleSource::Checkpoint(&ckpt), 1, 1, &b, false, &mut Vec::new()).unwrap();
    let bytes = std::fs::read(a.join("samples.ldtn")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("samples.ldtn")).unwrap());
    assert_eq!(load_tensor::<f32>(&a.join("samples.ldtn")).unwrap().shape(), &[1, 1, 8, 8]);
}

#[test]
fn oracle_sampling_reports_one_nfe_record_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(MIXTURE).unwrap();
    let mut out = Vec::new();
    let recs = cmd_sample(&cfg, SampleSource::Oracle, 5, 2, dir.path(), false, &mut out).unwrap();
    assert_eq!(recs.len(), 3);
    let lines = read_jsonl(&dir.path().join("sample.jsonl"));
    assert_eq!(lines.len(), 3);
    assert_eq!(parse_lines(&out), lines);
    let stages: Vec<u64> = lines.iter().map(|r| r["stage"].as_u64().unwrap()).collect();
    assert_eq!(stages, vec![3, 2, 1]);
    for (r, want) in lines.iter().zip(cfg.cascade.nfes().iter().rev()) {
        assert_eq!(r["kind"], "nfe");
        assert_eq!(r["nfe"].as_u64().unwrap() as usize, *want);
    }
    let images = load_tensor::<f64>(&dir.path().join("samples.ldtn")).unwrap();
    assert_eq!(images.shape(), &[5, 1, 8, 8]);
    assert!(images.is_finite());
}

#[test]
fn eval_against_itself_and_mixture_moments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(MIXTURE).unwrap();
    cmd_sample(&cfg, SampleSource::Oracle, 200, 100, dir.path(), false, &mut Vec::new()).unwrap();
    let samples = dir.path().join("samples.ldtn");

    let same = cmd_eval(&samples, Reference::File(&samples), &mut Vec::new()).unwrap();
    assert!(same.frechet < 1e-6);

    let mut out = Vec::new();
    let vs = cmd_eval(&samples, Reference::Mixture(&cfg), &mut out).unwrap();
    assert_eq!(vs.reference, "mixture");
    assert_eq!(vs.dim, 64);
    assert!(vs.frechet.is_finite() && vs.frechet > 0.0);
    assert_eq!(parse_lines(&out)[0]["kind"], "frechet");

    let other = dir.path().join("other.ldtn");
    save_tensor(&other, &Tensor::<f32>::zeros(&[10, 1, 4, 4])).unwrap();
    assert!(cmd_eval(&samples, Reference::File(&other), &mut Vec::new()).is_err());
}

#[test]
fn bench_then_effnfe() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(SMALL).unwrap();
    cfg.bench_single_steps = 4;
    let mut out = Vec::new();
    let outcome = cmd_bench(&cfg, None, 2, 0, 1, false, &mut out).unwrap();
    let recs = parse_lines(&out);
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[2]["kind"], "speedup");
    let cross = recs[2]["single_latency_s"].as_f64().unwrap() / recs[2]["cascade_latency_s"].as_f64().unwrap() - 1.0;
    assert!((cross - outcome.speedup).abs() < 1e-12);
    assert_eq!(outcome.cascade.stages.len(), 2);

    let bench = dir.path().join("bench.jsonl");
    std::fs::write(&bench, &out).unwrap();
    let report = cmd_effnfe(&bench, None, &mut Vec::new()).unwrap();
    let nfes = cfg.cascade.nfes();
    assert!(report.effective_nfe >= nfes[0] && report.effective_nfe <= nfes.iter().sum::<usize>());
    let replaced = cmd_effnfe(&bench, Some(&[7, 0]), &mut Vec::new()).unwrap();
    assert_eq!(replaced.effective_nfe, 7);
    assert!(cmd_effnfe(&bench, Some(&[7]), &mut Vec::new()).is_err());

    let stripped = dir.path().join("stripped.jsonl");
    let text: String = recs
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.as_object_mut().unwrap().remove("stages");
            format!("{r}\n")
        })
        .collect();
    std::fs::write(&stripped, text).unwrap();
    assert!(cmd_effnfe(&stripped, None, &mut Vec::new()).is_err());
}

#[test]
fn gen_shapes_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap();
    let (a, b) = (dir.path().join("a.ldtn"), dir.path().join("b.ldtn"));
    cmd_gen_shapes(&cfg, 20, &a, &mut Vec::new()).unwrap();
    cmd_gen_shapes(&cfg, 20, &b, &mut Vec::new()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let t = load_tensor::<f32>(&a).unwrap();
    assert_eq!(t.shape(), &[20, 1, 8, 8]);
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(load_tensor::<f32>(&dir.path().join("a.ldtn.labels")).unwrap().shape(), &[20]);
}

#[test]
fn file_dataset_with_labels_trains_a_conditional_net() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig::parse(SMALL).unwrap();
    let data = dir.path().join("shapes.ldtn");
    cmd_gen_shapes(&base, 16, &data, &mut Vec::new()).unwrap();
    let text = format!(
        "{SMALL}label_count = 2\ndataset = {}\ndataset_labels = {}.labels\n",
        data.display(),
        data.display()
    )
    .replace("dataset_count = 32\n", "");
    let cfg = RunConfig::parse(&text).unwrap();
    let s = cmd_train(&cfg, &dir.path().join("run"), None, false, &mut Vec::new()).unwrap();
    assert_eq!(s.steps, 4);
    assert!(s.final_losses.iter().all(|l| l.is_finite()));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ladderdiff"))
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = dir.path().join("run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--steps", "2", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(parse_lines(&out.stdout)[0]["steps"], 2);

    let out = bin()
        .args(["sample", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--count", "2", "--checkpoint"])
        .arg(run.join("checkpoint.ldif"))
        .arg("--out")
        .arg(dir.path().join("s"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(parse_lines(&out.stdout).len(), 2);
}

#[test]
fn binary_rejects_bad_config_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, format!("{SMALL}learning_rate = 3\n")).unwrap();
    let run = dir.path().join("run");
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!run.exists());

    let missing = bin().args(["sample", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert!(!missing.status.success());
}
