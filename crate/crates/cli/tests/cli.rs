mod common;

use std::fs;
use std::path::{Path, PathBuf};

use burstnet::audio::{read_wav, write_wav, AudioClip, WavEncoding};
use burstnet::eval::{fuse_labels, read_predictions, FusionMethod};
use burstnet::features::{read_mat1, write_mat1, Matrix};
use burstnet::models::load_checkpoint;
use burstnet::preprocess::VadParams;
use burstnet::rng::SeedTree;
use burstnet::training::{predict_probs, Split, TrainConfig};
use burstnet::Error;
use burstnet_cli::config::Config;
use burstnet_cli::error::{EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use burstnet_cli::manifest::Manifest;
use burstnet_cli::*;
use common::{write_cluster_corpus, Clusters, RATE};

fn run(args: &[&str]) -> i32 {
    burstnet_cli::run(std::iter::once("burstnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn manifest_parsing() {
    let base = Path::new("/data");
    let m = Manifest::parse("path,label,split\na/x.wav,Cry,train\nb.wav,?,test\n", base, Path::new("m.csv")).unwrap();
    assert_eq!(m.rows.len(), 2);
    assert_eq!(m.rows[0].id(), "x");
    assert_eq!(m.rows[0].label, Some(0));
    assert_eq!(m.rows[1].label, None);
    assert_eq!(m.resolve(&m.rows[0]), PathBuf::from("/data/a/x.wav"));
    let reparsed = Manifest::parse(&m.to_csv(), base, Path::new("m.csv")).unwrap();
    assert_eq!(reparsed.rows, m.rows);

    for bad in [
        "path,split,label\n",
        "path,label,split\nx.wav,Sneeze,train\n",
        "path,label,split\nx.wav,?,train\n",
        "path,label,split\nx.wav,Cry,dev\n",
        "path,label,split\nx.wav,Cry,train\nx.wav,Gasp,val\n",
        "path,label,split\na/x.wav,Cry,train\nb/x.wav,Gasp,val\n",
    ] {
        assert!(Manifest::parse(bad, base, Path::new("m.csv")).is_err(), "{bad:?}");
    }
}

#[test]
fn config_parsing() {
    let c = Config::parse("# run settings\nseed = 4\nlearning-rate=0.5\n\nmixup=false\n").unwrap();
    assert_eq!(c.get::<u64>("seed").unwrap(), Some(4));
    assert_eq!(c.pick(Some(9u64), "seed").unwrap(), Some(9));
    assert_eq!(c.pick(None::<f64>, "learning_rate").unwrap(), Some(0.5));
    assert_eq!(c.get::<bool>("mixup").unwrap(), Some(false));
    assert_eq!(c.get::<usize>("epochs").unwrap(), None);
    assert!(c.get::<usize>("learning_rate").is_err());
    for bad in ["colour=red\n", "seed=1\nseed=2\n", "just words\n"] {
        assert!(Config::parse(bad).is_err(), "{bad:?}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = write_cluster_corpus(dir.path(), &Clusters::new(8.0, 1), 2, 1, 1);
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--manifest", s(&manifest), "--out", s(&out), "--approach", "melspec200"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--manifest", s(&manifest), "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(run(&["featurise"]), EXIT_USAGE);
    assert_eq!(run(&["preprocess", "--manifest", s(&manifest), "--out", s(&out), "--workers", "0"]), EXIT_USAGE);
    assert_eq!(run(&["preprocess", "--manifest", s(&manifest), "--out", s(&out), "--vad-percentile", "2"]), EXIT_USAGE);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "speed=3\n").unwrap();
    assert_eq!(run(&["featurize", "--config", s(&cfg)]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(run(&["preprocess", "--manifest", s(&missing), "--out", s(dir.path())]), EXIT_DATA);
}

#[test]
fn empty_manifest_preprocesses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.csv");
    fs::write(&manifest, "path,label,split\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["preprocess", "--manifest", s(&manifest), "--out", s(&out)]), EXIT_OK);
    assert_eq!(fs::read_to_string(out.join("manifest.csv")).unwrap(), "path,label,split\n");
}

fn write_clip(dir: &Path, name: &str, samples: Vec<f32>) {
    let clip = AudioClip::new(samples, RATE, name);
    write_wav(dir.join(name), &clip, WavEncoding::Pcm16).unwrap();
}

/// Silence, a 0.4 s tone at 0.5 of full scale from 0.3 s, silence.
fn tone_in_silence(freq: f32) -> Vec<f32> {
    let n = RATE as usize;
    (0..n)
        .map(|i| {
            if (4800..11200).contains(&i) {
                0.5 * (2.0 * std::f32::consts::PI * freq * i as f32 / RATE as f32).sin()
            } else {
                0.0
            }
        })
        .collect()
}

#[test]
fn preprocess_trims_normalises_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    write_clip(dir.path(), "a.wav", tone_in_silence(440.0));
    write_clip(dir.path(), "b.wav", tone_in_silence(1000.0));
    write_clip(dir.path(), "quiet.wav", vec![0.0; 8000]);
    let manifest = dir.path().join("manifest.csv");
    fs::write(&manifest, "path,label,split\na.wav,Cry,train\nb.wav,Laugh,val\nquiet.wav,?,test\n").unwrap();
    let out = dir.path().join("pre");
    let report = cmd_preprocess(&PreprocessOptions {
        manifest: manifest.clone(),
        out: out.clone(),
        vad: VadParams::default(),
        workers: 2,
    })
    .unwrap();
    assert_eq!(report.flagged(), 1);
    assert!(report.clips[2].flagged_empty);
    for id in ["a", "b"] {
        let clip = read_wav(out.join(format!("{id}.wav"))).unwrap();
        assert_eq!(clip.peak(), 1.0);
        assert!((clip.len() as i64 - 6400).abs() <= 160 * 4, "{id}: {}", clip.len());
    }
    let quiet = read_wav(out.join("quiet.wav")).unwrap();
    assert_eq!(quiet.len(), 8000);
    let written = Manifest::read(&out.join("manifest.csv")).unwrap();
    assert_eq!(written.rows.len(), 3);
    assert_eq!(written.rows[1].split, Split::Val);
    assert!(fs::read_to_string(out.join("preprocess_report.csv")).unwrap().lines().count() == 4);
}

#[test]
fn featurize_is_idempotent_and_reports_length() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir_all(&raw).unwrap();
    let mut manifest = String::from("path,label,split\n");
    for (i, secs) in [0.5f32, 1.0, 1.5, 2.0].iter().enumerate() {
        let n = (secs * RATE as f32) as usize;
        let samples = (0..n).map(|t| (t as f32 * 0.05).sin() * 0.3).collect();
        write_clip(&raw, &format!("c{i}.wav"), samples);
        manifest.push_str(&format!("c{i}.wav,Pant,train\n"));
    }
    let m = raw.join("manifest.csv");
    fs::write(&m, manifest).unwrap();
    let out = dir.path().join("feat");
    let opts = FeaturizeOptions { manifest: m, out: out.clone(), target_len: 85, workers: 1 };
    let first = cmd_featurize(&opts).unwrap();
    let bytes = fs::read(out.join("c3.mat1")).unwrap();
    let second = cmd_featurize(&FeaturizeOptions { workers: 3, ..opts }).unwrap();
    assert_eq!(first.lengths, second.lengths);
    assert_eq!(fs::read(out.join("c3.mat1")).unwrap(), bytes);
    let mat = read_mat1(out.join("c0.mat1")).unwrap();
    assert_eq!((mat.rows, mat.cols), (128, 85));
    assert!(first.lengths.windows(2).all(|w| w[0] < w[1]));
    let report = fs::read_to_string(out.join("featurize_report.txt")).unwrap();
    assert!(report.contains(&format!("q90_frames={}", first.q90.unwrap())), "{report}");
    assert!(report.contains("target_frames=85"));
}

struct Trained {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    train_out: PathBuf,
}

fn train_small_mlp(workers: usize, seed: u64) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = write_cluster_corpus(&dir.path().join("data"), &Clusters::new(8.0, 3), 10, 5, 4);
    let train_out = dir.path().join("run");
    let config = TrainConfig {
        epochs: 4,
        batch_size: 80,
        learning_rate: 1e-3,
        top_k: 3,
        ..TrainConfig::for_architecture(Approach::Embedding.architecture(), seed)
    };
    cmd_train(&TrainOptions {
        manifest: manifest.clone(),
        out: train_out.clone(),
        approach: Approach::Embedding,
        config,
        workers,
    })
    .unwrap();
    Trained { _dir: dir, manifest, train_out }
}

fn predict(t: &Trained, checkpoints: Vec<PathBuf>, name: &str, workers: usize) -> PathBuf {
    let out = t.train_out.join(name);
    cmd_predict(&PredictOptions {
        checkpoints,
        manifest: t.manifest.clone(),
        out: out.clone(),
        split: Some(Split::Val),
        fusion: FusionMethod::Mean,
        workers,
        eval_batch: 16,
    })
    .unwrap();
    out
}

#[test]
fn predict_fuse_and_evaluate() {
    let t = train_small_mlp(1, 5);
    let top = checkpoints_from_history(&history_path(&t.train_out), 3).unwrap();
    assert_eq!(top.len(), 3);
    assert!(fs::read_to_string(t.train_out.join(TOP_K_FILE)).unwrap().starts_with("rank,epoch,val_uar,checkpoint_path\n1,"));

    let single = predict(&t, vec![top[0].clone()], "single.csv", 1);
    let doubled = predict(&t, vec![top[0].clone(), top[0].clone()], "doubled.csv", 1);
    assert_eq!(fs::read(&single).unwrap(), fs::read(&doubled).unwrap());

    // Fused output equals the oracle built from each model's own predictions.
    let fused = predict(&t, top.clone(), "fused.csv", 1);
    let manifest = Manifest::read(&t.manifest).unwrap();
    let mut sets = Vec::new();
    for p in &top {
        let mut ckpt = load_checkpoint(p).unwrap();
        let samples = load_samples(&manifest, Some(Split::Val), ckpt.architecture, 1).unwrap();
        let probs = predict_probs(&mut ckpt.model, &samples, 16).unwrap();
        sets.push(burstnet::eval::PredictionSet::new(samples.ids.clone(), probs).unwrap());
    }
    let oracle = fuse_labels(&sets, FusionMethod::Mean).unwrap();
    let got = read_predictions(&fused).unwrap();
    assert_eq!(got.ids, oracle.ids);
    for (a, b) in got.probs.iter().zip(&oracle.probs) {
        assert!((a - b).abs() <= 1e-5);
    }
    assert_eq!(got.labels(), oracle.labels());

    let eval_dir = t.train_out.join("eval");
    let eval = cmd_evaluate(&EvaluateOptions {
        predictions: fused.clone(),
        manifest: t.manifest.clone(),
        out: Some(eval_dir.clone()),
    })
    .unwrap();
    assert_eq!(eval.confusion.total(), 40);
    assert!(eval_dir.join("confusion.csv").exists());
    let history = fs::read_to_string(history_path(&t.train_out)).unwrap();
    assert!(history.starts_with("epoch,train_accuracy,val_uar,checkpoint_path\n"));

    // The CLI entry point agrees, and flags beat the config file.
    let cfg = t.train_out.join("predict.cfg");
    let cli_out = t.train_out.join("cli.csv");
    fs::write(
        &cfg,
        format!(
            "manifest={}\nout={}\nhistory={}\ntop_k=1\nsplit=val\neval_batch=16\n",
            s(&t.manifest),
            s(&t.train_out.join("ignored.csv")),
            s(&history_path(&t.train_out))
        ),
    )
    .unwrap();
    assert_eq!(run(&["predict", "--config", s(&cfg), "--top-k", "3", "--out", s(&cli_out)]), EXIT_OK);
    assert!(!t.train_out.join("ignored.csv").exists());
    assert_eq!(fs::read(&cli_out).unwrap(), fs::read(&fused).unwrap());
    assert_eq!(run(&["evaluate", "--manifest", s(&t.manifest), "--predictions", s(&cli_out)]), EXIT_OK);
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = write_cluster_corpus(dir.path(), &Clusters::new(8.0, 1), 0, 3, 2);
    let m = Manifest::read(&manifest).unwrap();
    let mut csv = String::from("id,label,p0,p1,p2,p3,p4,p5,p6,p7\n");
    for r in &m.rows {
        let l = r.label.unwrap();
        let probs: Vec<String> = (0..8).map(|c| if c == l { "1.000000".into() } else { "0.000000".into() }).collect();
        csv.push_str(&format!("{},{},{}\n", r.id(), burstnet::models::CLASS_NAMES[l], probs.join(",")));
    }
    let preds = dir.path().join("p.csv");
    fs::write(&preds, &csv).unwrap();
    let eval = cmd_evaluate(&EvaluateOptions { predictions: preds.clone(), manifest: manifest.clone(), out: None }).unwrap();
    assert_eq!((eval.uar, eval.accuracy), (1.0, 1.0));

    fs::write(&preds, csv.replacen("cry_000", "cry_999", 1)).unwrap();
    let err = cmd_evaluate(&EvaluateOptions { predictions: preds.clone(), manifest: manifest.clone(), out: None }).unwrap_err();
    assert!(err.to_string().contains("id mismatch"), "{err}");
    assert_eq!(err.exit_code(), EXIT_DATA);
    assert_eq!(run(&["evaluate", "--manifest", s(&manifest), "--predictions", s(&preds)]), EXIT_DATA);
}

#[test]
fn results_do_not_depend_on_workers() {
    let a = train_small_mlp(1, 8);
    let b = train_small_mlp(3, 8);
    assert_eq!(
        fs::read_to_string(history_path(&a.train_out)).unwrap(),
        fs::read_to_string(history_path(&b.train_out)).unwrap()
    );
    let ckpt = |t: &Trained| checkpoints_from_history(&history_path(&t.train_out), 1).unwrap();
    let pa = predict(&a, ckpt(&a), "p.csv", 1);
    let pb = predict(&b, ckpt(&b), "p.csv", 4);
    assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
}

#[test]
fn non_finite_features_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("path,label,split\n");
    let mut rng = SeedTree::new(1).rng("x");
    for c in 0..8 {
        for (i, split) in ["train", "train", "val"].iter().enumerate() {
            let mut v: Vec<f32> = (0..768).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            if c == 3 && i == 0 {
                v[10] = f32::NAN;
            }
            let name = format!("f{c}_{i}.mat1");
            write_mat1(dir.path().join(&name), &Matrix::from_vec(1, 768, v)).unwrap();
            manifest.push_str(&format!("{name},{},{split}\n", burstnet::models::CLASS_NAMES[c]));
        }
    }
    let m = dir.path().join("manifest.csv");
    fs::write(&m, manifest).unwrap();
    let out = dir.path().join("run");
    let code = run(&["train", "--manifest", s(&m), "--out", s(&out), "--approach", "embedding", "--epochs", "2", "--batch-size", "16"]);
    assert_eq!(code, EXIT_NUMERIC);
    assert!(matches!(CliError::from(Error::Numeric("x".into())).exit_code(), EXIT_NUMERIC));
}
