mod common;

use std::fs;

use common::{ok, snapshot, starlab, write_config};
use starlab::adaptation::RunReport;
use starlab::corpus::{load_corpus, save_corpus};
use starlab::harness::{AdaptRecord, SourceReport, SweepReport};
use starlab::uttfilter::drop_count;

fn code(o: &std::process::Output) -> Option<i32> {
    o.status.code()
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "");
    let bad = write_config(dir.path(), "model.depth = 3\n");
    assert_eq!(code(&starlab(&bad, &out, &["gen-corpus"])), Some(2));
    assert_eq!(code(&starlab(&cfg, &out, &["train-source"])), Some(3));
    ok(&starlab(&cfg, &out, &["gen-corpus"]));
    assert_eq!(code(&starlab(&cfg, &out, &["sweep", "--axis", "depth"])), Some(2));
    assert_eq!(code(&starlab(&cfg, &out, &["adapt", "--arm", "best"])), Some(2));
    assert_eq!(code(&starlab(&cfg, &out, &["adapt", "--arm", "frozen"])), Some(2));
    assert_eq!(code(&starlab(&cfg, &out, &["adapt"])), Some(3));
    assert_eq!(code(&starlab(&cfg, &out, &["report"])), Some(3));
}

#[test]
fn gen_corpus_refuses_overwrite_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "");
    ok(&starlab(&cfg, &out, &["gen-corpus"]));
    let corpora = out.join("seed-0/corpora");
    let first = snapshot(&corpora);
    let names: Vec<String> = first.iter().map(|(p, _)| p.display().to_string()).collect();
    assert_eq!(
        names,
        [
            "far.test.jsonl",
            "far.train.jsonl",
            "manifest.json",
            "near.test.jsonl",
            "near.train.jsonl",
            "src.test.jsonl",
            "src.train.jsonl",
            "src.valid.jsonl"
        ]
    );
    let again = starlab(&cfg, &out, &["gen-corpus"]);
    assert_eq!(code(&again), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&starlab(&cfg, &out, &["gen-corpus", "--force"]));
    assert_eq!(snapshot(&corpora), first);
    ok(&starlab(&cfg, &out, &["gen-corpus", "--seed", "1"]));
    assert_ne!(snapshot(&out.join("seed-1/corpora"))[1].1, first[1].1);
}

#[test]
fn train_source_warns_resumes_and_depends_on_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let strict = write_config(dir.path(), "train.target_ter = 0.0\ntrain.max_epochs = 1\n");
    ok(&starlab(&strict, &out, &["gen-corpus"]));
    ok(&starlab(&strict, &out, &["gen-corpus", "--seed", "1"]));
    let warn = starlab(&strict, &out, &["train-source"]);
    assert_eq!(code(&warn), Some(4));
    assert!(String::from_utf8_lossy(&warn.stderr).contains("warning"));
    let ckpt = out.join("seed-0/source/model.ckpt");
    assert!(ckpt.is_file());
    let report: SourceReport = serde_json::from_slice(&fs::read(out.join("seed-0/source/report.json")).unwrap()).unwrap();
    assert!(!report.converged);
    assert_eq!(report.epochs, 1);

    let resume = write_config(dir.path(), "train.target_ter = 0.0\ntrain.max_epochs = 2\ntrain.resume = true\n");
    assert_eq!(code(&starlab(&resume, &out, &["train-source"])), Some(4));
    let resumed: SourceReport =
        serde_json::from_slice(&fs::read(out.join("seed-0/source/report.json")).unwrap()).unwrap();
    assert_eq!(resumed.epochs, 2);
    assert_eq!(resumed.steps, 2 * report.steps);
    let curve = fs::read_to_string(out.join("seed-0/source/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    assert_eq!(code(&starlab(&strict, &out, &["train-source", "--seed", "1"])), Some(4));
    assert_ne!(fs::read(&ckpt).unwrap(), fs::read(out.join("seed-1/source/model.ckpt")).unwrap());
}

#[test]
fn full_pipeline_on_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "");
    ok(&starlab(&cfg, &out, &["gen-corpus"]));
    ok(&starlab(&cfg, &out, &["train-source"]));
    ok(&starlab(&cfg, &out, &["adapt"]));
    let seed = out.join("seed-0");

    // Self-training is STAR with uniform weights and no filter.
    let uniform = write_config(dir.path(), "adapt.weight_mode = uniform\nadapt.filter_origin = none\n");
    let alt = dir.path().join("alt");
    fs::create_dir_all(alt.join("seed-0")).unwrap();
    for sub in ["corpora", "source"] {
        let from = seed.join(sub);
        fs::create_dir_all(alt.join("seed-0").join(sub)).unwrap();
        for e in fs::read_dir(&from).unwrap() {
            let p = e.unwrap().path();
            fs::copy(&p, alt.join("seed-0").join(sub).join(p.file_name().unwrap())).unwrap();
        }
    }
    ok(&starlab(&uniform, &alt, &["adapt", "--arm", "star"]));
    for d in ["far", "near"] {
        assert_eq!(
            fs::read(seed.join(format!("adapt/{d}/self-train/model.ckpt"))).unwrap(),
            fs::read(alt.join(format!("seed-0/adapt/{d}/star/model.ckpt"))).unwrap()
        );
    }

    // Per-round kept counts follow alpha.
    let rec: AdaptRecord = serde_json::from_slice(&fs::read(seed.join("adapt/far/star/report.json")).unwrap()).unwrap();
    let run: RunReport = rec.run.unwrap();
    assert_eq!(run.rounds.len(), 2);
    for r in &run.rounds {
        let n = r.pseudo_labels;
        assert_eq!(r.kept + r.too_short + r.degenerate + r.truncated + r.dropped_by_filter, n);
        assert_eq!(r.truncated + r.dropped_by_filter, drop_count(n, 20.0).max(r.truncated));
    }
    assert!(seed.join("adapt/far/star/filter-round1.csv").is_file());
    assert_eq!(rec.config["seed"], "0");

    // Supervised needs references.
    let train = seed.join("corpora/near.train.jsonl");
    let c = load_corpus(&train).unwrap();
    save_corpus(&c.without_references(), &train).unwrap();
    let sup = starlab(&cfg, &out, &["adapt", "--arm", "supervised", "--force"]);
    assert_eq!(code(&sup), Some(3));
    assert!(String::from_utf8_lossy(&sup.stderr).contains("reference"));
    save_corpus(&c, &train).unwrap();
    ok(&starlab(&cfg, &out, &["adapt", "--arm", "supervised", "--force"]));

    // Evaluation grid and relative reductions.
    ok(&starlab(&cfg, &out, &["evaluate"]));
    let results = fs::read_to_string(seed.join("eval/results.csv")).unwrap();
    let rows: Vec<Vec<&str>> = results.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), (1 + 6 * 2) * 3);
    for r in &rows {
        let (ter, frozen): (f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap());
        if frozen > 0.0 {
            let rr: f64 = r[7].parse().unwrap();
            assert!((rr - (frozen - ter) / frozen).abs() <= 1e-12);
        } else {
            assert_eq!(r[7], "undefined");
        }
    }
    let first = snapshot(&seed.join("eval"));
    ok(&starlab(&cfg, &out, &["evaluate", "--force"]));
    assert_eq!(snapshot(&seed.join("eval")), first);

    // Sweeps.
    ok(&starlab(&cfg, &out, &["sweep", "--axis", "train_size"]));
    let ts = fs::read_to_string(seed.join("sweep/train_size.csv")).unwrap();
    assert_eq!(ts.lines().count(), 1 + 5);
    assert_eq!(code(&starlab(&cfg, &out, &["sweep", "--axis", "train_size"])), Some(2));

    ok(&starlab(&cfg, &out, &["sweep", "--axis", "rounds"]));
    let rounds: SweepReport = serde_json::from_slice(&fs::read(seed.join("sweep/rounds.json")).unwrap()).unwrap();
    assert_eq!(rounds.points.len(), 3);
    assert_eq!(rounds.points[0].ter, rounds.points[0].frozen_ter);

    ok(&starlab(&cfg, &out, &["sweep", "--axis", "threshold"]));
    let th = fs::read_to_string(seed.join("sweep/threshold.csv")).unwrap();
    assert_eq!(th.lines().count(), 1 + 2 * 3);

    ok(&starlab(&cfg, &out, &["sweep", "--axis", "alpha"]));
    assert_eq!(fs::read_to_string(seed.join("sweep/alpha.csv")).unwrap().lines().count(), 3);
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = starlab(&cfg, &dir.path().join("out"), &["show-config", "--seed", "7"]);
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let parsed = starlab::harness::ExperimentConfig::parse(&text).unwrap();
    assert_eq!(parsed.seed, 7);
    assert_eq!(parsed.corpus.domains.len(), 3);
}
