use std::fs;
use std::path::Path;

use sonovote::ensemble::TieBreak;
use sonovote::metrics::MetricsReport;
use sonovote::neuralnet::{Family, ModelSpec};
use sonovote::run::{
    render_table, run_cv, run_ensemble, summary_rows, CvOptions, DatasetSource, ModelEntry, RunConfig, RunLayout,
    TableFormat, TrainSettings,
};
use sonovote::synth::{self, SynthConfig};

fn tiny_config(data: &Path, out: &Path, models: &[Family]) -> RunConfig {
    let mut cfg = RunConfig::template();
    cfg.name = "t".into();
    cfg.out_root = Some(out.to_path_buf());
    cfg.datasets = vec![DatasetSource {
        origin: "s".into(),
        root: data.to_path_buf(),
    }];
    cfg.ensemble.members = 2;
    cfg.models = models
        .iter()
        .map(|&f| ModelEntry {
            name: f.name().into(),
            spec: ModelSpec {
                input_hw: (12, 12),
                stage_widths: vec![2, 3],
                ..ModelSpec::desk(f)
            },
            train: TrainSettings {
                epochs: 1,
                ..TrainSettings::default()
            },
        })
        .collect();
    cfg
}

fn dataset(dir: &Path) {
    let cfg = SynthConfig {
        per_class: 10,
        size: 16,
        seed: 1,
        origin: "s".into(),
    };
    synth::write_dataset(dir, &cfg).unwrap();
}

fn count_files(root: &Path, name: &str) -> usize {
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            n += count_files(&p, name);
        } else if p.file_name().unwrap() == name {
            n += 1;
        }
    }
    n
}

#[test]
fn two_models_five_folds_counting_contract_and_reruns() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    dataset(data.path());
    let cfg = tiny_config(data.path(), out.path(), &[Family::PlainStack, Family::Residual]);
    let a = run_cv(&cfg, None, &CvOptions::default()).unwrap();
    let dir_a = a.run_dir.unwrap();
    assert_eq!(count_files(&dir_a, "checkpoint.bin"), 10);
    assert_eq!(count_files(&dir_a, "report.json"), 10);
    assert_eq!(fs::read_dir(dir_a.join("reports")).unwrap().count(), 2);
    assert!(a.summary.failures.is_empty());

    // Same config and seed: new directory, byte-identical plan and weights.
    let b = run_cv(&cfg, None, &CvOptions::default()).unwrap();
    let dir_b = b.run_dir.unwrap();
    assert_ne!(dir_a, dir_b);
    assert_eq!(fs::read(dir_a.join("folds.json")).unwrap(), fs::read(dir_b.join("folds.json")).unwrap());
    let la = RunLayout::new(&dir_a);
    let lb = RunLayout::new(&dir_b);
    for fold in 0..5 {
        for m in ["plain_stack", "residual"] {
            let ca = fs::read(la.model_dir(fold, m).join("checkpoint.bin")).unwrap();
            let cb = fs::read(lb.model_dir(fold, m).join("checkpoint.bin")).unwrap();
            assert!(ca == cb, "checkpoint differs for fold {fold} model {m}");
        }
    }
    // The written config reparses to the one that was run.
    assert_eq!(la.read_config().unwrap(), cfg);
}

#[test]
fn ensemble_and_report_over_a_finished_run() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    dataset(data.path());
    let cfg = tiny_config(data.path(), out.path(), &Family::ALL);
    let run_dir = run_cv(&cfg, None, &CvOptions::default()).unwrap().run_dir.unwrap();
    let layout = RunLayout::new(&run_dir);

    // Before fusion the ensemble row is a gap.
    let rows = summary_rows(&run_dir, None).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].accuracy.is_none());

    let e = run_ensemble(&run_dir, 3, TieBreak::SummedProbability).unwrap();
    assert_eq!(e.spec.member_ids.len(), 3);
    let votes = fs::read_to_string(e.dir.join("votes.jsonl")).unwrap();
    assert_eq!(votes.lines().count(), 30);
    for f in ["ensemble.json", "report.json", "report_pooled.json", "confusion.csv", "roc.csv", "roc.svg"] {
        assert!(e.dir.join(f).is_file(), "{f} missing");
    }
    assert!(run_ensemble(&run_dir, 3, TieBreak::SummedProbability).is_err());
    assert!(run_ensemble(&run_dir, 4, TieBreak::SummedProbability).is_err());

    let rows = summary_rows(&run_dir, Some(&e.dir)).unwrap();
    assert_eq!(rows.len(), cfg.models.len() + 1);
    for (row, m) in rows.iter().zip(&cfg.models) {
        let r = MetricsReport::read_json(&layout.mean_report(&m.name)).unwrap();
        assert_eq!(row.accuracy, Some(r.accuracy));
        assert_eq!(row.sensitivity, r.macro_avg.sensitivity);
        assert_eq!(row.specificity, r.macro_avg.specificity);
        assert_eq!(row.auc, r.macro_avg.auc);
    }
    assert_eq!(rows[3].accuracy, Some(e.report.accuracy));

    let csv = render_table(&rows, TableFormat::Csv);
    for (line, row) in csv.lines().skip(1).zip(&rows) {
        let acc: f64 = line.rsplit(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(Some(acc), row.accuracy);
    }
    let md = render_table(&rows, TableFormat::Markdown);
    assert_eq!(md.lines().count(), 2 + rows.len());
}

#[test]
fn dry_run_writes_nothing() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    dataset(data.path());
    let cfg = tiny_config(data.path(), out.path(), &[Family::PlainStack]);
    let opts = CvOptions {
        dry_run: true,
        ..CvOptions::default()
    };
    let o = run_cv(&cfg, None, &opts).unwrap();
    assert!(o.run_dir.is_none());
    assert_eq!(o.plan.assignment.len(), 30);
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}
