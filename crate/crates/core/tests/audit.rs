use std::fs;
use std::path::Path;

use segbias::audit::{
    run_audit, run_fig1_experiment, summarize, AuditConfig, AuditSummary, Fig1Config, Fig1Model, PredictionSource,
    METRICS_FILE, SUMMARY_FILE,
};
use segbias::errorsim::{calibrate_strength, perturb, subject_seed, ErrorKind, ErrorModel, MAX_DSC_GAP, MIN_BIAS_GAP};
use segbias::metrics::read_records_csv;
use segbias::phantom::{generate_cohort, Cohort, CohortSpec, Group, PhantomSpec};
use segbias::volume::{self, Format, LabelMap};

fn cohort() -> Cohort {
    let spec = CohortSpec {
        n_per_group: 8,
        effect_ratio: 1.1,
        seed: 21,
        ..Default::default()
    };
    let mut c = generate_cohort(&PhantomSpec::default_ellipsoid(), &spec).unwrap();
    for s in &mut c.subjects {
        s.image = None;
    }
    c
}

/// Writes the cohort plus one prediction per subject into `dir/preds`.
fn write_with_predictions(c: &Cohort, dir: &Path, pred: impl Fn(usize, &LabelMap, Group) -> LabelMap) -> AuditConfig {
    segbias::phantom::write_cohort(c, dir, Format::SimpleVol).unwrap();
    let preds = dir.join("preds");
    fs::create_dir_all(&preds).unwrap();
    for (i, s) in c.subjects.iter().enumerate() {
        let p = pred(i, &s.reference, s.group);
        volume::save_labels(&p, preds.join(format!("{}.nii.gz", s.id)), Format::Nifti).unwrap();
    }
    let mut config = AuditConfig::new(dir.join("cohort.json"));
    config.predictions = Some(PredictionSource {
        dir: preds,
        pattern: "{id}.nii.gz".into(),
    });
    config
}

#[test]
fn eroding_group_l_biases_only_group_l() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort();
    let l_refs: Vec<LabelMap> = c.group(Group::L).map(|s| s.reference.clone()).collect();
    let erode = calibrate_strength(&l_refs, 1, ErrorKind::SystematicErode, -0.20, 5).unwrap();
    let mut l_index = 0;
    let l_order: Vec<usize> = c
        .subjects
        .iter()
        .map(|s| {
            let i = l_index;
            if s.group == Group::L {
                l_index += 1;
            }
            i
        })
        .collect();
    let config = write_with_predictions(&c, dir.path(), |i, r, g| match g {
        Group::H => r.clone(),
        Group::L => {
            let model = ErrorModel::new(ErrorKind::SystematicErode, erode.strength, subject_seed(5, l_order[i])).unwrap();
            perturb(r, &model).unwrap()
        }
    });
    let report = run_audit(&config).unwrap();
    let group = |g: Group| report.summary.groups.iter().find(|s| s.group == g).unwrap();
    assert_eq!(group(Group::H).median_volume_bias, 0.0);
    let l = group(Group::L).median_volume_bias;
    assert!((l + 0.20).abs() < 0.01, "{l}");
}

#[test]
fn unbiased_noisy_predictions_keep_auc() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort();
    let config = write_with_predictions(&c, dir.path(), |i, r, _| {
        perturb(r, &ErrorModel::new(ErrorKind::RandomBalanced, 0.3, subject_seed(8, i)).unwrap()).unwrap()
    });
    let report = run_audit(&config).unwrap();
    let auc = report.summary.auc[0];
    assert!((auc.predicted - auc.reference).abs() <= 0.05, "{auc:?}");
    assert!(report.records.iter().all(|r| r.dsc < 1.0));
}

#[test]
fn summary_is_recomputable_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort();
    let mut config = write_with_predictions(&c, dir.path(), |i, r, _| {
        perturb(r, &ErrorModel::new(ErrorKind::SystematicDilate, 0.3, subject_seed(2, i)).unwrap()).unwrap()
    });
    config.positive_group = Group::H;
    let report = run_audit(&config).unwrap();
    let out = dir.path().join("out");
    report.write(&out).unwrap();

    let records = read_records_csv(fs::File::open(out.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(records, report.records);
    let summary: AuditSummary = serde_json::from_str(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    let (groups, auc) = summarize(&records, &config.labels, config.positive_group).unwrap();
    assert_eq!(summary.groups, groups);
    assert_eq!(summary.auc, auc);
    assert_eq!(summary.provenance.config_sha256, config.hash().unwrap());
}

#[test]
fn downsampled_predictions_are_scored_on_the_reference_grid() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort();
    let config = write_with_predictions(&c, dir.path(), |_, r, _| {
        segbias::resample::resample_labels_majority(r, segbias::resample::ScaleFactor::isotropic(0.5, 3).unwrap()).unwrap()
    });
    let report = run_audit(&config).unwrap();
    for r in &report.records {
        assert!(r.dsc > 0.5 && r.dsc < 1.0, "{r:?}");
        // physical volume on the coarse grid
        assert_eq!(r.volume_pred_mm3 % 8.0, 0.0);
    }
}

#[test]
fn fig1_reports_configured_models() {
    let config = Fig1Config {
        n_per_group: 5,
        models: vec![Fig1Model::Systematic, Fig1Model::Random, Fig1Model::Downsampled { voxel_mm: 3.0 }],
        ..Default::default()
    };
    let report = run_fig1_experiment(&config).unwrap();
    let names: Vec<&str> = report.summary.models.iter().map(|m| m.model.as_str()).collect();
    assert_eq!(names, ["systematic", "random", "downsampled-3mm"]);
    assert_eq!(report.records.len(), 3 * 10);
    assert!(report.summary.dsc_gap.unwrap() < MAX_DSC_GAP);
    assert!(report.summary.bias_gap.unwrap() > MIN_BIAS_GAP);
    let down = &report.summary.models[2];
    assert!(down.median_volume_bias < 0.0);
    assert_eq!(report.summary.models[1].median_volume_bias, 0.0);
    let hist_models: std::collections::BTreeSet<&str> = report.histograms.iter().map(|h| h.model.as_str()).collect();
    assert_eq!(hist_models.len(), 3);
    for q in ["volume_mm3", "dsc", "volume_bias"] {
        for m in &names {
            let n: usize = report
                .histograms
                .iter()
                .filter(|h| h.quantity == q && h.model == *m)
                .map(|h| h.count)
                .sum();
            assert_eq!(n, 10);
        }
    }
}
