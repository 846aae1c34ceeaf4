use super::*;
use crate::pnm::parse_pbm;
use crate::synthdoc::{generate, ContentRegion, LayoutSpec, RegionKind};

fn small_config() -> PipelineConfig {
    PipelineConfig::from_toml(
        r#"
        seed = 3
        image_size = 128
        projector_dim = 16
        [encoder]
        depths = [1, 1, 1, 1]
        window = 4
        embed_dim = 8
        [ifm]
        classifier_hidden = 8
        [corpus]
        documents = 3
        content_fraction = 0.5
        "#,
    )
    .unwrap()
}

fn zero(cfg: &mut PipelineConfig) {
    cfg.thresholds = crate::content_filter::ThresholdSchedule::zero(4);
}

#[test]
fn zero_thresholds_keep_everything_and_match_reference() {
    let mut cfg = small_config();
    zero(&mut cfg);
    let p = Pipeline::new(cfg).unwrap();
    let corpus = p.corpus().unwrap();
    let doc = &corpus.docs[0];
    let instr = p.instruction_for(doc, 0).unwrap();
    let run = p.run_document(0, doc, &instr).unwrap();
    assert_eq!(run.report.kept_final, 16);
    assert_eq!(run.report.sequence_length, 16 + instr.len());
    let reference = p.reference_tokens(doc, &instr).unwrap();
    assert_eq!(reference.kept_indices, run.filter.kept_indices);
    assert!(run.tokens.max_rel_diff(&reference.kept_tokens) <= 1e-9);
    for m in [
        &run.report.masks.post_stage2,
        &run.report.masks.post_stage4,
        &run.report.masks.post_ifm,
    ] {
        assert!(m.bits.bytes().all(|b| b == b'1'));
    }
}

#[test]
fn report_is_consistent_and_deterministic() {
    let p = Pipeline::new(small_config()).unwrap();
    let corpus = p.corpus().unwrap();
    let (a, _) = p.run(&corpus).unwrap();
    let (b, _) = Pipeline::new(small_config()).unwrap().run(&corpus).unwrap();
    assert_eq!(a.check_consistency(), Vec::<String>::new());
    let ja = a.to_json().unwrap();
    assert_eq!(ja, b.to_json().unwrap());
    assert_eq!(RunReport::from_json(&ja).unwrap().to_json().unwrap(), ja);
    assert_eq!(a.to_csv().unwrap().lines().count(), 4);
    assert_eq!(a.geometry.stage_grids, vec![32, 16, 8, 4]);
    assert_eq!(a.geometry.initial_tokens, 1024);
    assert!(a.totals.blank_dropped > 0);
}

#[test]
fn context_budget_flag() {
    let mut cfg = small_config();
    cfg.context_budget = 2;
    let p = Pipeline::new(cfg).unwrap();
    let (r, _) = p.run(&p.corpus().unwrap()).unwrap();
    assert!(r.documents.iter().all(|d| !d.context_fit));
    assert!(!r.totals.all_fit_context);
    assert!(r.check_consistency().is_empty());
}

#[test]
fn rejects_inconsistent_setups() {
    let mut cfg = small_config();
    cfg.detector.variant = DetectorVariant::Mlp;
    assert!(matches!(Pipeline::new(cfg), Err(Error::Config(_))));
    let cfg = small_config();
    assert!(Pipeline::with_models(cfg.clone(), DetectorModel::oracle(8), None).is_err());
    let wide = IfmModel::new(crate::instruction_filter::IfmConfig::default(), 0.5, 0).unwrap();
    assert!(Pipeline::with_models(cfg, DetectorModel::oracle(4), Some(wide)).is_err());
}

#[test]
fn single_region_masks_nest() {
    let spec = LayoutSpec {
        image_size: 128,
        regions: vec![ContentRegion {
            kind: RegionKind::Table,
            x: 4,
            y: 4,
            w: 20,
            h: 12,
            texture_seed: 1,
        }],
        background_value: 0.96,
        target_content_fraction: 20.0 * 12.0 / 16384.0,
        seed: 0,
    };
    let doc = generate(&spec).unwrap();
    let mut cfg = small_config();
    cfg.thresholds.eps_i = 0.4;
    let p = Pipeline::new(cfg).unwrap();
    let instr = p.instruction_for(&doc, 0).unwrap();
    let r = p.run_document(0, &doc, &instr).unwrap().report;
    let s4 = r.masks.post_stage4.kept();
    let ifm = r.masks.post_ifm.kept();
    // Content lives in the top-left 32×32 cell only.
    assert!(s4[0] && s4[1..].iter().all(|&k| !k));
    assert!(ifm.iter().zip(&s4).all(|(&i, &s)| !i || s));
}

#[test]
fn sweep_rows_and_single_point() {
    let p = Pipeline::new(small_config()).unwrap();
    let corpus = p.corpus().unwrap();
    let res = sweep(&p, &corpus, &[(0.25, 0.5)]).unwrap();
    let (run, _) = p
        .with_thresholds(vec![0.25; 4], 0.5)
        .unwrap()
        .run(&corpus)
        .unwrap();
    assert_eq!(res.reports[0], run);
    let res = sweep(
        &p,
        &corpus,
        &[(0.0, 0.0), (0.5, 0.0), (0.5, 0.6), (2.0, 0.0)],
    )
    .unwrap();
    assert_eq!(res.rows.len(), 3);
    assert_eq!(res.failures.len(), 1);
    assert!(res.violations.is_empty(), "{:?}", res.violations);
    let csv = res.summary_csv().unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("eps_c,eps_i,encoder_flops"));
}

#[test]
fn violation_detection() {
    let row = |c: f64, i: f64, total: u64| SweepRow {
        eps_c: c,
        eps_i: i,
        encoder_flops: 0,
        projector_flops: 0,
        ifm_flops: 0,
        decoder_flops: 0,
        total_flops: total,
        encoder_kept: 0,
        kept_final: 0,
        blank_dropped_fraction: 0.0,
    };
    let v =
        sweep::monotonicity_violations(&[row(0.25, 0.5, 10), row(0.5, 0.5, 11), row(0.5, 0.25, 5)]);
    assert_eq!(v.len(), 2);
}

#[test]
fn render_writes_native_grids() {
    let p = Pipeline::new(small_config()).unwrap();
    let (r, _) = p.run(&p.corpus().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = render_masks(&r, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let (rows, cols, kept) = parse_pbm(&std::fs::read(&files[0].post_stage2).unwrap()).unwrap();
    assert_eq!((rows, cols), (16, 16));
    assert_eq!(kept, r.documents[0].masks.post_stage2.kept());
    let (rows, cols, _) = parse_pbm(&std::fs::read(&files[0].post_ifm).unwrap()).unwrap();
    assert_eq!((rows, cols), (4, 4));
}

#[test]
fn ifm_training_installs_classifier() {
    let mut p = Pipeline::new(small_config()).unwrap();
    let docs = p.corpus().unwrap().docs;
    let samples = p.ifm_samples(&docs).unwrap();
    assert!(!samples.is_empty());
    assert!(samples.iter().all(|s| s.labels.len() == s.tokens.rows()));
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let before = p.ifm.fusion.clone();
    let curve = p.train_ifm(&docs, &cfg, IfmTrainScope::EndToEnd).unwrap();
    assert_ne!(p.ifm.fusion, before);
    assert_eq!(curve.len(), 4);
    assert!(p.echo().ifm_trained);
}

#[test]
fn decoder_cost_is_quadratic() {
    assert_eq!(decoder_flops(0), 0);
    assert_eq!(decoder_flops(3), 9 * DECODER_PAIR_FLOPS);
}
