use irtrack_core::metrics::FrameAnnotation;
use irtrack_core::fusion::FusionMode;
use irtrack_harness::pipeline::{run_pipeline, run_pipeline_with, AttentionKind, Tracker};
use irtrack_harness::synth::generate_sequence;
use irtrack_harness::RunConfig;

fn short(frames: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.sequence.frames = frames;
    c
}

#[test]
fn first_frame_reports_the_given_box() {
    let c = short(1);
    let seq = generate_sequence(&c).unwrap();
    let preds = run_pipeline(&seq, &c).unwrap();
    assert_eq!(preds, vec![seq.annotations[0].gt]);
}

#[test]
fn invisible_first_frame_is_an_error() {
    let c = short(3);
    let mut seq = generate_sequence(&c).unwrap();
    seq.annotations[0] = FrameAnnotation::invisible(0);
    assert!(Tracker::new(&c, AttentionKind::Thresholded).unwrap().track(&seq).is_err());
}

#[test]
fn full_mass_threshold_matches_vanilla_attention() {
    let mut c = short(12);
    c.imc.threshold = 1.0;
    let seq = generate_sequence(&c).unwrap();
    assert_eq!(
        run_pipeline_with(&seq, &c, AttentionKind::Thresholded).unwrap(),
        run_pipeline_with(&seq, &c, AttentionKind::Vanilla).unwrap()
    );
}

#[test]
fn runs_are_deterministic() {
    let c = short(10);
    let seq = generate_sequence(&c).unwrap();
    assert_eq!(run_pipeline(&seq, &c).unwrap(), run_pipeline(&seq, &c).unwrap());
}

#[test]
fn baseline_fusion_modes_run() {
    for mode in [FusionMode::Sum, FusionMode::Concat] {
        let mut c = short(6);
        c.dsfam.fusion = mode;
        c.dcfam.fusion = mode;
        let seq = generate_sequence(&c).unwrap();
        let preds = run_pipeline(&seq, &c).unwrap();
        assert_eq!(preds.len(), 6);
    }
}

#[test]
fn response_map_has_search_token_resolution() {
    let c = short(2);
    let seq = generate_sequence(&c).unwrap();
    let t = Tracker::new(&c, AttentionKind::Thresholded).unwrap();
    let z = t.template_tokens(&seq.frames[0], &seq.annotations[0].gt.unwrap()).unwrap();
    let r = t.respond(&seq.frames[1], &z).unwrap();
    let side = c.image.search_size / c.model.stride();
    assert_eq!(r.response.len(), side * side);
    assert!(r.peak.is_finite());
}
