use irtrack_harness::distill_demo::{run_distill_demo, DistillReport};
use irtrack_harness::RunConfig;

#[test]
fn report_round_trips_through_json() {
    let mut c = RunConfig::default();
    c.distill.steps = 2;
    let r = run_distill_demo(&c).unwrap();
    assert_eq!(r.losses.len(), r.steps_taken + 1);
    assert_eq!(r.step_sizes.len(), r.steps_taken);
    assert_eq!(DistillReport::from_json(&r.to_json()).unwrap(), r);
    assert!(DistillReport::from_json("{\"seed\": 1}").is_err());
}

#[test]
fn stage_losses_sum_to_the_total() {
    let mut c = RunConfig::default();
    c.distill.steps = 1;
    let r = run_distill_demo(&c).unwrap();
    let sum: f64 = r.per_stage_initial.iter().sum();
    assert!((sum - r.initial_loss()).abs() < 1e-12 * r.initial_loss().max(1.0));
    assert_eq!(r.per_stage_initial.len(), c.distill.student_channels.len());
}

#[test]
fn zero_steps_reports_only_the_initial_loss() {
    let mut c = RunConfig::default();
    c.distill.steps = 0;
    let r = run_distill_demo(&c).unwrap();
    assert_eq!(r.losses.len(), 1);
    assert_eq!(r.final_loss(), r.initial_loss());
}
