use gpsurvey::mission::{run_mission, MissionConfig, PlannerChoice};
use gpsurvey::world::{generate_synthetic_field, ObstacleMap, SyntheticFieldSpec};

fn main() {
    let field = generate_synthetic_field(5, &SyntheticFieldSpec::default()).unwrap();
    let config = MissionConfig {
        budget_s: 60.0,
        planner: PlannerChoice::Ours,
        seed: 3,
        metric_grid: (40, 40),
        ..Default::default()
    };
    eprintln!("starting");
    let log = run_mission(&config, &field, &ObstacleMap::empty()).unwrap();
    eprintln!(
        "done: poses={} meas={} metrics={} events={}",
        log.poses.len(),
        log.measurements.len(),
        log.metrics.len(),
        log.events.len()
    );
    for e in log.events.iter().take(30) {
        eprintln!("  t={:.1} {} {}", e.t, e.kind, e.detail);
    }
}
